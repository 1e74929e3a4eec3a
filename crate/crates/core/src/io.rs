//! File helpers: atomic writes and binary PGM (P5) images.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{OnnError, Result};
use crate::feature_map::FeatureMap;

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let name = path
        .file_name()
        .ok_or_else(|| OnnError::Invalid(format!("not a file path: {}", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Decodes a binary PGM. Pixel values are returned unscaled (`0..=maxval`).
pub fn decode_pgm(bytes: &[u8]) -> Result<FeatureMap> {
    let mut pos = 0;
    let magic = next_token(bytes, &mut pos)?;
    if magic != b"P5" {
        return Err(OnnError::Format("not a binary PGM (P5)".into()));
    }
    let width = parse_header_number(bytes, &mut pos, "width")?;
    let height = parse_header_number(bytes, &mut pos, "height")?;
    let maxval = parse_header_number(bytes, &mut pos, "maxval")?;
    if width == 0 || height == 0 {
        return Err(OnnError::Format("zero image dimension".into()));
    }
    if !(1..=65535).contains(&maxval) {
        return Err(OnnError::Format(format!("maxval {maxval} out of range")));
    }
    // exactly one whitespace byte separates the header from the raster
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(OnnError::Format("missing raster separator".into()));
    }
    pos += 1;
    let bpp = if maxval < 256 { 1 } else { 2 };
    let need = width * height * bpp;
    let raster = bytes
        .get(pos..pos + need)
        .ok_or_else(|| OnnError::Format(format!("truncated raster: need {need} bytes")))?;
    let data = if bpp == 1 {
        raster.iter().map(|&b| f64::from(b)).collect()
    } else {
        raster
            .chunks_exact(2)
            .map(|p| f64::from(u16::from_be_bytes([p[0], p[1]])))
            .collect()
    };
    FeatureMap::new(height, width, data)
}

/// Encodes an 8-bit binary PGM. Values are rounded and clamped to `0..=255`.
pub fn encode_pgm(image: &FeatureMap) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", image.width(), image.height()).into_bytes();
    out.extend(image.as_slice().iter().map(|v| v.round().clamp(0.0, 255.0) as u8));
    out
}

pub fn read_pgm(path: &Path) -> Result<FeatureMap> {
    decode_pgm(&fs::read(path)?)
}

pub fn write_pgm(path: &Path, image: &FeatureMap) -> Result<()> {
    write_atomic(path, &encode_pgm(image))
}

fn skip_space_and_comments(bytes: &[u8], pos: &mut usize) {
    while *pos < bytes.len() {
        match bytes[*pos] {
            b'#' => {
                while *pos < bytes.len() && bytes[*pos] != b'\n' {
                    *pos += 1;
                }
            }
            b if b.is_ascii_whitespace() => *pos += 1,
            _ => break,
        }
    }
}

fn next_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a [u8]> {
    skip_space_and_comments(bytes, pos);
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() && bytes[*pos] != b'#' {
        *pos += 1;
    }
    if start == *pos {
        return Err(OnnError::Format("truncated header".into()));
    }
    Ok(&bytes[start..*pos])
}

fn parse_header_number(bytes: &[u8], pos: &mut usize, what: &str) -> Result<usize> {
    let tok = next_token(bytes, pos)?;
    std::str::from_utf8(tok)
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| OnnError::Format(format!("bad {what} in header")))
}

/// Decimal text for a float; infinities become `inf` / `-inf`.
pub fn format_float(v: f64) -> String {
    if v == f64::INFINITY {
        "inf".into()
    } else if v == f64::NEG_INFINITY {
        "-inf".into()
    } else {
        v.to_string()
    }
}

/// Serde adapter writing non-finite floats as the strings `inf`, `-inf`
/// and `nan`, since JSON has no literal for them.
pub mod float_or_inf {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if v.is_nan() {
            s.serialize_str("nan")
        } else {
            s.serialize_str(&super::format_float(*v))
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) => match t.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                "nan" => Ok(f64::NAN),
                other => Err(serde::de::Error::custom(format!("not a float: {other}"))),
            },
        }
    }
}
