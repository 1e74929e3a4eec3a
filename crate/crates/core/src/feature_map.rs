use serde::{Deserialize, Serialize};

use crate::error::{OnnError, Result};

/// A row-major `height x width` grid of reals.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(OnnError::Shape(format!("empty map {height}x{width}")));
        }
        if data.len() != height * width {
            return Err(OnnError::Shape(format!(
                "{} values for a {height}x{width} map",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::filled(height, width, 0.0)
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        assert!(height > 0 && width > 0, "empty map");
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        assert!(height > 0 && width > 0, "empty map");
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.data[row * self.width + col] = value;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Population variance.
    pub fn variance(&self) -> f64 {
        let mu = self.mean();
        self.data.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / self.data.len() as f64
    }

    pub fn ensure_shape(&self, other: &FeatureMap) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(OnnError::Shape(format!(
                "{}x{} vs {}x{}",
                self.height, self.width, other.height, other.width
            )));
        }
        Ok(())
    }

    /// 2x2 non-overlapping average pooling. Both sides must be even.
    pub fn down2(&self) -> Result<Self> {
        if self.height % 2 != 0 || self.width % 2 != 0 {
            return Err(OnnError::Shape(format!(
                "odd dimensions {}x{} cannot be sub-sampled",
                self.height, self.width
            )));
        }
        let (h, w) = (self.height / 2, self.width / 2);
        Ok(Self::from_fn(h, w, |r, c| {
            let (r2, c2) = (2 * r, 2 * c);
            0.25 * (self.get(r2, c2) + self.get(r2, c2 + 1) + self.get(r2 + 1, c2) + self.get(r2 + 1, c2 + 1))
        }))
    }

    /// Adjoint of [`FeatureMap::down2`]: each delta is spread as `δ/4` over its
    /// 2x2 cell.
    pub fn down2_adjoint(&self) -> Self {
        Self::from_fn(self.height * 2, self.width * 2, |r, c| 0.25 * self.get(r / 2, c / 2))
    }

    /// 2x2 nearest-neighbour replication.
    pub fn up2(&self) -> Self {
        Self::from_fn(self.height * 2, self.width * 2, |r, c| self.get(r / 2, c / 2))
    }

    /// Adjoint of [`FeatureMap::up2`]: sums each replicated 2x2 block.
    pub fn up2_adjoint(&self) -> Result<Self> {
        if self.height % 2 != 0 || self.width % 2 != 0 {
            return Err(OnnError::Shape(format!(
                "odd dimensions {}x{} for up-sampling adjoint",
                self.height, self.width
            )));
        }
        Ok(Self::from_fn(self.height / 2, self.width / 2, |r, c| {
            let (r2, c2) = (2 * r, 2 * c);
            self.get(r2, c2) + self.get(r2, c2 + 1) + self.get(r2 + 1, c2) + self.get(r2 + 1, c2 + 1)
        }))
    }
}
