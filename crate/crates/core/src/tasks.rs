//! Experiment harnesses: denoising, synthesis and transformation.
//!
//! Images are normalized into `[-1, 1]` by their own range. A fold runs one
//! prior BP on its training pairs, builds five candidate networks from the
//! resulting ledger and trains each several times, keeping the run with the
//! best training SNR.

use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backprop::{train, NoHook, TrainConfig};
use crate::error::{OnnError, Result};
use crate::feature_map::FeatureMap;
use crate::network::{Architecture, OnnModel};
use crate::operators::{OperatorConstants, OperatorSubLibrary};
use crate::rng::{derive_seed, rng_for};
use crate::spm::{build_network, prior_bp, HealthLedger, Selection, SpmConfig};

/// Side of the square thumbnails every task works on.
pub const IMAGE_SIZE: usize = 60;

/// Affine map of the image's own `[min, max]` onto `[-1, 1]`.
pub fn normalize(image: &FeatureMap) -> Result<FeatureMap> {
    let (lo, hi) = (image.min(), image.max());
    if !(hi > lo) || !(hi - lo).is_finite() {
        return Err(OnnError::DegenerateRange);
    }
    let scale = 2.0 / (hi - lo);
    Ok(image.map(|v| scale * (v - lo) - 1.0))
}

/// `10 log10(var(target) / var(target - output))` in dB. A perfect match
/// gives `+inf`.
pub fn snr(target: &FeatureMap, output: &FeatureMap) -> Result<f64> {
    target.ensure_shape(output)?;
    let signal = target.variance();
    if !(signal > 0.0) {
        return Err(OnnError::DegenerateRange);
    }
    let diff: Vec<f64> = target
        .as_slice()
        .iter()
        .zip(output.as_slice())
        .map(|(t, o)| t - o)
        .collect();
    let n = diff.len() as f64;
    let mu = diff.iter().sum::<f64>() / n;
    let noise = diff.iter().map(|d| (d - mu) * (d - mu)).sum::<f64>() / n;
    if noise == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (signal / noise).log10())
}

/// Each pixel independently replaced, with probability `p`, by -1 or +1.
pub fn salt_pepper<R: Rng + ?Sized>(image: &FeatureMap, p: f64, rng: &mut R) -> Result<FeatureMap> {
    if !(0.0..=1.0).contains(&p) {
        return Err(OnnError::Invalid(format!("corruption probability {p}")));
    }
    let mut out = image.clone();
    for v in out.as_mut_slice() {
        if rng.random::<f64>() < p {
            *v = if rng.random::<bool>() { 1.0 } else { -1.0 };
        }
    }
    Ok(out)
}

/// White Gaussian noise, normalized into `[-1, 1]`.
pub fn wgn<R: Rng + ?Sized>(height: usize, width: usize, rng: &mut R) -> Result<FeatureMap> {
    if height * width < 2 {
        return Err(OnnError::Invalid("noise image needs at least two pixels".into()));
    }
    let raw = FeatureMap::from_fn(height, width, |_, _| rng.sample(StandardNormal));
    normalize(&raw)
}

/// Named raw images (arbitrary range, typically 0..=255).
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub images: Vec<(String, FeatureMap)>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn ids(&self) -> Vec<String> {
        self.images.iter().map(|(id, _)| id.clone()).collect()
    }

    pub fn get(&self, id: &str) -> Result<&FeatureMap> {
        self.images
            .iter()
            .find(|(i, _)| i == id)
            .map(|(_, m)| m)
            .ok_or_else(|| OnnError::Invalid(format!("unknown image id {id}")))
    }

    /// Every `*.pgm` in `dir`, ordered by file name; ids are file stems.
    pub fn load_dir(dir: &Path) -> Result<Self> {
        let mut paths: Vec<_> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("pgm")))
            .collect();
        paths.sort();
        let mut images = Vec::with_capacity(paths.len());
        for p in paths {
            let id = p
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            images.push((id, crate::io::read_pgm(&p)?));
        }
        Ok(Self { images })
    }

    /// Procedural stand-in for a natural-image corpus.
    pub fn synthetic(count: usize, seed: u64) -> Self {
        let images = (0..count)
            .map(|i| (format!("syn{i:04}"), synthetic_image(seed, i as u64, IMAGE_SIZE)))
            .collect();
        Self { images }
    }
}

/// An 8-bit image with natural-image statistics: a random field with a
/// `1/f` amplitude spectrum overlaid with a few shaded shapes.
pub fn synthetic_image(seed: u64, index: u64, size: usize) -> FeatureMap {
    let mut rng = rng_for(seed, &[0x636f_7270, index]);
    let s = size as f64;
    let tau = std::f64::consts::TAU;
    let mut img = FeatureMap::zeros(size, size);

    const MAX_FREQ: i32 = 8;
    for ky in -MAX_FREQ..=MAX_FREQ {
        for kx in 0..=MAX_FREQ {
            if kx == 0 && ky <= 0 {
                continue;
            }
            let f = ((kx * kx + ky * ky) as f64).sqrt();
            let amp = rng.random_range(0.5..1.5) / f.powf(1.5);
            let phase: f64 = rng.random_range(0.0..tau);
            let (wx, wy) = (tau * kx as f64 / s, tau * ky as f64 / s);
            for r in 0..size {
                for c in 0..size {
                    let v = img.get(r, c) + amp * (wx * c as f64 + wy * r as f64 + phase).cos();
                    img.set(r, c, v);
                }
            }
        }
    }
    let spread = img.variance().sqrt().max(1e-12);
    img = img.map(|v| v / spread);

    for _ in 0..rng.random_range(1..=3) {
        let (cy, cx) = (rng.random_range(0.0..s), rng.random_range(0.0..s));
        let half: f64 = rng.random_range(s / 10.0..s / 4.0);
        let level: f64 = rng.random_range(-2.0..2.0);
        let (sy, sx): (f64, f64) = (rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05));
        let disk = rng.random::<bool>();
        for r in 0..size {
            for c in 0..size {
                let (dy, dx) = (r as f64 - cy, c as f64 - cx);
                // signed distance to the boundary, negative inside
                let d = if disk {
                    (dy * dy + dx * dx).sqrt() - half
                } else {
                    dy.abs().max(dx.abs()) - half
                };
                let cover = 1.0 / (1.0 + d.exp());
                let shade = level + sy * dy + sx * dx;
                img.set(r, c, (1.0 - cover) * img.get(r, c) + cover * shade);
            }
        }
    }
    let (lo, hi) = (img.min(), img.max());
    let span = if hi > lo { hi - lo } else { 1.0 };
    img.map(|v| (255.0 * (v - lo) / span).round())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Denoise,
    Synth,
    Transform,
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Denoise => "denoise",
            Self::Synth => "synth",
            Self::Transform => "transform",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub kind: TaskKind,
    /// Target images per fold for synthesis; images per fold group for
    /// transformation (6 of them form the 4 pairs). Unused for denoising.
    pub pairs_per_fold: usize,
    /// Salt-and-pepper corruption probability (denoising).
    pub noise_p: f64,
    /// Share of the corpus used for training in each denoising fold.
    pub train_fraction: f64,
    pub sublibrary: OperatorSubLibrary,
}

impl TaskSpec {
    pub fn new(kind: TaskKind) -> Self {
        match kind {
            TaskKind::Denoise => Self {
                kind,
                pairs_per_fold: 0,
                noise_p: 0.4,
                train_fraction: 0.1,
                sublibrary: OperatorSubLibrary::denoising(),
            },
            TaskKind::Synth => Self {
                kind,
                pairs_per_fold: 8,
                noise_p: 0.0,
                train_fraction: 1.0,
                sublibrary: OperatorSubLibrary::regression(),
            },
            TaskKind::Transform => Self {
                kind,
                pairs_per_fold: 8,
                noise_p: 0.0,
                train_fraction: 1.0,
                sublibrary: OperatorSubLibrary::regression(),
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.noise_p) {
            return Err(OnnError::Invalid(format!("noise_p = {} outside [0, 1]", self.noise_p)));
        }
        match self.kind {
            TaskKind::Denoise if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) => Err(
                OnnError::Invalid("train_fraction must lie in (0, 1)".into()),
            ),
            TaskKind::Synth if self.pairs_per_fold == 0 => {
                Err(OnnError::Invalid("pairs_per_fold must be positive".into()))
            }
            TaskKind::Transform if self.pairs_per_fold < 6 => Err(OnnError::Invalid(
                "transformation needs at least 6 images per fold".into(),
            )),
            _ => Ok(()),
        }
    }

    /// Images a fold consumes from the corpus.
    fn group_size(&self) -> usize {
        self.pairs_per_fold
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    /// 1-based.
    pub fold: usize,
    pub train: Vec<String>,
    /// Empty for synthesis and transformation.
    pub test: Vec<String>,
}

/// Deterministic fold partition. Denoising folds train on disjoint chunks of
/// `train_fraction` of the shuffled corpus and test on the rest; the other
/// tasks give each fold its own disjoint group of images.
pub fn build_folds(ids: &[String], spec: &TaskSpec, folds: usize, seed: u64) -> Result<Vec<FoldPlan>> {
    spec.validate()?;
    if folds == 0 {
        return Err(OnnError::Invalid("at least one fold is required".into()));
    }
    let mut order = ids.to_vec();
    order.shuffle(&mut rng_for(seed, &[0x666f_6c64]));
    match spec.kind {
        TaskKind::Denoise => {
            let chunk = ((ids.len() as f64 * spec.train_fraction).round() as usize).max(1);
            if ids.len() < 10 || chunk * folds > ids.len() || chunk == ids.len() {
                return Err(OnnError::CorpusTooSmall(format!(
                    "{} images for {folds} denoising folds",
                    ids.len()
                )));
            }
            Ok((0..folds)
                .map(|f| {
                    let range = f * chunk..(f + 1) * chunk;
                    let train = order[range.clone()].to_vec();
                    let test = order
                        .iter()
                        .enumerate()
                        .filter(|(i, _)| !range.contains(i))
                        .map(|(_, id)| id.clone())
                        .collect();
                    FoldPlan { fold: f + 1, train, test }
                })
                .collect())
        }
        TaskKind::Synth | TaskKind::Transform => {
            let group = spec.group_size();
            if group * folds > ids.len() {
                return Err(OnnError::CorpusTooSmall(format!(
                    "{} images for {folds} folds of {group}",
                    ids.len()
                )));
            }
            Ok(order
                .chunks(group)
                .take(folds)
                .enumerate()
                .map(|(f, g)| FoldPlan {
                    fold: f + 1,
                    train: g.to_vec(),
                    test: Vec::new(),
                })
                .collect())
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImagePair {
    pub id: String,
    pub input: FeatureMap,
    pub target: FeatureMap,
}

impl ImagePair {
    pub fn as_tuple(&self) -> (FeatureMap, FeatureMap) {
        (self.input.clone(), self.target.clone())
    }
}

/// Four pairs over six normalized images: A→B, B→A, C→D, E→F.
pub fn transform_pairs(images: &[(String, FeatureMap)]) -> Result<Vec<ImagePair>> {
    if images.len() < 6 {
        return Err(OnnError::CorpusTooSmall(format!(
            "{} images for 4 transformation pairs",
            images.len()
        )));
    }
    let pair = |a: usize, b: usize| ImagePair {
        id: format!("{}->{}", images[a].0, images[b].0),
        input: images[a].1.clone(),
        target: images[b].1.clone(),
    };
    Ok(vec![pair(0, 1), pair(1, 0), pair(2, 3), pair(4, 5)])
}

/// Training and test pairs of one fold. All stochastic inputs (noise images,
/// corruption) are drawn from `seed`, the fold number and the image's
/// position in the plan.
pub fn fold_pairs(spec: &TaskSpec, corpus: &Corpus, plan: &FoldPlan, seed: u64) -> Result<(Vec<ImagePair>, Vec<ImagePair>)> {
    let load = |ids: &[String]| -> Result<Vec<(String, FeatureMap)>> {
        ids.iter()
            .map(|id| Ok((id.clone(), normalize(corpus.get(id)?)?)))
            .collect()
    };
    let fold = plan.fold as u64;
    match spec.kind {
        TaskKind::Denoise => {
            let corrupt = |images: Vec<(String, FeatureMap)>, tag: u64| -> Result<Vec<ImagePair>> {
                images
                    .into_iter()
                    .enumerate()
                    .map(|(i, (id, clean))| {
                        let mut rng = rng_for(seed, &[0x6e6f_6973, fold, tag, i as u64]);
                        Ok(ImagePair {
                            input: salt_pepper(&clean, spec.noise_p, &mut rng)?,
                            target: clean,
                            id,
                        })
                    })
                    .collect()
            };
            Ok((corrupt(load(&plan.train)?, 0)?, corrupt(load(&plan.test)?, 1)?))
        }
        TaskKind::Synth => {
            let pairs = load(&plan.train)?
                .into_iter()
                .enumerate()
                .map(|(i, (id, target))| {
                    let mut rng = rng_for(seed, &[0x7767_6e, fold, i as u64]);
                    let (h, w) = target.shape();
                    Ok(ImagePair {
                        input: wgn(h, w, &mut rng)?,
                        target,
                        id: format!("wgn->{id}"),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((pairs, Vec::new()))
        }
        TaskKind::Transform => Ok((transform_pairs(&load(&plan.train)?)?, Vec::new())),
    }
}

/// The five networks compared in every fold, in report order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Candidate {
    Elite1,
    Elite3,
    Cnn,
    Worst3,
    Worst1,
}

impl Candidate {
    pub const ALL: [Candidate; 5] = [
        Candidate::Elite1,
        Candidate::Elite3,
        Candidate::Cnn,
        Candidate::Worst3,
        Candidate::Worst1,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Elite1 => "elite1",
            Self::Elite3 => "elite3",
            Self::Cnn => "cnn",
            Self::Worst3 => "worst3",
            Self::Worst1 => "worst1",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Self::Elite1 => "Elite (S=1)",
            Self::Elite3 => "Elite (S=3)",
            Self::Cnn => "CNN",
            Self::Worst3 => "Worst (S=3)",
            Self::Worst1 => "Worst (S=1)",
        }
    }

    fn tag(self) -> u64 {
        self as u64 + 1
    }

    /// Fresh network for this candidate; weights drawn from `seed`.
    pub fn build(
        self,
        ledger: &HealthLedger,
        arch: &Architecture,
        constants: OperatorConstants,
        weight_range: f64,
        seed: u64,
    ) -> Result<OnnModel> {
        let mut rng = rng_for(seed, &[0x696e_6974]);
        let (s, which) = match self {
            Self::Cnn => {
                let mut model = OnnModel::new(arch.clone(), constants)?;
                model.init_weights(&mut rng, weight_range)?;
                return Ok(model);
            }
            Self::Elite1 => (1, Selection::Elite),
            Self::Elite3 => (3, Selection::Elite),
            Self::Worst3 => (3, Selection::Worst),
            Self::Worst1 => (1, Selection::Worst),
        };
        build_network(ledger, s, which, arch, constants, &mut rng, weight_range)
    }
}

impl fmt::Display for Candidate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Mean SNR (dB) and mean MSE of `model` over `pairs`.
pub fn evaluate(model: &OnnModel, pairs: &[ImagePair]) -> Result<Scores> {
    let mut per_pair = Vec::with_capacity(pairs.len());
    for p in pairs {
        let out = model.predict(&p.input)?;
        per_pair.push(PairScore {
            id: p.id.clone(),
            snr: snr(&p.target, &out)?,
            mse: crate::backprop::mse(&out, &p.target)?,
        });
    }
    Ok(Scores::from_pairs(per_pair))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairScore {
    pub id: String,
    #[serde(with = "crate::io::float_or_inf")]
    pub snr: f64,
    pub mse: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    #[serde(with = "crate::io::float_or_inf")]
    pub snr: f64,
    pub mse: f64,
    pub pairs: Vec<PairScore>,
}

impl Scores {
    fn from_pairs(pairs: Vec<PairScore>) -> Self {
        let n = pairs.len().max(1) as f64;
        Self {
            snr: pairs.iter().map(|p| p.snr).sum::<f64>() / n,
            mse: pairs.iter().map(|p| p.mse).sum::<f64>() / n,
            pairs,
        }
    }
}

/// Knobs shared by every fold of an experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub architecture: Architecture,
    pub constants: OperatorConstants,
    pub spm: SpmConfig,
    pub train: TrainConfig,
    /// BP runs per candidate.
    pub runs: usize,
    pub weight_range: f64,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            architecture: Architecture::default(),
            constants: OperatorConstants::default(),
            spm: SpmConfig::default(),
            train: TrainConfig::default(),
            runs: 10,
            weight_range: 0.1,
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.architecture.validate()?;
        self.constants.validate()?;
        self.spm.validate()?;
        self.train.validate()?;
        if self.runs == 0 {
            return Err(OnnError::Invalid("runs must be positive".into()));
        }
        if !(self.weight_range.is_finite() && self.weight_range > 0.0) {
            return Err(OnnError::Invalid("weight_range must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub run: usize,
    pub seed: u64,
    /// `None` when the run diverged.
    pub train: Option<Scores>,
    pub test: Option<Scores>,
    pub final_loss: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateResult {
    pub candidate: Candidate,
    pub assignments: Vec<Vec<usize>>,
    pub runs: Vec<RunResult>,
    /// Index into `runs` of the best-train-SNR run.
    pub best_run: Option<usize>,
}

impl CandidateResult {
    pub fn best(&self) -> Option<&RunResult> {
        self.best_run.map(|i| &self.runs[i])
    }

    pub fn train_snr(&self) -> Option<f64> {
        self.best().and_then(|r| r.train.as_ref()).map(|s| s.snr)
    }

    pub fn test_snr(&self) -> Option<f64> {
        self.best().and_then(|r| r.test.as_ref()).map(|s| s.snr)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub plan: FoldPlan,
    pub ledger: HealthLedger,
    pub prior_iterations: usize,
    pub candidates: Vec<CandidateResult>,
}

/// One trained candidate run. Divergence is reported in the result rather
/// than as an error.
pub fn train_run(
    model: &mut OnnModel,
    train_pairs: &[ImagePair],
    test_pairs: &[ImagePair],
    cfg: &TrainConfig,
    run: usize,
) -> Result<RunResult> {
    let tuples: Vec<(FeatureMap, FeatureMap)> = train_pairs.iter().map(ImagePair::as_tuple).collect();
    match train(model, &tuples, cfg, &mut NoHook) {
        Ok(trace) => Ok(RunResult {
            run,
            seed: cfg.seed,
            train: Some(evaluate(model, train_pairs)?),
            test: if test_pairs.is_empty() {
                None
            } else {
                Some(evaluate(model, test_pairs)?)
            },
            final_loss: trace.entries.last().map(|e| e.loss),
        }),
        Err(OnnError::Divergence { iteration }) => {
            eprintln!("run {run} diverged at iteration {iteration}");
            Ok(RunResult {
                run,
                seed: cfg.seed,
                train: None,
                test: None,
                final_loss: None,
            })
        }
        Err(e) => Err(e),
    }
}

/// Seed of run `run` of `candidate` in fold `fold`.
pub fn run_seed(base: u64, fold: usize, candidate: Candidate, run: usize) -> u64 {
    derive_seed(base, &[0x7275_6e, fold as u64, candidate.tag(), run as u64])
}

/// Trains `cfg.runs` instances of `candidate`, in parallel on the current
/// rayon pool. Results do not depend on the pool size.
#[allow(clippy::too_many_arguments)]
pub fn run_candidate(
    candidate: Candidate,
    ledger: &HealthLedger,
    cfg: &ExperimentConfig,
    train_pairs: &[ImagePair],
    test_pairs: &[ImagePair],
    fold: usize,
) -> Result<(CandidateResult, Option<OnnModel>)> {
    let outcomes: Vec<Result<(RunResult, OnnModel)>> = (0..cfg.runs)
        .into_par_iter()
        .map(|r| {
            let seed = run_seed(cfg.seed, fold, candidate, r);
            let mut model = candidate.build(ledger, &cfg.architecture, cfg.constants, cfg.weight_range, seed)?;
            let train_cfg = TrainConfig {
                seed,
                ..cfg.train.clone()
            };
            let result = train_run(&mut model, train_pairs, test_pairs, &train_cfg, r)?;
            Ok((result, model))
        })
        .collect();
    let mut runs = Vec::with_capacity(cfg.runs);
    let mut models = Vec::with_capacity(cfg.runs);
    for o in outcomes {
        let (r, m) = o?;
        runs.push(r);
        models.push(m);
    }
    let best_run = best_run(&runs);
    let assignments = candidate
        .build(ledger, &cfg.architecture, cfg.constants, cfg.weight_range, 0)?
        .assignments()
        .iter()
        .map(|l| l.iter().map(|s| s.index()).collect())
        .collect();
    let best_model = best_run.map(|i| models.swap_remove(i));
    Ok((
        CandidateResult {
            candidate,
            assignments,
            runs,
            best_run,
        },
        best_model,
    ))
}

/// Highest train SNR among converged runs; earliest wins ties.
pub fn best_run(runs: &[RunResult]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, r) in runs.iter().enumerate() {
        if let Some(s) = r.train.as_ref().map(|s| s.snr) {
            if best.is_none_or(|(_, b)| s > b) {
                best = Some((i, s));
            }
        }
    }
    best.map(|(i, _)| i)
}

/// Prior BP plus all five candidates for one fold.
pub fn run_fold(spec: &TaskSpec, corpus: &Corpus, plan: &FoldPlan, cfg: &ExperimentConfig) -> Result<FoldResult> {
    let (train_pairs, test_pairs) = fold_pairs(spec, corpus, plan, cfg.seed)?;
    let tuples: Vec<(FeatureMap, FeatureMap)> = train_pairs.iter().map(ImagePair::as_tuple).collect();
    let spm_cfg = SpmConfig {
        seed: derive_seed(cfg.seed, &[0x7072_696f, plan.fold as u64]),
        ..cfg.spm.clone()
    };
    let prior = prior_bp(
        &tuples,
        &spec.sublibrary,
        &spm_cfg,
        &cfg.train,
        &cfg.architecture,
        cfg.constants,
        false,
    )?;
    let mut candidates = Vec::with_capacity(Candidate::ALL.len());
    for c in Candidate::ALL {
        let (result, _) = run_candidate(c, &prior.ledger, cfg, &train_pairs, &test_pairs, plan.fold)?;
        candidates.push(result);
    }
    Ok(FoldResult {
        plan: plan.clone(),
        ledger: prior.ledger,
        prior_iterations: prior.iterations,
        candidates,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub candidate: Candidate,
    /// Mean over folds of the best run's train SNR; `None` if no fold
    /// produced a converged run.
    pub train_snr: Option<f64>,
    pub test_snr: Option<f64>,
    pub folds: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub task: TaskKind,
    pub folds: Vec<FoldResult>,
    pub summary: Vec<SummaryRow>,
}

impl ExperimentReport {
    pub fn from_folds(task: TaskKind, folds: Vec<FoldResult>) -> Self {
        let summary = Candidate::ALL
            .iter()
            .map(|&c| {
                let results: Vec<&CandidateResult> = folds
                    .iter()
                    .flat_map(|f| f.candidates.iter().filter(move |r| r.candidate == c))
                    .collect();
                let mean = |vals: Vec<f64>| (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64);
                SummaryRow {
                    candidate: c,
                    train_snr: mean(results.iter().filter_map(|r| r.train_snr()).collect()),
                    test_snr: mean(results.iter().filter_map(|r| r.test_snr()).collect()),
                    folds: results.len(),
                }
            })
            .collect();
        Self { task, folds, summary }
    }

    pub fn row(&self, c: Candidate) -> &SummaryRow {
        self.summary.iter().find(|r| r.candidate == c).expect("all candidates summarised")
    }

    /// One row per fold plus a mean row; columns are the candidates in
    /// report order. Denoising reports get train and test rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("fold,split");
        for c in Candidate::ALL {
            out.push(',');
            out.push_str(c.name());
        }
        out.push('\n');
        let splits: &[&str] = if self.task == TaskKind::Denoise {
            &["train", "test"]
        } else {
            &["train"]
        };
        let cell = |v: Option<f64>| v.map(crate::io::format_float).unwrap_or_default();
        for f in &self.folds {
            for &split in splits {
                out.push_str(&format!("{},{split}", f.plan.fold));
                for c in &f.candidates {
                    let v = if split == "train" { c.train_snr() } else { c.test_snr() };
                    out.push(',');
                    out.push_str(&cell(v));
                }
                out.push('\n');
            }
        }
        for &split in splits {
            out.push_str(&format!("mean,{split}"));
            for r in &self.summary {
                let v = if split == "train" { r.train_snr } else { r.test_snr };
                out.push(',');
                out.push_str(&cell(v));
            }
            out.push('\n');
        }
        out
    }
}

/// Every fold in order. Folds run one after another; runs within a fold use
/// the current rayon pool.
pub fn run_experiment(spec: &TaskSpec, corpus: &Corpus, folds: usize, cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let plans = build_folds(&corpus.ids(), spec, folds, cfg.seed)?;
    let results = plans
        .iter()
        .map(|p| run_fold(spec, corpus, p, cfg))
        .collect::<Result<Vec<_>>>()?;
    Ok(ExperimentReport::from_folds(spec.kind, results))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn normalize_examples() {
        let m = FeatureMap::new(1, 3, vec![10.0, 20.0, 30.0]).unwrap();
        assert_eq!(normalize(&m).unwrap().as_slice(), &[-1.0, 0.0, 1.0]);
        let m = FeatureMap::new(1, 2, vec![0.0, 255.0]).unwrap();
        assert_eq!(normalize(&m).unwrap().as_slice(), &[-1.0, 1.0]);
        assert!(matches!(normalize(&FeatureMap::filled(2, 2, 3.0)), Err(OnnError::DegenerateRange)));
    }

    #[test]
    fn snr_examples() {
        let t = FeatureMap::new(1, 4, vec![2.0, -2.0, 2.0, -2.0]).unwrap();
        assert_eq!(snr(&t, &t).unwrap(), f64::INFINITY);
        let noise = [0.4f64.sqrt(), -(0.4f64.sqrt()), -(0.4f64.sqrt()), 0.4f64.sqrt()];
        let o = FeatureMap::new(1, 4, t.as_slice().iter().zip(noise).map(|(a, n)| a + n).collect()).unwrap();
        assert!((snr(&t, &o).unwrap() - 10.0).abs() < 1e-12);
        assert!(snr(&FeatureMap::filled(2, 2, 1.0), &t.map(|v| v)).is_err());
    }

    #[test]
    fn salt_pepper_examples() {
        let mut rng = crate::rng::OnnRng::seed_from_u64(5);
        let img = FeatureMap::from_fn(60, 60, |r, c| ((r * 7 + c) % 11) as f64 / 10.0 - 0.5);
        assert_eq!(salt_pepper(&img, 0.0, &mut rng).unwrap(), img);
        let all = salt_pepper(&img, 1.0, &mut rng).unwrap();
        assert!(all.as_slice().iter().all(|&v| v == 1.0 || v == -1.0));
        assert!(salt_pepper(&img, 1.5, &mut rng).is_err());
    }

    #[test]
    fn synthetic_images_are_8bit_and_varied() {
        let c = Corpus::synthetic(6, 1);
        for (_, img) in &c.images {
            assert_eq!(img.shape(), (IMAGE_SIZE, IMAGE_SIZE));
            assert_eq!(img.min(), 0.0);
            assert_eq!(img.max(), 255.0);
            assert!(img.as_slice().iter().all(|v| v.fract() == 0.0));
        }
        assert_ne!(c.images[0].1, c.images[1].1);
        assert_eq!(Corpus::synthetic(6, 1), c);
    }

    #[test]
    fn folds_examples() {
        let ids: Vec<String> = (0..1000).map(|i| format!("img{i}")).collect();
        let spec = TaskSpec::new(TaskKind::Denoise);
        let plans = build_folds(&ids, &spec, 10, 3).unwrap();
        assert_eq!(plans.len(), 10);
        for p in &plans {
            assert_eq!((p.train.len(), p.test.len()), (100, 900));
            assert!(p.train.iter().all(|id| !p.test.contains(id)));
        }
        assert_eq!(plans, build_folds(&ids, &spec, 10, 3).unwrap());
        assert!(build_folds(&ids[..9], &spec, 1, 3).is_err());

        let spec = TaskSpec::new(TaskKind::Synth);
        let plans = build_folds(&ids[..80], &spec, 10, 3).unwrap();
        let mut seen: Vec<&String> = plans.iter().flat_map(|p| &p.train).collect();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 80);
        assert!(build_folds(&ids[..79], &spec, 10, 3).is_err());
    }

    #[test]
    fn transform_pairs_include_inverse() {
        let c = Corpus::synthetic(8, 2);
        let images: Vec<_> = c.images.iter().map(|(id, m)| (id.clone(), normalize(m).unwrap())).collect();
        let pairs = transform_pairs(&images).unwrap();
        assert_eq!(pairs.len(), 4);
        assert_eq!(pairs[0].input, pairs[1].target);
        assert_eq!(pairs[1].input, pairs[0].target);
        assert!(transform_pairs(&images[..5]).is_err());
    }

    #[test]
    fn best_run_prefers_highest_snr() {
        let run = |snr: Option<f64>| RunResult {
            run: 0,
            seed: 0,
            train: snr.map(|s| Scores { snr: s, mse: 0.0, pairs: vec![] }),
            test: None,
            final_loss: None,
        };
        assert_eq!(best_run(&[run(Some(1.0)), run(None), run(Some(3.0)), run(Some(3.0))]), Some(2));
        assert_eq!(best_run(&[run(None)]), None);
    }
}
