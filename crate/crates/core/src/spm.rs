//! Synaptic plasticity monitoring.
//!
//! A hidden neuron's health is read off its outgoing kernels: the mean
//! variance of the next layer's kernels fed by the neuron (its average weight
//! power). Over a monitoring window of `M` iterations the relative change of
//! that power is one instantaneous health factor (HF) for the operator set the
//! neuron carried. Sessions repeat: record HFs, then reassign every hidden
//! neuron, at first covering the library and later drawing sets with
//! probability proportional to their mean HF. The per-layer mean HFs rank the
//! sets, and the top (or bottom) ones configure new networks.

use std::collections::BTreeMap;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backprop::{TrainConfig, Trainer};
use crate::error::{OnnError, Result};
use crate::feature_map::FeatureMap;
use crate::network::{Architecture, Checkpoint, OnnModel};
use crate::operators::{OperatorConstants, OperatorSet, OperatorSubLibrary, SubLibraryIds};
use crate::rng::{rng_for, OnnRng};

/// Prior powers below this are treated as degenerate and yield no sample.
pub const POWER_FLOOR: f64 = 1e-12;

/// Sessions after which a layer switches from coverage-first assignment to
/// HF-proportional sampling: every set needs this many samples.
pub const WARMUP_SAMPLES: usize = 2;

/// Average weight power of hidden neuron `k` in layer `l`: the mean over the
/// next layer's neurons of the population variance of the kernel they apply
/// to `k`'s output.
pub fn weight_power(model: &OnnModel, l: usize, k: usize) -> Result<f64> {
    if l + 1 >= model.layer_count() {
        return Err(OnnError::Invalid(format!("layer {l} has no outgoing kernels")));
    }
    if k >= model.neurons(l) {
        return Err(OnnError::OutOfRange {
            index: k,
            len: model.neurons(l),
        });
    }
    let next = model.neurons(l + 1);
    let total: f64 = (0..next).map(|i| model.kernel(l + 1, i, k).variance()).sum();
    Ok(total / next as f64)
}

/// Powers of every hidden neuron, `[layer][neuron]`.
pub fn power_snapshot(model: &OnnModel) -> Vec<Vec<f64>> {
    (0..model.hidden_layers())
        .map(|l| {
            (0..model.neurons(l))
                .map(|k| weight_power(model, l, k).expect("hidden layer has a successor"))
                .collect()
        })
        .collect()
}

/// `|prev - now| / prev`, or `None` when `prev` is degenerate.
pub fn instantaneous_hf(prev: f64, now: f64) -> Option<f64> {
    if !(prev >= POWER_FLOOR) || !now.is_finite() {
        return None;
    }
    Some((prev - now).abs() / prev)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SetHealth {
    pub count: usize,
    pub sum: f64,
}

impl SetHealth {
    /// Final HF: mean of the recorded instantaneous HFs.
    pub fn mean(&self) -> Option<f64> {
        (self.count > 0).then(|| self.sum / self.count as f64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LedgerMeta {
    pub seed: u64,
    pub sessions: usize,
    pub iterations_per_session: usize,
    pub sublibrary: SubLibraryIds,
}

/// Per hidden layer, per operator set running HF statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "LedgerFile", try_from = "LedgerFile")]
pub struct HealthLedger {
    library: OperatorSubLibrary,
    /// `layers[l][θ]`, one entry per set of the library.
    layers: Vec<BTreeMap<usize, SetHealth>>,
    sessions: usize,
    skipped: usize,
    diverged: usize,
    meta: LedgerMeta,
}

impl HealthLedger {
    pub fn new(library: OperatorSubLibrary, hidden_layers: usize, meta: LedgerMeta) -> Self {
        let empty: BTreeMap<usize, SetHealth> =
            library.indices().into_iter().map(|i| (i, SetHealth::default())).collect();
        Self {
            layers: vec![empty; hidden_layers],
            library,
            sessions: 0,
            skipped: 0,
            diverged: 0,
            meta,
        }
    }

    pub fn library(&self) -> &OperatorSubLibrary {
        &self.library
    }

    pub fn meta(&self) -> &LedgerMeta {
        &self.meta
    }

    pub fn hidden_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn sessions(&self) -> usize {
        self.sessions
    }

    /// Samples dropped because the prior power was degenerate.
    pub fn skipped(&self) -> usize {
        self.skipped
    }

    /// Sessions discarded after a training divergence.
    pub fn diverged(&self) -> usize {
        self.diverged
    }

    pub fn health(&self, l: usize, set: OperatorSet) -> SetHealth {
        self.layers[l].get(&set.index()).copied().unwrap_or_default()
    }

    pub fn count(&self, l: usize, set: OperatorSet) -> usize {
        self.health(l, set).count
    }

    pub fn hf(&self, l: usize, set: OperatorSet) -> Option<f64> {
        self.health(l, set).mean()
    }

    pub fn total_samples(&self, l: usize) -> usize {
        self.layers[l].values().map(|h| h.count).sum()
    }

    pub fn record(&mut self, l: usize, set: OperatorSet, hf: f64) -> Result<()> {
        if !(hf.is_finite() && hf >= 0.0) {
            return Err(OnnError::Invalid(format!("health factor {hf}")));
        }
        let len = self.layers.len();
        let entry = self
            .layers
            .get_mut(l)
            .ok_or(OnnError::OutOfRange { index: l, len })?
            .get_mut(&set.index())
            .ok_or(OnnError::NotInSubLibrary { set: set.index() })?;
        entry.count += 1;
        entry.sum += hf;
        Ok(())
    }

    pub fn record_skip(&mut self) {
        self.skipped += 1;
    }

    /// HF-proportional sampling is active once every set has
    /// [`WARMUP_SAMPLES`] samples in this layer.
    pub fn is_warm(&self, l: usize) -> bool {
        self.layers[l].values().all(|h| h.count >= WARMUP_SAMPLES)
    }

    /// Builds a ledger directly from final HF values, e.g. to configure a
    /// network from published results. Each value counts as one sample.
    pub fn from_final_hfs(library: OperatorSubLibrary, hfs: &[Vec<f64>]) -> Result<Self> {
        let meta = LedgerMeta {
            seed: 0,
            sessions: 0,
            iterations_per_session: 0,
            sublibrary: library.ids(),
        };
        let mut ledger = Self::new(library, hfs.len(), meta);
        let sets = ledger.library.sets().to_vec();
        for (l, values) in hfs.iter().enumerate() {
            if values.len() != sets.len() {
                return Err(OnnError::Shape(format!(
                    "{} HFs for {} sets in layer {l}",
                    values.len(),
                    sets.len()
                )));
            }
            for (&set, &hf) in sets.iter().zip(values) {
                ledger.record(l, set, hf)?;
            }
        }
        Ok(ledger)
    }

    /// Sampling distribution over the library for layer `l`, proportional to
    /// the mean HFs. Sets with zero HF
    /// get probability 0 unless every HF is zero, in which case the
    /// distribution is uniform.
    pub fn probabilities(&self, l: usize) -> Vec<(OperatorSet, f64)> {
        let sets = self.library.sets();
        let hfs: Vec<f64> = sets.iter().map(|&s| self.hf(l, s).unwrap_or(0.0)).collect();
        let total: f64 = hfs.iter().sum();
        if total > 0.0 {
            sets.iter().zip(hfs).map(|(&s, h)| (s, h / total)).collect()
        } else {
            let p = 1.0 / sets.len() as f64;
            sets.iter().map(|&s| (s, p)).collect()
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// `layer,theta,count,hf` rows, layers numbered from 1. Unsampled sets
    /// have an empty `hf`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,theta,count,hf\n");
        for (l, sets) in self.layers.iter().enumerate() {
            for (theta, h) in sets {
                let hf = h.mean().map(|v| v.to_string()).unwrap_or_default();
                out.push_str(&format!("{},{},{},{}\n", l + 1, theta, h.count, hf));
            }
        }
        out
    }
}

/// On-disk ledger: `{layer -> {θ -> {count, sum, mean_hf}}}` plus run
/// metadata. Layers are numbered from 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LedgerFile {
    meta: LedgerMeta,
    sessions_completed: usize,
    skipped_samples: usize,
    diverged_sessions: usize,
    layers: BTreeMap<usize, LayerFile>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerFile {
    warm: bool,
    sets: BTreeMap<usize, EntryFile>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EntryFile {
    count: usize,
    sum: f64,
    mean_hf: Option<f64>,
}

impl From<&HealthLedger> for LedgerFile {
    fn from(ledger: &HealthLedger) -> Self {
        let layers = ledger
            .layers
            .iter()
            .enumerate()
            .map(|(l, sets)| {
                let sets = sets
                    .iter()
                    .map(|(&theta, h)| {
                        (
                            theta,
                            EntryFile {
                                count: h.count,
                                sum: h.sum,
                                mean_hf: h.mean(),
                            },
                        )
                    })
                    .collect();
                (
                    l + 1,
                    LayerFile {
                        warm: ledger.is_warm(l),
                        sets,
                    },
                )
            })
            .collect();
        Self {
            meta: ledger.meta.clone(),
            sessions_completed: ledger.sessions,
            skipped_samples: ledger.skipped,
            diverged_sessions: ledger.diverged,
            layers,
        }
    }
}

impl From<HealthLedger> for LedgerFile {
    fn from(ledger: HealthLedger) -> Self {
        Self::from(&ledger)
    }
}

impl TryFrom<LedgerFile> for HealthLedger {
    type Error = OnnError;

    fn try_from(file: LedgerFile) -> Result<Self> {
        let library = OperatorSubLibrary::try_from(file.meta.sublibrary.clone())?;
        let expected = library.indices();
        let mut layers = Vec::with_capacity(file.layers.len());
        for (pos, (number, layer)) in file.layers.into_iter().enumerate() {
            if number != pos + 1 {
                return Err(OnnError::Invalid(format!("ledger layer {number} out of sequence")));
            }
            if layer.sets.keys().copied().collect::<Vec<_>>() != expected {
                return Err(OnnError::Invalid(format!(
                    "ledger layer {number} does not cover the sub-library"
                )));
            }
            layers.push(
                layer
                    .sets
                    .into_iter()
                    .map(|(theta, e)| (theta, SetHealth { count: e.count, sum: e.sum }))
                    .collect(),
            );
        }
        Ok(Self {
            library,
            layers,
            sessions: file.sessions_completed,
            skipped: file.skipped_samples,
            diverged: file.diverged_sessions,
            meta: file.meta,
        })
    }
}

/// Draws one operator set for layer `l`. Before warm-up completes the draw is
/// uniform over the least-sampled sets; afterwards it follows
/// [`HealthLedger::probabilities`].
pub fn sample_operator<R: Rng + ?Sized>(ledger: &HealthLedger, l: usize, rng: &mut R) -> OperatorSet {
    let sets = ledger.library.sets();
    if !ledger.is_warm(l) {
        let least = sets.iter().map(|&s| ledger.count(l, s)).min().unwrap_or(0);
        let pool: Vec<OperatorSet> = sets
            .iter()
            .copied()
            .filter(|&s| ledger.count(l, s) == least)
            .collect();
        return *pool.choose(rng).expect("non-empty library");
    }
    let probs = ledger.probabilities(l);
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for &(set, p) in &probs {
        acc += p;
        if u < acc {
            return set;
        }
    }
    // rounding left a sliver above the cumulative sum
    probs
        .iter()
        .rev()
        .find(|(_, p)| *p > 0.0)
        .map(|(s, _)| *s)
        .unwrap_or(sets[0])
}

/// New operator sets for the `n` neurons of layer `l`.
///
/// During warm-up the least-sampled sets are placed first (ties in random
/// order), cycling through the library, and the result is shuffled across
/// neurons. After warm-up every neuron draws independently.
pub fn reassign_layer<R: Rng + ?Sized>(
    ledger: &HealthLedger,
    l: usize,
    n: usize,
    rng: &mut R,
) -> Vec<OperatorSet> {
    if ledger.is_warm(l) {
        return (0..n).map(|_| sample_operator(ledger, l, rng)).collect();
    }
    let mut order = ledger.library.sets().to_vec();
    order.shuffle(rng);
    order.sort_by_key(|&s| ledger.count(l, s));
    let mut out: Vec<OperatorSet> = order.iter().copied().cycle().take(n).collect();
    out.shuffle(rng);
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpmConfig {
    /// `M`: BP iterations per session.
    pub iterations_per_session: usize,
    pub sessions: usize,
    pub seed: u64,
    /// Initial weights are drawn from `Uniform(-range, range)`.
    pub weight_range: f64,
}

impl Default for SpmConfig {
    fn default() -> Self {
        Self {
            iterations_per_session: 80,
            sessions: 30,
            seed: 0,
            weight_range: 0.1,
        }
    }
}

impl SpmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations_per_session == 0 || self.sessions == 0 {
            return Err(OnnError::Invalid("SPM needs M >= 1 and sessions >= 1".into()));
        }
        if !(self.weight_range.is_finite() && self.weight_range > 0.0) {
            return Err(OnnError::Invalid("weight_range must be > 0".into()));
        }
        Ok(())
    }

    pub fn total_iterations(&self) -> usize {
        self.sessions * self.iterations_per_session
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HfSample {
    pub layer: usize,
    pub neuron: usize,
    pub set: OperatorSet,
    pub hf: f64,
}

/// Weights at both ends of a session and the samples recorded from them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionRecord {
    pub session: usize,
    pub start: Checkpoint,
    pub end: Checkpoint,
    pub samples: Vec<HfSample>,
    pub diverged: bool,
}

/// Runs one monitoring session: `M` BP iterations bracketed by power
/// snapshots, one HF sample per hidden neuron, then reassignment of every
/// hidden neuron (weights kept).
#[allow(clippy::too_many_arguments)]
pub fn spm_session(
    model: &mut OnnModel,
    pairs: &[(FeatureMap, FeatureMap)],
    trainer: &mut Trainer,
    ledger: &mut HealthLedger,
    iterations: usize,
    rng: &mut OnnRng,
    record: bool,
) -> Result<Option<SessionRecord>> {
    let start_ck = record.then(|| model.to_checkpoint());
    let before = power_snapshot(model);
    for _ in 0..iterations {
        trainer.step(model, pairs)?;
    }
    let after = power_snapshot(model);
    let mut samples = Vec::new();
    for l in 0..model.hidden_layers() {
        for k in 0..model.neurons(l) {
            let set = model.set(l, k);
            match instantaneous_hf(before[l][k], after[l][k]) {
                Some(hf) => {
                    ledger.record(l, set, hf)?;
                    samples.push(HfSample {
                        layer: l,
                        neuron: k,
                        set,
                        hf,
                    });
                }
                None => ledger.record_skip(),
            }
        }
    }
    ledger.sessions += 1;
    let out = start_ck.map(|start| SessionRecord {
        session: ledger.sessions,
        start,
        end: model.to_checkpoint(),
        samples,
        diverged: false,
    });
    reassign_all(model, ledger, rng)?;
    Ok(out)
}

fn reassign_all(model: &mut OnnModel, ledger: &HealthLedger, rng: &mut OnnRng) -> Result<()> {
    for l in 0..model.hidden_layers() {
        let sets = reassign_layer(ledger, l, model.neurons(l), rng);
        model.assign_operators(l, &sets, &ledger.library)?;
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct PriorBpOutcome {
    pub ledger: HealthLedger,
    /// BP iterations consumed, including those of discarded sessions.
    pub iterations: usize,
    /// Present when snapshots were requested.
    pub sessions: Vec<SessionRecord>,
    pub model: OnnModel,
}

/// The prior BP run: a randomly initialised, randomly assigned network
/// trained through `cfg.sessions` back-to-back sessions with one continuous
/// learning-rate schedule.
#[allow(clippy::too_many_arguments)]
pub fn prior_bp(
    pairs: &[(FeatureMap, FeatureMap)],
    library: &OperatorSubLibrary,
    cfg: &SpmConfig,
    train: &TrainConfig,
    arch: &Architecture,
    constants: OperatorConstants,
    record_snapshots: bool,
) -> Result<PriorBpOutcome> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(OnnError::Invalid("prior BP needs training pairs".into()));
    }
    let mut rng = rng_for(cfg.seed, &[0x73_706d]);
    let meta = LedgerMeta {
        seed: cfg.seed,
        sessions: cfg.sessions,
        iterations_per_session: cfg.iterations_per_session,
        sublibrary: library.ids(),
    };
    let mut ledger = HealthLedger::new(library.clone(), arch.hidden_layers(), meta);
    let mut model = OnnModel::new(arch.clone(), constants)?;
    model.init_weights(&mut rng, cfg.weight_range)?;
    reassign_all(&mut model, &ledger, &mut rng)?;

    let train_cfg = TrainConfig {
        iterations: cfg.total_iterations(),
        seed: crate::rng::derive_seed(cfg.seed, &[0x7472]),
        ..train.clone()
    };
    let mut trainer = Trainer::new(train_cfg.clone())?;
    let mut sessions = Vec::new();
    let mut iterations = 0;
    for _ in 0..cfg.sessions {
        let snapshot = record_snapshots.then(|| model.to_checkpoint());
        match spm_session(
            &mut model,
            pairs,
            &mut trainer,
            &mut ledger,
            cfg.iterations_per_session,
            &mut rng,
            record_snapshots,
        ) {
            Ok(rec) => {
                iterations += cfg.iterations_per_session;
                sessions.extend(rec);
            }
            Err(OnnError::Divergence { iteration }) => {
                log_divergence(ledger.sessions + 1, iteration);
                iterations += cfg.iterations_per_session;
                ledger.diverged += 1;
                ledger.sessions += 1;
                if let Some(start) = snapshot {
                    sessions.push(SessionRecord {
                        session: ledger.sessions,
                        end: start.clone(),
                        start,
                        samples: Vec::new(),
                        diverged: true,
                    });
                }
                model.init_weights(&mut rng, cfg.weight_range)?;
                reassign_all(&mut model, &ledger, &mut rng)?;
                trainer = Trainer::new(TrainConfig {
                    seed: crate::rng::derive_seed(train_cfg.seed, &[ledger.sessions as u64]),
                    ..train_cfg.clone()
                })?;
            }
            Err(e) => return Err(e),
        }
    }
    Ok(PriorBpOutcome {
        ledger,
        iterations,
        sessions,
        model,
    })
}

fn log_divergence(session: usize, iteration: usize) {
    eprintln!("spm: session {session} diverged at iteration {iteration}; weights re-initialised");
}

/// Operator sets of layer `l` by descending HF, ties by ascending index.
/// Unsampled sets come last with HF 0.
pub fn rank_operators(ledger: &HealthLedger, l: usize) -> Vec<(OperatorSet, f64)> {
    let mut ranked: Vec<(OperatorSet, Option<f64>)> = ledger
        .library
        .sets()
        .iter()
        .map(|&s| (s, ledger.hf(l, s)))
        .collect();
    ranked.sort_by(|a, b| match (a.1, b.1) {
        (Some(x), Some(y)) => y.total_cmp(&x).then(a.0.index().cmp(&b.0.index())),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => a.0.index().cmp(&b.0.index()),
    });
    ranked.into_iter().map(|(s, h)| (s, h.unwrap_or(0.0))).collect()
}

/// Neuron counts for the ranked top-S HFs (best first) in a layer of `n`
/// neurons. Every set but the best gets `⌊n·d_i⌋` with `d_i` its share of the
/// HF total; the best set takes the rest. Falls back to a uniform split when
/// an HF is not positive.
pub fn allocate(hfs: &[f64], n: usize) -> Result<Vec<usize>> {
    let s = hfs.len();
    if s == 0 {
        return Err(OnnError::Invalid("allocation needs at least one set".into()));
    }
    if s > n {
        return Err(OnnError::Invalid(format!("{s} sets for {n} neurons")));
    }
    if hfs.iter().any(|h| !(h.is_finite() && *h > 0.0)) {
        return Ok(uniform_split(s, n));
    }
    let total: f64 = hfs.iter().sum();
    let mut counts = vec![0; s];
    for i in 1..s {
        // the epsilon keeps exact products such as 12 * (1/3) from landing
        // one ulp under an integer
        counts[i] = ((n as f64) * hfs[i] / total + 1e-9).floor() as usize;
    }
    counts[0] = n - counts[1..].iter().sum::<usize>();
    Ok(counts)
}

/// `n / s` each, remainder to the first entry.
pub fn uniform_split(s: usize, n: usize) -> Vec<usize> {
    let mut counts = vec![n / s; s];
    counts[0] += n % s;
    counts
}

/// Per hidden layer: the chosen sets with their neuron counts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EliteSpec {
    pub top: usize,
    pub layers: Vec<Vec<(OperatorSet, f64, usize)>>,
}

impl EliteSpec {
    pub fn assignments(&self) -> Vec<Vec<OperatorSet>> {
        self.layers
            .iter()
            .map(|layer| {
                layer
                    .iter()
                    .flat_map(|&(set, _, n)| std::iter::repeat_n(set, n))
                    .collect()
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Selection {
    /// Top-S sets with HF-proportional counts.
    Elite,
    /// Bottom-S sets, uniform counts with the remainder on the worst set.
    Worst,
}

/// Chooses and sizes the operator sets of every hidden layer.
pub fn select(ledger: &HealthLedger, arch: &Architecture, s: usize, which: Selection) -> Result<EliteSpec> {
    if s == 0 || s > ledger.library.len() {
        return Err(OnnError::Invalid(format!(
            "S = {s} outside 1..={}",
            ledger.library.len()
        )));
    }
    if ledger.hidden_layers() != arch.hidden_layers() {
        return Err(OnnError::Shape("ledger and architecture disagree on depth".into()));
    }
    let mut layers = Vec::with_capacity(arch.hidden_layers());
    for l in 0..arch.hidden_layers() {
        let n = arch.layers[l].neurons;
        let ranked = rank_operators(ledger, l);
        let chosen: Vec<(OperatorSet, f64)> = match which {
            Selection::Elite => ranked[..s].to_vec(),
            Selection::Worst => ranked.iter().rev().take(s).copied().collect(),
        };
        let hfs: Vec<f64> = chosen.iter().map(|c| c.1).collect();
        let counts = match which {
            Selection::Elite => allocate(&hfs, n)?,
            Selection::Worst => {
                if s > n {
                    return Err(OnnError::Invalid(format!("{s} sets for {n} neurons")));
                }
                uniform_split(s, n)
            }
        };
        layers.push(
            chosen
                .into_iter()
                .zip(counts)
                .map(|((set, hf), c)| (set, hf, c))
                .collect(),
        );
    }
    Ok(EliteSpec { top: s, layers })
}

/// A freshly initialised network configured from the ledger.
pub fn build_network<R: Rng + ?Sized>(
    ledger: &HealthLedger,
    s: usize,
    which: Selection,
    arch: &Architecture,
    constants: OperatorConstants,
    rng: &mut R,
    weight_range: f64,
) -> Result<OnnModel> {
    let spec = select(ledger, arch, s, which)?;
    let mut model = OnnModel::new(arch.clone(), constants)?;
    model.init_weights(rng, weight_range)?;
    for (l, sets) in spec.assignments().iter().enumerate() {
        model.assign_operators(l, sets, &ledger.library)?;
    }
    Ok(model)
}

pub fn build_elite<R: Rng + ?Sized>(
    ledger: &HealthLedger,
    s: usize,
    arch: &Architecture,
    constants: OperatorConstants,
    rng: &mut R,
    weight_range: f64,
) -> Result<OnnModel> {
    build_network(ledger, s, Selection::Elite, arch, constants, rng, weight_range)
}

pub fn build_worst<R: Rng + ?Sized>(
    ledger: &HealthLedger,
    s: usize,
    arch: &Architecture,
    constants: OperatorConstants,
    rng: &mut R,
    weight_range: f64,
) -> Result<OnnModel> {
    build_network(ledger, s, Selection::Worst, arch, constants, rng, weight_range)
}
