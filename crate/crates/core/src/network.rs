//! Operational network model and forward pass.
//!
//! A neuron `k` of layer `l` computes
//! `x_k = b_k + Σ_i oper2d(w_ki, y_i)`, applies its activation and then the
//! layer's resampling. `oper2d` slides the kernel over the zero-padded input,
//! evaluates the nodal operator per tap and pools the window terms.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{OnnError, Result};
use crate::feature_map::FeatureMap;
use crate::operators::{Nodal, OperatorConstants, OperatorSet, OperatorSubLibrary, Pool};

pub const CHECKPOINT_VERSION: u32 = 1;

/// A `rows x cols` kernel stored row-major. Both sides are odd.
#[derive(Clone, Debug, PartialEq)]
pub struct Kernel {
    rows: usize,
    cols: usize,
    weights: Vec<f64>,
}

impl Kernel {
    pub fn new(rows: usize, cols: usize, weights: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 || rows % 2 == 0 || cols % 2 == 0 {
            return Err(OnnError::Shape(format!(
                "kernel sides must be odd, got {rows}x{cols}"
            )));
        }
        if weights.len() != rows * cols {
            return Err(OnnError::Shape(format!(
                "{} weights for a {rows}x{cols} kernel",
                weights.len()
            )));
        }
        Ok(Self {
            rows,
            cols,
            weights,
        })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::new(rows, cols, vec![0.0; rows * cols]).expect("odd kernel shape")
    }

    /// Centre tap 1, all others 0.
    pub fn identity(rows: usize, cols: usize) -> Self {
        let mut k = Self::zeros(rows, cols);
        k.weights[(rows / 2) * cols + cols / 2] = 1.0;
        k
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn get(&self, r: usize, t: usize) -> f64 {
        self.weights[r * self.cols + t]
    }

    /// Population variance of the kernel elements.
    pub fn variance(&self) -> f64 {
        let n = self.weights.len() as f64;
        let mu = self.weights.iter().sum::<f64>() / n;
        self.weights.iter().map(|w| (w - mu) * (w - mu)).sum::<f64>() / n
    }

    fn to_rows(&self) -> Vec<Vec<f64>> {
        self.weights.chunks(self.cols).map(<[f64]>::to_vec).collect()
    }

    fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(OnnError::Shape("ragged kernel rows".into()));
        }
        Self::new(rows.len(), cols, rows.concat())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Resample {
    None,
    Down2,
    Up2,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpec {
    pub neurons: usize,
    pub resample: Resample,
    pub assignable: bool,
}

/// Network topology. `layers` lists the computing layers; all but the last
/// are hidden.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub inputs: usize,
    pub layers: Vec<LayerSpec>,
    pub kernel_rows: usize,
    pub kernel_cols: usize,
}

impl Default for Architecture {
    /// `In x 12 x 12 x Out` with sub-sampling after the first hidden layer
    /// and up-sampling after the second.
    fn default() -> Self {
        Self::compact(12)
    }
}

impl Architecture {
    /// The two-hidden-layer layout with `hidden` neurons per layer.
    pub fn compact(hidden: usize) -> Self {
        Self {
            inputs: 1,
            layers: vec![
                LayerSpec {
                    neurons: hidden,
                    resample: Resample::Down2,
                    assignable: true,
                },
                LayerSpec {
                    neurons: hidden,
                    resample: Resample::Up2,
                    assignable: true,
                },
                LayerSpec {
                    neurons: 1,
                    resample: Resample::None,
                    assignable: false,
                },
            ],
            kernel_rows: 3,
            kernel_cols: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.inputs == 0 {
            return Err(OnnError::Invalid("architecture needs at least one input".into()));
        }
        if self.layers.len() < 2 {
            return Err(OnnError::Invalid(
                "architecture needs a hidden and an output layer".into(),
            ));
        }
        if self.layers.iter().any(|l| l.neurons == 0) {
            return Err(OnnError::Invalid("layer with zero neurons".into()));
        }
        if self.kernel_rows % 2 == 0 || self.kernel_cols % 2 == 0 {
            return Err(OnnError::Invalid("kernel sides must be odd".into()));
        }
        if self.layers.last().is_some_and(|l| l.assignable) {
            return Err(OnnError::Invalid("output layer cannot be assignable".into()));
        }
        let down = self.layers.iter().filter(|l| l.resample == Resample::Down2).count();
        let up = self.layers.iter().filter(|l| l.resample == Resample::Up2).count();
        if down != up {
            return Err(OnnError::Invalid(
                "sub- and up-sampling layers must balance so output size equals input size".into(),
            ));
        }
        Ok(())
    }

    pub fn hidden_layers(&self) -> usize {
        self.layers.len() - 1
    }

    /// Neuron count feeding computing layer `l`.
    pub fn fan_in(&self, l: usize) -> usize {
        if l == 0 {
            self.inputs
        } else {
            self.layers[l - 1].neurons
        }
    }

    pub fn outputs(&self) -> usize {
        self.layers.last().map_or(0, |l| l.neurons)
    }
}

/// Operational network: architecture, operator assignments, kernels and
/// biases.
#[derive(Clone, Debug, PartialEq)]
pub struct OnnModel {
    arch: Architecture,
    constants: OperatorConstants,
    output_set: OperatorSet,
    /// `sets[l][k]`, including the output layer.
    sets: Vec<Vec<OperatorSet>>,
    /// `kernels[l][k][i]` connects neuron `i` of the previous layer to `k`.
    kernels: Vec<Vec<Vec<Kernel>>>,
    biases: Vec<Vec<f64>>,
}

impl OnnModel {
    /// All-zero network with every neuron on the CNN operator set.
    pub fn new(arch: Architecture, constants: OperatorConstants) -> Result<Self> {
        arch.validate()?;
        constants.validate()?;
        let (kr, kc) = (arch.kernel_rows, arch.kernel_cols);
        let sets = arch
            .layers
            .iter()
            .map(|l| vec![OperatorSet::CNN; l.neurons])
            .collect();
        let kernels = (0..arch.layers.len())
            .map(|l| {
                (0..arch.layers[l].neurons)
                    .map(|_| vec![Kernel::zeros(kr, kc); arch.fan_in(l)])
                    .collect()
            })
            .collect();
        let biases = arch.layers.iter().map(|l| vec![0.0; l.neurons]).collect();
        Ok(Self {
            arch,
            constants,
            output_set: OperatorSet::CNN,
            sets,
            kernels,
            biases,
        })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn constants(&self) -> &OperatorConstants {
        &self.constants
    }

    pub fn output_set(&self) -> OperatorSet {
        self.output_set
    }

    pub fn layer_count(&self) -> usize {
        self.arch.layers.len()
    }

    pub fn hidden_layers(&self) -> usize {
        self.arch.hidden_layers()
    }

    pub fn neurons(&self, l: usize) -> usize {
        self.arch.layers[l].neurons
    }

    pub fn set(&self, l: usize, k: usize) -> OperatorSet {
        self.sets[l][k]
    }

    pub fn layer_sets(&self, l: usize) -> &[OperatorSet] {
        &self.sets[l]
    }

    /// Operator sets of every hidden layer.
    pub fn assignments(&self) -> Vec<Vec<OperatorSet>> {
        self.sets[..self.hidden_layers()].to_vec()
    }

    pub fn kernel(&self, l: usize, k: usize, i: usize) -> &Kernel {
        &self.kernels[l][k][i]
    }

    pub fn kernel_mut(&mut self, l: usize, k: usize, i: usize) -> &mut Kernel {
        &mut self.kernels[l][k][i]
    }

    pub fn bias(&self, l: usize, k: usize) -> f64 {
        self.biases[l][k]
    }

    pub fn bias_mut(&mut self, l: usize, k: usize) -> &mut f64 {
        &mut self.biases[l][k]
    }

    #[cfg(test)]
    pub(crate) fn kernels_raw(&self) -> &Vec<Vec<Vec<Kernel>>> {
        &self.kernels
    }

    pub(crate) fn parts_mut(&mut self) -> (&mut Vec<Vec<Vec<Kernel>>>, &mut Vec<Vec<f64>>) {
        (&mut self.kernels, &mut self.biases)
    }

    /// Total number of trainable parameters.
    pub fn parameter_count(&self) -> usize {
        let taps = self.arch.kernel_rows * self.arch.kernel_cols;
        (0..self.layer_count())
            .map(|l| self.neurons(l) * (self.arch.fan_in(l) * taps + 1))
            .sum()
    }

    /// Draws every kernel weight from `Uniform(-range, range)` and zeroes the
    /// biases.
    pub fn init_weights<R: Rng + ?Sized>(&mut self, rng: &mut R, range: f64) -> Result<()> {
        if !(range.is_finite() && range >= 0.0) {
            return Err(OnnError::Invalid(format!("weight range {range}")));
        }
        let dist = Uniform::new_inclusive(-range, range)
            .map_err(|e| OnnError::Invalid(e.to_string()))?;
        for layer in &mut self.kernels {
            for row in layer {
                for kernel in row {
                    for w in kernel.weights_mut() {
                        *w = dist.sample(rng);
                    }
                }
            }
        }
        for b in self.biases.iter_mut().flatten() {
            *b = 0.0;
        }
        Ok(())
    }

    /// Replaces the operator sets of hidden layer `l`. Weights are kept.
    pub fn assign_operators(
        &mut self,
        l: usize,
        sets: &[OperatorSet],
        library: &OperatorSubLibrary,
    ) -> Result<()> {
        if l >= self.hidden_layers() || !self.arch.layers[l].assignable {
            return Err(OnnError::NotAssignable(l));
        }
        if sets.len() != self.neurons(l) {
            return Err(OnnError::Shape(format!(
                "{} sets for {} neurons in layer {l}",
                sets.len(),
                self.neurons(l)
            )));
        }
        if let Some(bad) = sets.iter().find(|s| !library.contains(**s)) {
            return Err(OnnError::NotInSubLibrary { set: bad.index() });
        }
        self.sets[l].copy_from_slice(sets);
        Ok(())
    }

    /// Assigns every hidden neuron of layer `l` to `set`.
    pub fn assign_uniform(
        &mut self,
        l: usize,
        set: OperatorSet,
        library: &OperatorSubLibrary,
    ) -> Result<()> {
        let sets = vec![set; self.neurons(l)];
        self.assign_operators(l, &sets, library)
    }

    /// Applies a neuron permutation to hidden layer `l`: new neuron `j` is
    /// old neuron `perm[j]`. Incoming kernels, biases, assignments and the
    /// next layer's kernel columns move together, so the network function is
    /// unchanged.
    pub fn permute_neurons(&mut self, l: usize, perm: &[usize]) -> Result<()> {
        let n = self.neurons(l);
        let mut seen = vec![false; n];
        if l >= self.hidden_layers()
            || perm.len() != n
            || perm.iter().any(|&p| p >= n || std::mem::replace(&mut seen[p], true))
        {
            return Err(OnnError::Invalid("not a permutation of the layer".into()));
        }
        let sets = perm.iter().map(|&p| self.sets[l][p]).collect();
        let kernels = perm.iter().map(|&p| self.kernels[l][p].clone()).collect();
        let biases = perm.iter().map(|&p| self.biases[l][p]).collect();
        self.sets[l] = sets;
        self.kernels[l] = kernels;
        self.biases[l] = biases;
        for row in &mut self.kernels[l + 1] {
            let moved = perm.iter().map(|&p| row[p].clone()).collect();
            *row = moved;
        }
        Ok(())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            architecture: self.arch.clone(),
            constants: self.constants,
            output_set: self.output_set,
            assignments: self.assignments(),
            kernels: self
                .kernels
                .iter()
                .map(|layer| {
                    layer
                        .iter()
                        .map(|row| row.iter().map(Kernel::to_rows).collect())
                        .collect()
                })
                .collect(),
            biases: self.biases.clone(),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.version != CHECKPOINT_VERSION {
            return Err(OnnError::Invalid(format!(
                "unsupported checkpoint version {}",
                ck.version
            )));
        }
        let mut model = Self::new(ck.architecture.clone(), ck.constants)?;
        let arch = &model.arch;
        if ck.assignments.len() != arch.hidden_layers()
            || ck.kernels.len() != arch.layers.len()
            || ck.biases.len() != arch.layers.len()
        {
            return Err(OnnError::Shape("checkpoint layer count".into()));
        }
        for (l, spec) in arch.layers.iter().enumerate() {
            if ck.biases[l].len() != spec.neurons || ck.kernels[l].len() != spec.neurons {
                return Err(OnnError::Shape(format!("checkpoint layer {l} neuron count")));
            }
            if l < arch.hidden_layers() && ck.assignments[l].len() != spec.neurons {
                return Err(OnnError::Shape(format!("checkpoint layer {l} assignments")));
            }
            for k in 0..spec.neurons {
                if ck.kernels[l][k].len() != arch.fan_in(l) {
                    return Err(OnnError::Shape(format!("checkpoint layer {l} fan-in")));
                }
                for (i, rows) in ck.kernels[l][k].iter().enumerate() {
                    let kernel = Kernel::from_rows(rows)?;
                    if kernel.rows != arch.kernel_rows || kernel.cols != arch.kernel_cols {
                        return Err(OnnError::Shape(format!(
                            "checkpoint kernel ({l},{k},{i}) is {}x{}",
                            kernel.rows, kernel.cols
                        )));
                    }
                    model.kernels[l][k][i] = kernel;
                }
            }
        }
        let out = arch.layers.len() - 1;
        for (l, sets) in ck.assignments.iter().enumerate() {
            model.sets[l].copy_from_slice(sets);
        }
        model.output_set = ck.output_set;
        model.sets[out] = vec![ck.output_set; model.arch.layers[out].neurons];
        model.biases = ck.biases.clone();
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(&self.to_checkpoint())?;
        crate::io::write_atomic(path, json.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let ck: Checkpoint = serde_json::from_str(&text)?;
        Self::from_checkpoint(&ck)
    }

    /// Full forward pass of a single-input network.
    pub fn forward(&self, input: &FeatureMap) -> Result<(FeatureMap, ForwardTrace)> {
        let trace = self.forward_maps(std::slice::from_ref(input))?;
        let out = trace.output().clone();
        Ok((out, trace))
    }

    /// Output map only, without keeping a trace.
    pub fn predict(&self, input: &FeatureMap) -> Result<FeatureMap> {
        Ok(self.forward(input)?.0)
    }

    /// Forward pass over `inputs.len() == architecture.inputs` maps.
    pub fn forward_maps(&self, inputs: &[FeatureMap]) -> Result<ForwardTrace> {
        if inputs.len() != self.arch.inputs {
            return Err(OnnError::Shape(format!(
                "{} input maps for {} network inputs",
                inputs.len(),
                self.arch.inputs
            )));
        }
        let mut layers: Vec<LayerTrace> = Vec::with_capacity(self.layer_count());
        for l in 0..self.layer_count() {
            let prev: &[FeatureMap] = match layers.last() {
                Some(t) => &t.outputs,
                None => inputs,
            };
            let mut trace = LayerTrace::default();
            for k in 0..self.neurons(l) {
                let (y, nt) = self.neuron_forward(l, k, prev)?;
                trace.pre_activation.push(nt.pre_activation);
                trace.activated.push(nt.activated);
                trace.argmedian.push(nt.argmedian);
                trace.outputs.push(y);
            }
            layers.push(trace);
        }
        Ok(ForwardTrace {
            inputs: inputs.to_vec(),
            layers,
        })
    }

    /// Forward pass of one neuron given the previous layer's outputs.
    pub fn neuron_forward(
        &self,
        l: usize,
        k: usize,
        prev: &[FeatureMap],
    ) -> Result<(FeatureMap, NeuronTrace)> {
        if prev.len() != self.arch.fan_in(l) {
            return Err(OnnError::Shape(format!(
                "layer {l} expects {} inputs, got {}",
                self.arch.fan_in(l),
                prev.len()
            )));
        }
        let (h, w) = prev[0].shape();
        if prev.iter().any(|p| p.shape() != (h, w)) {
            return Err(OnnError::Shape(format!("layer {l} inputs differ in shape")));
        }
        let set = self.sets[l][k];
        let mut x = FeatureMap::filled(h, w, self.biases[l][k]);
        let mut argmedian = Vec::new();
        for (i, input) in prev.iter().enumerate() {
            let mut idx = (set.pool == Pool::Median).then(|| vec![0u8; h * w]);
            accumulate_oper2d(
                &self.kernels[l][k][i],
                input,
                set,
                &self.constants,
                x.as_mut_slice(),
                idx.as_deref_mut(),
            )?;
            if let Some(idx) = idx {
                argmedian.push(idx);
            }
        }
        let c = self.constants;
        let activated = x.map(|v| set.act.eval(v, &c));
        let y = match self.arch.layers[l].resample {
            Resample::None => activated.clone(),
            Resample::Down2 => activated.down2()?,
            Resample::Up2 => activated.up2(),
        };
        Ok((
            y,
            NeuronTrace {
                pre_activation: x,
                activated,
                argmedian,
            },
        ))
    }
}

/// Per-neuron forward cache.
#[derive(Clone, Debug)]
pub struct NeuronTrace {
    pub pre_activation: FeatureMap,
    /// Activation output before resampling.
    pub activated: FeatureMap,
    /// For median-pool neurons: selected tap per pixel, one grid per source
    /// neuron. Empty for summation.
    pub argmedian: Vec<Vec<u8>>,
}

#[derive(Clone, Debug, Default)]
pub struct LayerTrace {
    pub pre_activation: Vec<FeatureMap>,
    pub activated: Vec<FeatureMap>,
    pub argmedian: Vec<Vec<Vec<u8>>>,
    /// Resampled outputs, the next layer's inputs.
    pub outputs: Vec<FeatureMap>,
}

/// Everything the backward pass needs from a forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub inputs: Vec<FeatureMap>,
    pub layers: Vec<LayerTrace>,
}

impl ForwardTrace {
    pub fn output(&self) -> &FeatureMap {
        &self.layers.last().expect("non-empty network").outputs[0]
    }

    /// Inputs of computing layer `l`.
    pub fn layer_inputs(&self, l: usize) -> &[FeatureMap] {
        if l == 0 {
            &self.inputs
        } else {
            &self.layers[l - 1].outputs
        }
    }
}

/// `oper2d` on a single map: nodal terms over each zero-padded kernel window,
/// pooled. Output size equals input size. For median pools the selected tap
/// (`r * cols + t`) of every pixel is returned.
pub fn oper2d(
    kernel: &Kernel,
    input: &FeatureMap,
    set: OperatorSet,
    c: &OperatorConstants,
) -> Result<(FeatureMap, Option<Vec<u8>>)> {
    let (h, w) = input.shape();
    let mut out = FeatureMap::zeros(h, w);
    let mut idx = (set.pool == Pool::Median).then(|| vec![0u8; h * w]);
    accumulate_oper2d(kernel, input, set, c, out.as_mut_slice(), idx.as_deref_mut())?;
    Ok((out, idx))
}

/// Adds `oper2d(kernel, input)` into `out`.
pub(crate) fn accumulate_oper2d(
    kernel: &Kernel,
    input: &FeatureMap,
    set: OperatorSet,
    c: &OperatorConstants,
    out: &mut [f64],
    argmedian: Option<&mut [u8]>,
) -> Result<()> {
    let (h, w) = input.shape();
    let pad_r = kernel.rows / 2;
    let pad_c = kernel.cols / 2;
    if kernel.rows > h + 2 * pad_r || kernel.cols > w + 2 * pad_c {
        return Err(OnnError::Shape("kernel larger than padded input".into()));
    }
    if kernel.rows * kernel.cols > 255 {
        return Err(OnnError::Shape("kernel window exceeds 255 taps".into()));
    }
    debug_assert_eq!(out.len(), h * w);
    macro_rules! dispatch {
        ($f:ident $(, $extra:expr)*) => {
            match set.nodal {
                Nodal::Linear => $f(kernel, input, out, $($extra,)* |a, b| a * b),
                Nodal::Cubic => $f(kernel, input, out, $($extra,)* |a, b| Nodal::Cubic.eval(a, b, c)),
                Nodal::Sine => $f(kernel, input, out, $($extra,)* |a, b| Nodal::Sine.eval(a, b, c)),
                Nodal::Exp => $f(kernel, input, out, $($extra,)* |a, b| Nodal::Exp.eval(a, b, c)),
                Nodal::Sinh => $f(kernel, input, out, $($extra,)* |a, b| Nodal::Sinh.eval(a, b, c)),
                Nodal::Sinc => $f(kernel, input, out, $($extra,)* |a, b| Nodal::Sinc.eval(a, b, c)),
                Nodal::Chirp => $f(kernel, input, out, $($extra,)* |a, b| Nodal::Chirp.eval(a, b, c)),
            }
        };
    }
    match set.pool {
        Pool::Sum => dispatch!(sum_window),
        Pool::Median => {
            let idx = argmedian.ok_or_else(|| {
                OnnError::Invalid("median pool needs an argmedian buffer".into())
            })?;
            dispatch!(median_window, idx)
        }
    }
    Ok(())
}

/// Valid output range along one axis for tap offset `d` (input index is
/// `o + d`).
#[inline]
pub(crate) fn valid_range(len: usize, d: isize) -> std::ops::Range<usize> {
    let lo = (-d).max(0) as usize;
    let hi = (len as isize - d).clamp(0, len as isize) as usize;
    lo..hi.max(lo)
}

#[inline]
fn sum_window<F: Fn(f64, f64) -> f64>(kernel: &Kernel, input: &FeatureMap, out: &mut [f64], f: F) {
    let (h, w) = input.shape();
    let src = input.as_slice();
    let (pr, pc) = ((kernel.rows / 2) as isize, (kernel.cols / 2) as isize);
    for r in 0..kernel.rows {
        let dr = r as isize - pr;
        let rows = valid_range(h, dr);
        for t in 0..kernel.cols {
            let dc = t as isize - pc;
            let cols = valid_range(w, dc);
            let wv = kernel.weights[r * kernel.cols + t];
            for m in rows.clone() {
                let s = ((m as isize + dr) as usize) * w;
                let dst = &mut out[m * w..(m + 1) * w];
                for n in cols.clone() {
                    dst[n] += f(wv, src[(s as isize + n as isize + dc) as usize]);
                }
            }
        }
    }
}

#[inline]
fn median_window<F: Fn(f64, f64) -> f64>(
    kernel: &Kernel,
    input: &FeatureMap,
    out: &mut [f64],
    argmedian: &mut [u8],
    f: F,
) {
    let (h, w) = input.shape();
    let (pr, pc) = ((kernel.rows / 2) as isize, (kernel.cols / 2) as isize);
    let taps = kernel.rows * kernel.cols;
    let mut terms = vec![0.0; taps];
    for m in 0..h {
        for n in 0..w {
            for r in 0..kernel.rows {
                let ir = m as isize + r as isize - pr;
                for t in 0..kernel.cols {
                    let ic = n as isize + t as isize - pc;
                    let j = r * kernel.cols + t;
                    terms[j] = if ir < 0 || ic < 0 || ir >= h as isize || ic >= w as isize {
                        // zero padding: Ψ(w, 0) == 0 for every nodal operator
                        0.0
                    } else {
                        f(kernel.weights[j], input.get(ir as usize, ic as usize))
                    };
                }
            }
            let j = crate::operators::median_index(&terms);
            out[m * w + n] += terms[j];
            argmedian[m * w + n] = j as u8;
        }
    }
}

/// Serialized form of an [`OnnModel`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub version: u32,
    pub architecture: Architecture,
    pub constants: OperatorConstants,
    pub output_set: OperatorSet,
    /// `assignments[hidden layer][neuron]`.
    pub assignments: Vec<Vec<OperatorSet>>,
    /// `kernels[layer][k][i]` as row-major nested arrays.
    pub kernels: Vec<Vec<Vec<Vec<Vec<f64>>>>>,
    pub biases: Vec<Vec<f64>>,
}
