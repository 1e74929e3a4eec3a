//! Backpropagation through operational layers and the training loop.
//!
//! Deltas flow output -> input in four stages: the output delta, the
//! inter-layer pass through each `oper2d` adjoint (nodal `∂Ψ/∂y`, routed by
//! the pool derivative), the intra-neuron pass through resampling and
//! activation, and finally the kernel and bias sensitivities.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{OnnError, Result};
use crate::feature_map::FeatureMap;
use crate::network::{valid_range, ForwardTrace, Kernel, OnnModel, Resample};
use crate::operators::{Nodal, OperatorConstants, OperatorSet, Pool};
use crate::rng::{rng_for, OnnRng};

/// Kernel and bias sensitivities, shaped like the model.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientSet {
    /// `kernels[l][k][i]`, row-major like [`Kernel::weights`].
    pub kernels: Vec<Vec<Vec<Vec<f64>>>>,
    pub biases: Vec<Vec<f64>>,
}

impl GradientSet {
    pub fn zeros_like(model: &OnnModel) -> Self {
        let arch = model.architecture();
        let taps = arch.kernel_rows * arch.kernel_cols;
        let kernels = (0..model.layer_count())
            .map(|l| vec![vec![vec![0.0; taps]; arch.fan_in(l)]; model.neurons(l)])
            .collect();
        let biases = (0..model.layer_count())
            .map(|l| vec![0.0; model.neurons(l)])
            .collect();
        Self { kernels, biases }
    }

    pub fn kernel(&self, l: usize, k: usize, i: usize) -> &[f64] {
        &self.kernels[l][k][i]
    }

    pub fn bias(&self, l: usize, k: usize) -> f64 {
        self.biases[l][k]
    }

    fn values(&self) -> impl Iterator<Item = &f64> {
        self.kernels
            .iter()
            .flatten()
            .flatten()
            .flatten()
            .chain(self.biases.iter().flatten())
    }

    fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.kernels
            .iter_mut()
            .flatten()
            .flatten()
            .flatten()
            .chain(self.biases.iter_mut().flatten())
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(|v| v.is_finite())
    }

    pub fn is_zero(&self) -> bool {
        self.values().all(|&v| v == 0.0)
    }

    pub fn scale(&mut self, s: f64) {
        for v in self.values_mut() {
            *v *= s;
        }
    }

    /// `self += other`. Shapes must match.
    pub fn accumulate(&mut self, other: &GradientSet) {
        for (a, b) in self.values_mut().zip(other.values()) {
            *a += b;
        }
    }

    pub fn max_abs_diff(&self, other: &GradientSet) -> f64 {
        self.values()
            .zip(other.values())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    fn congruent(&self, model: &OnnModel) -> bool {
        let arch = model.architecture();
        let taps = arch.kernel_rows * arch.kernel_cols;
        self.kernels.len() == model.layer_count()
            && self.biases.len() == model.layer_count()
            && (0..model.layer_count()).all(|l| {
                self.biases[l].len() == model.neurons(l)
                    && self.kernels[l].len() == model.neurons(l)
                    && self.kernels[l]
                        .iter()
                        .all(|row| row.len() == arch.fan_in(l) && row.iter().all(|g| g.len() == taps))
            })
    }
}

/// Mean squared error over pixels.
pub fn mse(output: &FeatureMap, target: &FeatureMap) -> Result<f64> {
    output.ensure_shape(target)?;
    let sum: f64 = output
        .as_slice()
        .iter()
        .zip(target.as_slice())
        .map(|(o, t)| (o - t) * (o - t))
        .sum();
    Ok(sum / output.len() as f64)
}

/// `∂E/∂x` at the output neuron for `E = mse(output, target)`.
pub fn output_delta(model: &OnnModel, trace: &ForwardTrace, target: &FeatureMap) -> Result<FeatureMap> {
    let last = trace
        .layers
        .last()
        .ok_or_else(|| OnnError::Shape("empty trace".into()))?;
    let out_layer = model.layer_count() - 1;
    if model.architecture().layers[out_layer].resample != Resample::None {
        return Err(OnnError::Invalid("output layer must not resample".into()));
    }
    let output = &last.outputs[0];
    output.ensure_shape(target)?;
    let x = &last.pre_activation[0];
    let act = model.set(out_layer, 0).act;
    let c = model.constants();
    let scale = 2.0 / output.len() as f64;
    let data = output
        .as_slice()
        .iter()
        .zip(target.as_slice())
        .zip(x.as_slice())
        .map(|((o, t), xv)| scale * (o - t) * act.grad(*xv, c))
        .collect();
    FeatureMap::new(output.height(), output.width(), data)
}

/// Back-propagates output-layer deltas (`∂E/∂x` per output neuron) through the
/// network. Returns the gradients and the pre-activation deltas of every
/// layer.
pub fn backward(
    model: &OnnModel,
    trace: &ForwardTrace,
    output_deltas: &[FeatureMap],
) -> Result<(GradientSet, Vec<Vec<FeatureMap>>)> {
    let layers = model.layer_count();
    if trace.layers.len() != layers {
        return Err(OnnError::Shape("trace does not match model depth".into()));
    }
    for l in 0..layers {
        let t = &trace.layers[l];
        if t.pre_activation.len() != model.neurons(l) {
            return Err(OnnError::Shape(format!("stale trace at layer {l}")));
        }
    }
    let last = &trace.layers[layers - 1];
    if output_deltas.len() != model.neurons(layers - 1)
        || output_deltas
            .iter()
            .zip(&last.pre_activation)
            .any(|(d, x)| d.shape() != x.shape())
    {
        return Err(OnnError::Shape("output delta does not match trace".into()));
    }

    let c = *model.constants();
    let mut grads = GradientSet::zeros_like(model);
    let mut deltas: Vec<Vec<FeatureMap>> = vec![Vec::new(); layers];
    deltas[layers - 1] = output_deltas.to_vec();

    for l in (0..layers).rev() {
        let inputs = trace.layer_inputs(l);
        let (ih, iw) = inputs[0].shape();
        let mut input_deltas = vec![vec![0.0; ih * iw]; inputs.len()];
        for k in 0..model.neurons(l) {
            let delta = &deltas[l][k];
            if delta.shape() != (ih, iw) {
                return Err(OnnError::Shape(format!("stale trace at layer {l}")));
            }
            grads.biases[l][k] = delta.as_slice().iter().sum();
            let set = model.set(l, k);
            for (i, input) in inputs.iter().enumerate() {
                let argmed = trace.layers[l].argmedian[k].get(i).map(Vec::as_slice);
                oper2d_adjoint(
                    model.kernel(l, k, i),
                    input,
                    set,
                    &c,
                    delta.as_slice(),
                    argmed,
                    &mut grads.kernels[l][k][i],
                    &mut input_deltas[i],
                )?;
            }
        }
        if l == 0 {
            break;
        }
        // intra-neuron pass for the previous layer
        let prev = l - 1;
        let resample = model.architecture().layers[prev].resample;
        let mut prev_deltas = Vec::with_capacity(model.neurons(prev));
        for (i, d) in input_deltas.into_iter().enumerate() {
            let dy = FeatureMap::new(ih, iw, d)?;
            let dy = match resample {
                Resample::None => dy,
                Resample::Down2 => dy.down2_adjoint(),
                Resample::Up2 => dy.up2_adjoint()?,
            };
            let x = &trace.layers[prev].pre_activation[i];
            x.ensure_shape(&dy)?;
            let act = model.set(prev, i).act;
            let data = dy
                .as_slice()
                .iter()
                .zip(x.as_slice())
                .map(|(g, xv)| g * act.grad(*xv, &c))
                .collect();
            prev_deltas.push(FeatureMap::new(x.height(), x.width(), data)?);
        }
        deltas[prev] = prev_deltas;
    }
    Ok((grads, deltas))
}

/// Adjoint of `oper2d`: accumulates `∂E/∂w` into `grad_w` and `∂E/∂y` into
/// `grad_in` given `∂E/∂(pooled output)`.
#[allow(clippy::too_many_arguments)]
fn oper2d_adjoint(
    kernel: &Kernel,
    input: &FeatureMap,
    set: OperatorSet,
    c: &OperatorConstants,
    delta: &[f64],
    argmedian: Option<&[u8]>,
    grad_w: &mut [f64],
    grad_in: &mut [f64],
) -> Result<()> {
    macro_rules! dispatch {
        ($f:ident $(, $extra:expr)*) => {
            match set.nodal {
                Nodal::Linear => $f(kernel, input, delta, grad_w, grad_in, $($extra,)* |w, y| (y, w)),
                Nodal::Cubic => $f(kernel, input, delta, grad_w, grad_in, $($extra,)* |w, y| Nodal::Cubic.grads(w, y, c)),
                Nodal::Sine => $f(kernel, input, delta, grad_w, grad_in, $($extra,)* |w, y| Nodal::Sine.grads(w, y, c)),
                Nodal::Exp => $f(kernel, input, delta, grad_w, grad_in, $($extra,)* |w, y| Nodal::Exp.grads(w, y, c)),
                Nodal::Sinh => $f(kernel, input, delta, grad_w, grad_in, $($extra,)* |w, y| Nodal::Sinh.grads(w, y, c)),
                Nodal::Sinc => $f(kernel, input, delta, grad_w, grad_in, $($extra,)* |w, y| Nodal::Sinc.grads(w, y, c)),
                Nodal::Chirp => $f(kernel, input, delta, grad_w, grad_in, $($extra,)* |w, y| Nodal::Chirp.grads(w, y, c)),
            }
        };
    }
    match set.pool {
        Pool::Sum => dispatch!(sum_adjoint),
        Pool::Median => {
            let idx = argmedian
                .ok_or_else(|| OnnError::Shape("stale trace: missing argmedian".into()))?;
            if idx.len() != delta.len() {
                return Err(OnnError::Shape("stale trace: argmedian size".into()));
            }
            dispatch!(median_adjoint, idx)
        }
    }
    Ok(())
}

#[inline]
fn sum_adjoint<F: Fn(f64, f64) -> (f64, f64)>(
    kernel: &Kernel,
    input: &FeatureMap,
    delta: &[f64],
    grad_w: &mut [f64],
    grad_in: &mut [f64],
    f: F,
) {
    let (h, w) = input.shape();
    let y = input.as_slice();
    let (rows, cols) = (kernel.rows(), kernel.cols());
    let (pr, pc) = ((rows / 2) as isize, (cols / 2) as isize);
    for r in 0..rows {
        let dr = r as isize - pr;
        for t in 0..cols {
            let dc = t as isize - pc;
            let j = r * cols + t;
            let wv = kernel.weights()[j];
            let mut acc = 0.0;
            for m in valid_range(h, dr) {
                let src_row = ((m as isize + dr) as usize) * w;
                for n in valid_range(w, dc) {
                    let s = (src_row as isize + n as isize + dc) as usize;
                    let g = delta[m * w + n];
                    let (dw, dy) = f(wv, y[s]);
                    acc += g * dw;
                    grad_in[s] += g * dy;
                }
            }
            grad_w[j] += acc;
        }
    }
}

#[inline]
fn median_adjoint<F: Fn(f64, f64) -> (f64, f64)>(
    kernel: &Kernel,
    input: &FeatureMap,
    delta: &[f64],
    grad_w: &mut [f64],
    grad_in: &mut [f64],
    argmedian: &[u8],
    f: F,
) {
    let (h, w) = input.shape();
    let cols = kernel.cols();
    let (pr, pc) = ((kernel.rows() / 2) as isize, (cols / 2) as isize);
    for m in 0..h {
        for n in 0..w {
            let p = m * w + n;
            let j = argmedian[p] as usize;
            let ir = m as isize + (j / cols) as isize - pr;
            let ic = n as isize + (j % cols) as isize - pc;
            // a padded tap carries no gradient: Ψ(w, 0) is constant in w
            if ir < 0 || ic < 0 || ir >= h as isize || ic >= w as isize {
                continue;
            }
            let s = ir as usize * w + ic as usize;
            let g = delta[p];
            let (dw, dy) = f(kernel.weights()[j], input.as_slice()[s]);
            grad_w[j] += g * dw;
            grad_in[s] += g * dy;
        }
    }
}

/// Forward + backward for one pair. Returns the pair loss and its gradients.
pub fn pair_gradients(
    model: &OnnModel,
    input: &FeatureMap,
    target: &FeatureMap,
) -> Result<(f64, GradientSet)> {
    let (output, trace) = model.forward(input)?;
    let loss = mse(&output, target)?;
    let delta = output_delta(model, &trace, target)?;
    let (grads, _) = backward(model, &trace, std::slice::from_ref(&delta))?;
    Ok((loss, grads))
}

/// Mean loss and mean gradients over `pairs`.
pub fn batch_gradients(model: &OnnModel, pairs: &[(&FeatureMap, &FeatureMap)]) -> Result<(f64, GradientSet)> {
    if pairs.is_empty() {
        return Err(OnnError::Invalid("empty batch".into()));
    }
    let mut total = GradientSet::zeros_like(model);
    let mut loss = 0.0;
    for (input, target) in pairs {
        let (l, g) = pair_gradients(model, input, target)?;
        loss += l;
        total.accumulate(&g);
    }
    let n = pairs.len() as f64;
    total.scale(1.0 / n);
    Ok((loss / n, total))
}

/// Mean MSE of the model over `pairs`.
pub fn batch_loss(model: &OnnModel, pairs: &[(&FeatureMap, &FeatureMap)]) -> Result<f64> {
    let mut loss = 0.0;
    for (input, target) in pairs {
        loss += mse(&model.predict(input)?, target)?;
    }
    Ok(loss / pairs.len() as f64)
}

/// `w <- w - lr * g`, `b <- b - lr * g`.
pub fn sgd_step(model: &mut OnnModel, grads: &GradientSet, lr: f64) -> Result<()> {
    if !grads.congruent(model) {
        return Err(OnnError::Shape("gradient set does not match model".into()));
    }
    if !grads.is_finite() {
        return Err(OnnError::NonFiniteGradient);
    }
    let (kernels, biases) = model.parts_mut();
    for (kl, gl) in kernels.iter_mut().zip(&grads.kernels) {
        for (kr, gr) in kl.iter_mut().zip(gl) {
            for (kernel, g) in kr.iter_mut().zip(gr) {
                for (w, d) in kernel.weights_mut().iter_mut().zip(g) {
                    *w -= lr * d;
                }
            }
        }
    }
    for (bl, gl) in biases.iter_mut().zip(&grads.biases) {
        for (b, d) in bl.iter_mut().zip(gl) {
            *b -= lr * d;
        }
    }
    Ok(())
}

/// Global learning-rate adaptation constants.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSchedule {
    pub alpha: f64,
    pub beta: f64,
    pub lr_max: f64,
    pub lr_min: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            alpha: 1.05,
            beta: 0.7,
            lr_max: 5e-1,
            lr_min: 5e-5,
        }
    }
}

impl LrSchedule {
    /// Grows the rate by `alpha` after an improvement and shrinks it by
    /// `beta` otherwise, unless the result would leave `[lr_min, lr_max]`.
    pub fn adapt(&self, e_now: f64, e_prev: f64, lr: f64) -> f64 {
        if e_now < e_prev {
            let up = self.alpha * lr;
            if up <= self.lr_max {
                return up;
            }
        } else {
            let down = self.beta * lr;
            if down >= self.lr_min {
                return down;
            }
        }
        lr
    }
}

/// [`LrSchedule::adapt`] with the default constants.
pub fn adapt_lr(e_now: f64, e_prev: f64, lr: f64) -> f64 {
    LrSchedule::default().adapt(e_now, e_prev, lr)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Batch {
    /// Every pair in every iteration.
    Full,
    /// Shuffled mini-batches of the given size.
    Mini(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    pub lr0: f64,
    #[serde(flatten)]
    pub schedule: LrSchedule,
    pub batch: Batch,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 240,
            lr0: 0.01,
            schedule: LrSchedule::default(),
            batch: Batch::Full,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let s = &self.schedule;
        if !(s.alpha > 1.0 && 1.0 > s.beta && s.beta > 0.0) {
            return Err(OnnError::Invalid("need alpha > 1 > beta > 0".into()));
        }
        if !(s.lr_min < self.lr0 && self.lr0 <= s.lr_max) {
            return Err(OnnError::Invalid("need lr_min < lr0 <= lr_max".into()));
        }
        if self.batch == Batch::Mini(0) {
            return Err(OnnError::Invalid("mini-batch size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub iter: usize,
    /// Batch MSE before this iteration's update.
    pub loss: f64,
    /// Learning rate used for this iteration's update.
    pub lr: f64,
    pub snr_train: Option<f64>,
    pub snr_test: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTrace {
    pub entries: Vec<TraceEntry>,
}

impl LossTrace {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn losses(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.loss).collect()
    }

    /// CSV with header `iter,E,lr`, plus `snr_train,snr_test` when any entry
    /// carries evaluation results.
    pub fn to_csv(&self) -> String {
        let with_snr = self
            .entries
            .iter()
            .any(|e| e.snr_train.is_some() || e.snr_test.is_some());
        let mut out = String::from(if with_snr {
            "iter,E,lr,snr_train,snr_test\n"
        } else {
            "iter,E,lr\n"
        });
        for e in &self.entries {
            let _ = write!(out, "{},{:e},{:e}", e.iter, e.loss, e.lr);
            if with_snr {
                let _ = write!(out, ",{},{}", fmt_opt(e.snr_train), fmt_opt(e.snr_test));
            }
            out.push('\n');
        }
        out
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(x) if x.is_infinite() && x > 0.0 => "inf".into(),
        Some(x) => format!("{x}"),
        None => String::new(),
    }
}

/// Observer invoked after every update.
pub trait TrainHook {
    fn after_step(&mut self, _model: &OnnModel, _entry: &mut TraceEntry) -> Result<()> {
        Ok(())
    }
}

pub struct NoHook;

impl TrainHook for NoHook {}

impl<F: FnMut(&OnnModel, &mut TraceEntry) -> Result<()>> TrainHook for F {
    fn after_step(&mut self, model: &OnnModel, entry: &mut TraceEntry) -> Result<()> {
        self(model, entry)
    }
}

/// Stateful training loop: one [`Trainer::step`] is one BP iteration with the
/// learning-rate schedule carried across calls.
#[derive(Clone, Debug)]
pub struct Trainer {
    cfg: TrainConfig,
    lr: f64,
    prev_loss: Option<f64>,
    iteration: usize,
    rng: OnnRng,
    order: Vec<usize>,
    cursor: usize,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            lr: cfg.lr0,
            prev_loss: None,
            iteration: 0,
            rng: rng_for(cfg.seed, &[0x7261_696e]),
            order: Vec::new(),
            cursor: 0,
            cfg,
        })
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    fn next_batch(&mut self, n: usize) -> Vec<usize> {
        match self.cfg.batch {
            Batch::Full => (0..n).collect(),
            Batch::Mini(size) => {
                let size = size.min(n);
                let mut out = Vec::with_capacity(size);
                while out.len() < size {
                    if self.cursor >= self.order.len() || self.order.len() != n {
                        self.order = (0..n).collect();
                        self.order.shuffle(&mut self.rng);
                        self.cursor = 0;
                    }
                    out.push(self.order[self.cursor]);
                    self.cursor += 1;
                }
                out
            }
        }
    }

    /// Runs one iteration on `pairs`: loss and gradients at the current
    /// weights, learning-rate adaptation, then the SGD update.
    pub fn step(&mut self, model: &mut OnnModel, pairs: &[(FeatureMap, FeatureMap)]) -> Result<TraceEntry> {
        if pairs.is_empty() {
            return Err(OnnError::Invalid("no training pairs".into()));
        }
        let t = self.iteration;
        let batch: Vec<(&FeatureMap, &FeatureMap)> = self
            .next_batch(pairs.len())
            .into_iter()
            .map(|i| (&pairs[i].0, &pairs[i].1))
            .collect();
        let (loss, grads) = batch_gradients(model, &batch)?;
        if !loss.is_finite() || !grads.is_finite() {
            return Err(OnnError::Divergence { iteration: t });
        }
        if let Some(prev) = self.prev_loss {
            self.lr = self.cfg.schedule.adapt(loss, prev, self.lr);
        }
        sgd_step(model, &grads, self.lr).map_err(|e| match e {
            OnnError::NonFiniteGradient => OnnError::Divergence { iteration: t },
            other => other,
        })?;
        self.prev_loss = Some(loss);
        self.iteration += 1;
        Ok(TraceEntry {
            iter: t,
            loss,
            lr: self.lr,
            snr_train: None,
            snr_test: None,
        })
    }
}

/// Trains for `cfg.iterations` iterations.
pub fn train(
    model: &mut OnnModel,
    pairs: &[(FeatureMap, FeatureMap)],
    cfg: &TrainConfig,
    hook: &mut dyn TrainHook,
) -> Result<LossTrace> {
    let mut trainer = Trainer::new(cfg.clone())?;
    let mut trace = LossTrace::default();
    if cfg.iterations == 0 {
        return Ok(trace);
    }
    if pairs.is_empty() {
        return Err(OnnError::Invalid("no training pairs".into()));
    }
    let shape = pairs[0].0.shape();
    if pairs.iter().any(|(i, t)| i.shape() != shape || t.shape() != shape) {
        return Err(OnnError::Shape("training pairs differ in shape".into()));
    }
    for _ in 0..cfg.iterations {
        let mut entry = trainer.step(model, pairs)?;
        hook.after_step(model, &mut entry)?;
        trace.entries.push(entry);
    }
    Ok(trace)
}
