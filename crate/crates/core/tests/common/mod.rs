//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use onn_core::backprop::{mse, GradientSet};
use onn_core::network::{Architecture, OnnModel};
use onn_core::{FeatureMap, OperatorSet, OperatorSubLibrary, Resample};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_map(rng: &mut ChaCha8Rng, h: usize, w: usize) -> FeatureMap {
    FeatureMap::from_fn(h, w, |_, _| rng.random_range(-1.0..1.0))
}

/// Random weights and biases on `arch`, every hidden neuron on `set`.
pub fn random_model(arch: Architecture, set: OperatorSet, range: f64, seed: u64) -> OnnModel {
    let mut model = OnnModel::new(arch, Default::default()).unwrap();
    let mut r = rng(seed);
    model.init_weights(&mut r, range).unwrap();
    for l in 0..model.layer_count() {
        for k in 0..model.neurons(l) {
            *model.bias_mut(l, k) = r.random_range(-range..range);
        }
    }
    let lib = OperatorSubLibrary::full();
    for l in 0..model.hidden_layers() {
        model.assign_uniform(l, set, &lib).unwrap();
    }
    model
}

/// Population variance of each outgoing kernel, averaged.
pub fn oracle_power(model: &OnnModel, l: usize, k: usize) -> f64 {
    let next = l + 1;
    let mut total = 0.0;
    for j in 0..model.neurons(next) {
        let w = model.kernel(next, j, k).weights();
        let n = w.len() as f64;
        let mean = w.iter().sum::<f64>() / n;
        total += w.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    }
    total / model.neurons(next) as f64
}

pub fn loss(model: &OnnModel, input: &FeatureMap, target: &FeatureMap) -> f64 {
    mse(&model.predict(input).unwrap(), target).unwrap()
}

/// Relative error with an absolute floor for gradients that vanish.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-5)
}

/// Median routing of every neuron, used to detect finite-difference steps
/// that cross a non-differentiable reordering.
fn routing(model: &OnnModel, input: &FeatureMap) -> Vec<Vec<Vec<Vec<u8>>>> {
    let (_, trace) = model.forward(input).unwrap();
    trace.layers.into_iter().map(|l| l.argmedian).collect()
}

pub struct FdReport {
    pub checked: usize,
    pub skipped: usize,
    pub worst: f64,
    pub worst_at: String,
}

/// Central differences of the loss for every weight and bias, compared to
/// `analytic`. Parameters whose perturbation changes a median selection are
/// skipped.
pub fn finite_difference_check(
    model: &OnnModel,
    input: &FeatureMap,
    target: &FeatureMap,
    analytic: &GradientSet,
    step: f64,
) -> FdReport {
    let base_routing = routing(model, input);
    let has_median = base_routing.iter().flatten().any(|v| !v.is_empty());
    let mut report = FdReport {
        checked: 0,
        skipped: 0,
        worst: 0.0,
        worst_at: String::new(),
    };
    let mut probe = |perturb: &dyn Fn(&mut OnnModel, f64), a: f64, label: String| {
        let mut plus = model.clone();
        perturb(&mut plus, step);
        let mut minus = model.clone();
        perturb(&mut minus, -step);
        if has_median && (routing(&plus, input) != base_routing || routing(&minus, input) != base_routing) {
            report.skipped += 1;
            return;
        }
        let fd = (loss(&plus, input, target) - loss(&minus, input, target)) / (2.0 * step);
        let e = rel_err(a, fd);
        report.checked += 1;
        if e > report.worst {
            report.worst = e;
            report.worst_at = format!("{label}: analytic {a:e} fd {fd:e}");
        }
    };
    let arch = model.architecture().clone();
    let taps = arch.kernel_rows * arch.kernel_cols;
    for l in 0..model.layer_count() {
        for k in 0..model.neurons(l) {
            for i in 0..arch.fan_in(l) {
                for j in 0..taps {
                    probe(
                        &|m: &mut OnnModel, d| m.kernel_mut(l, k, i).weights_mut()[j] += d,
                        analytic.kernel(l, k, i)[j],
                        format!("w[{l}][{k}][{i}][{j}]"),
                    );
                }
            }
            probe(
                &|m: &mut OnnModel, d| *m.bias_mut(l, k) += d,
                analytic.bias(l, k),
                format!("b[{l}][{k}]"),
            );
        }
    }
    report
}

/// Plain convolutional network computed directly from the model's weights:
/// zero-padded correlation, tanh, 2x2 mean pooling / nearest up-sampling.
pub struct CnnOracle {
    /// `w[l][k][i][r][t]`
    w: Vec<Vec<Vec<Vec<Vec<f64>>>>>,
    b: Vec<Vec<f64>>,
    resample: Vec<Resample>,
    kr: usize,
    kc: usize,
}

type Grid = Vec<Vec<f64>>;

fn grid(m: &FeatureMap) -> Grid {
    (0..m.height()).map(|r| (0..m.width()).map(|c| m.get(r, c)).collect()).collect()
}

fn zeros(h: usize, w: usize) -> Grid {
    vec![vec![0.0; w]; h]
}

pub struct CnnGrads {
    pub w: Vec<Vec<Vec<Vec<Vec<f64>>>>>,
    pub b: Vec<Vec<f64>>,
}

impl CnnOracle {
    pub fn from_model(model: &OnnModel) -> Self {
        let arch = model.architecture();
        let (kr, kc) = (arch.kernel_rows, arch.kernel_cols);
        let w = (0..model.layer_count())
            .map(|l| {
                (0..model.neurons(l))
                    .map(|k| {
                        (0..arch.fan_in(l))
                            .map(|i| {
                                let ker = model.kernel(l, k, i);
                                (0..kr).map(|r| (0..kc).map(|t| ker.get(r, t)).collect()).collect()
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect();
        let b = (0..model.layer_count())
            .map(|l| (0..model.neurons(l)).map(|k| model.bias(l, k)).collect())
            .collect();
        Self {
            w,
            b,
            resample: arch.layers.iter().map(|l| l.resample).collect(),
            kr,
            kc,
        }
    }

    fn conv(&self, x: &Grid, ker: &[Vec<f64>]) -> Grid {
        let (h, w) = (x.len(), x[0].len());
        let (pr, pc) = ((self.kr / 2) as isize, (self.kc / 2) as isize);
        let mut out = zeros(h, w);
        for m in 0..h {
            for n in 0..w {
                let mut acc = 0.0;
                for (r, row) in ker.iter().enumerate() {
                    for (t, wv) in row.iter().enumerate() {
                        let a = m as isize + r as isize - pr;
                        let c = n as isize + t as isize - pc;
                        if a >= 0 && c >= 0 && (a as usize) < h && (c as usize) < w {
                            acc += wv * x[a as usize][c as usize];
                        }
                    }
                }
                out[m][n] = acc;
            }
        }
        out
    }

    /// Returns per layer `(inputs, pre-activations)` and the output grid.
    fn run(&self, input: &FeatureMap) -> (Vec<(Vec<Grid>, Vec<Grid>)>, Grid) {
        let mut ys = vec![grid(input)];
        let mut cache = Vec::new();
        for l in 0..self.w.len() {
            let mut xs = Vec::new();
            let mut outs = Vec::new();
            for k in 0..self.w[l].len() {
                let (h, w) = (ys[0].len(), ys[0][0].len());
                let mut x = vec![vec![self.b[l][k]; w]; h];
                for (i, y) in ys.iter().enumerate() {
                    let c = self.conv(y, &self.w[l][k][i]);
                    for m in 0..h {
                        for n in 0..w {
                            x[m][n] += c[m][n];
                        }
                    }
                }
                let a: Grid = x.iter().map(|row| row.iter().map(|v| v.tanh()).collect()).collect();
                let out = match self.resample[l] {
                    Resample::None => a,
                    Resample::Down2 => (0..h / 2)
                        .map(|m| {
                            (0..w / 2)
                                .map(|n| {
                                    (a[2 * m][2 * n] + a[2 * m][2 * n + 1] + a[2 * m + 1][2 * n] + a[2 * m + 1][2 * n + 1])
                                        / 4.0
                                })
                                .collect()
                        })
                        .collect(),
                    Resample::Up2 => (0..2 * h).map(|m| (0..2 * w).map(|n| a[m / 2][n / 2]).collect()).collect(),
                };
                xs.push(x);
                outs.push(out);
            }
            cache.push((ys, xs));
            ys = outs;
        }
        (cache, ys.remove(0))
    }

    pub fn forward(&self, input: &FeatureMap) -> FeatureMap {
        let (_, out) = self.run(input);
        let (h, w) = (out.len(), out[0].len());
        FeatureMap::from_fn(h, w, |r, c| out[r][c])
    }

    /// Loss and gradients of `mse(forward(input), target)`, written in the
    /// gather (full-correlation) form.
    pub fn gradients(&self, input: &FeatureMap, target: &FeatureMap) -> (f64, CnnGrads) {
        let (cache, out) = self.run(input);
        let t = grid(target);
        let (h, w) = (out.len(), out[0].len());
        let p = (h * w) as f64;
        let mut loss = 0.0;
        let last = cache.len() - 1;
        let x_out = &cache[last].1[0];
        let mut delta: Vec<Grid> = vec![(0..h)
            .map(|m| {
                (0..w)
                    .map(|n| {
                        let e = out[m][n] - t[m][n];
                        loss += e * e;
                        let f = x_out[m][n].tanh();
                        2.0 / p * e * (1.0 - f * f)
                    })
                    .collect()
            })
            .collect()];
        loss /= p;

        let mut gw: Vec<Vec<Vec<Vec<Vec<f64>>>>> = self
            .w
            .iter()
            .map(|l| l.iter().map(|k| k.iter().map(|_| vec![vec![0.0; self.kc]; self.kr]).collect()).collect())
            .collect();
        let mut gb: Vec<Vec<f64>> = self.b.iter().map(|l| vec![0.0; l.len()]).collect();
        let (pr, pc) = ((self.kr / 2) as isize, (self.kc / 2) as isize);

        for l in (0..cache.len()).rev() {
            let (ys, _) = &cache[l];
            let (ih, iw) = (ys[0].len(), ys[0][0].len());
            for k in 0..self.w[l].len() {
                gb[l][k] = delta[k].iter().flatten().sum();
                for (i, y) in ys.iter().enumerate() {
                    for r in 0..self.kr {
                        for tt in 0..self.kc {
                            let mut acc = 0.0;
                            for m in 0..ih {
                                for n in 0..iw {
                                    let a = m as isize + r as isize - pr;
                                    let c = n as isize + tt as isize - pc;
                                    if a >= 0 && c >= 0 && (a as usize) < ih && (c as usize) < iw {
                                        acc += delta[k][m][n] * y[a as usize][c as usize];
                                    }
                                }
                            }
                            gw[l][k][i][r][tt] = acc;
                        }
                    }
                }
            }
            if l == 0 {
                break;
            }
            // gather form: dY_i(a, c) = Σ_k Σ_{r,t} δ_k(a - r + p, c - t + p) w_ki(r, t)
            let mut next = Vec::new();
            for i in 0..ys.len() {
                let mut dy = zeros(ih, iw);
                for a in 0..ih {
                    for c in 0..iw {
                        let mut acc = 0.0;
                        for k in 0..self.w[l].len() {
                            for r in 0..self.kr {
                                for tt in 0..self.kc {
                                    let m = a as isize - r as isize + pr;
                                    let n = c as isize - tt as isize + pc;
                                    if m >= 0 && n >= 0 && (m as usize) < ih && (n as usize) < iw {
                                        acc += delta[k][m as usize][n as usize] * self.w[l][k][i][r][tt];
                                    }
                                }
                            }
                        }
                        dy[a][c] = acc;
                    }
                }
                let x_prev = &cache[l - 1].1[i];
                let (xh, xw) = (x_prev.len(), x_prev[0].len());
                let mut dx = zeros(xh, xw);
                for a in 0..xh {
                    for c in 0..xw {
                        let g = match self.resample[l - 1] {
                            Resample::None => dy[a][c],
                            Resample::Down2 => dy[a / 2][c / 2] / 4.0,
                            Resample::Up2 => {
                                dy[2 * a][2 * c] + dy[2 * a][2 * c + 1] + dy[2 * a + 1][2 * c] + dy[2 * a + 1][2 * c + 1]
                            }
                        };
                        let f = x_prev[a][c].tanh();
                        dx[a][c] = g * (1.0 - f * f);
                    }
                }
                next.push(dx);
            }
            delta = next;
        }
        (loss, CnnGrads { w: gw, b: gb })
    }

    /// Largest absolute difference between the oracle and `grads`.
    pub fn max_grad_diff(&self, oracle: &CnnGrads, grads: &GradientSet) -> f64 {
        let mut worst: f64 = 0.0;
        for l in 0..self.w.len() {
            for k in 0..self.w[l].len() {
                worst = worst.max((oracle.b[l][k] - grads.bias(l, k)).abs());
                for i in 0..self.w[l][k].len() {
                    let g = grads.kernel(l, k, i);
                    for r in 0..self.kr {
                        for t in 0..self.kc {
                            worst = worst.max((oracle.w[l][k][i][r][t] - g[r * self.kc + t]).abs());
                        }
                    }
                }
            }
        }
        worst
    }
}
