//! Two-hidden-layer perceptron mapping objective vectors to electrode
//! coordinates, trained by Fletcher-Reeves conjugate gradients.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::TrainingSet;
use crate::error::{Error, Result};
use crate::geometry::{ElectrodeLayout, PolygonDomain, project_layout};

/// The objective queried for an optimized layout: perfect conditioning and
/// zero misfit.
pub const TARGET_OBJECTIVE: [f64; 2] = [1.0, 0.0];

/// Hidden layer sizes from the training-set size:
/// `L1 = sqrt((k+2) N) + 2 sqrt(N/(k+2))`, `L2 = k sqrt(N/(k+2))`, floored.
pub fn huang_layer_sizes(k: usize, n_layouts: usize) -> (usize, usize) {
    let (k, n) = (k as f64, n_layouts as f64);
    let l1 = ((k + 2.0) * n).sqrt() + 2.0 * (n / (k + 2.0)).sqrt();
    let l2 = k * (n / (k + 2.0)).sqrt();
    ((l1.floor() as usize).max(1), (l2.floor() as usize).max(1))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    pub hidden1: usize,
    pub hidden2: usize,
    pub output_dim: usize,
}

impl Architecture {
    pub fn new(hidden1: usize, hidden2: usize, output_dim: usize) -> Self {
        Architecture {
            input_dim: 2,
            hidden1,
            hidden2,
            output_dim,
        }
    }

    fn layers(&self) -> [(usize, usize); 3] {
        [
            (self.hidden1, self.input_dim),
            (self.hidden2, self.hidden1),
            (self.output_dim, self.hidden2),
        ]
    }

    /// Offsets of (weights, bias) per layer in the flat parameter vector.
    fn offsets(&self) -> [(usize, usize); 3] {
        let mut out = [(0, 0); 3];
        let mut at = 0;
        for (l, (rows, cols)) in self.layers().into_iter().enumerate() {
            out[l] = (at, at + rows * cols);
            at += rows * cols + rows;
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.layers().iter().map(|(r, c)| r * c + r).sum()
    }

    /// Number of weights (biases excluded).
    pub fn weight_count(&self) -> usize {
        self.layers().iter().map(|(r, c)| r * c).sum()
    }

    #[cfg(test)]
    fn is_weight(&self, idx: usize) -> bool {
        self.offsets()
            .iter()
            .zip(self.layers())
            .any(|(&(w, _), (r, c))| idx >= w && idx < w + r * c)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputTransform {
    /// Condition number enters as its base-10 logarithm.
    Log10Kappa,
    Identity,
}

impl InputTransform {
    pub fn apply(&self, theta: [f64; 2]) -> [f64; 2] {
        match self {
            InputTransform::Log10Kappa => [theta[0].log10(), theta[1]],
            InputTransform::Identity => theta,
        }
    }
}

/// Per-feature affine map of `[lo, hi]` onto `[-1, 1]`; constant features map to 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl Normalizer {
    pub fn fit(rows: &[Vec<f64>]) -> Self {
        let d = rows[0].len();
        let mut lo = vec![f64::INFINITY; d];
        let mut hi = vec![f64::NEG_INFINITY; d];
        for r in rows {
            for i in 0..d {
                lo[i] = lo[i].min(r[i]);
                hi[i] = hi[i].max(r[i]);
            }
        }
        Normalizer { lo, hi }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .enumerate()
            .map(|(i, &v)| {
                let span = self.hi[i] - self.lo[i];
                if span > 0.0 { 2.0 * (v - self.lo[i]) / span - 1.0 } else { 0.0 }
            })
            .collect()
    }

    pub fn inverse(&self, y: &[f64]) -> Vec<f64> {
        y.iter()
            .enumerate()
            .map(|(i, &v)| self.lo[i] + 0.5 * (v + 1.0) * (self.hi[i] - self.lo[i]))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Weight of the squared weight norm in the loss.
    pub alpha: f64,
    /// Stop when the training loss or the gradient norm falls below this.
    pub tol: f64,
    pub max_epochs: usize,
    /// Stop when validation loss has not improved for this many epochs.
    pub patience: usize,
    pub seed: u64,
    pub input_transform: InputTransform,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: 0.01,
            tol: 1e-7,
            max_epochs: 2000,
            patience: 100,
            seed: 0,
            input_transform: InputTransform::Identity,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingRecord {
    /// Training loss after each accepted step, starting with the initial loss.
    pub loss: Vec<f64>,
    pub gradient_norm: Vec<f64>,
    pub validation_loss: Vec<f64>,
    pub epochs: usize,
    pub best_epoch: usize,
    pub stop_reason: String,
    pub restarts: usize,
    pub n_train: usize,
    pub n_validation: usize,
    pub n_test: usize,
    pub test_loss: f64,
    pub excluded_columns: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub rows: usize,
    pub cols: usize,
    /// Row-major weights.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainedNetwork {
    pub architecture: Architecture,
    pub activation: String,
    pub input_transform: InputTransform,
    pub input_normalizer: Normalizer,
    pub output_normalizer: Normalizer,
    pub layers: Vec<Layer>,
    pub config: TrainConfig,
    pub record: TrainingRecord,
}

/// Normalized training problem: inputs and targets already mapped to the
/// network's units.
pub struct Problem<'a> {
    pub arch: Architecture,
    pub inputs: &'a [Vec<f64>],
    pub targets: &'a [Vec<f64>],
    pub alpha: f64,
}

fn forward_one(arch: &Architecture, p: &[f64], x: &[f64], a1: &mut [f64], a2: &mut [f64], y: &mut [f64]) {
    let [(w1, b1), (w2, b2), (w3, b3)] = arch.offsets();
    let (n0, n1, n2, n3) = (arch.input_dim, arch.hidden1, arch.hidden2, arch.output_dim);
    for i in 0..n1 {
        let row = &p[w1 + i * n0..w1 + (i + 1) * n0];
        a1[i] = (p[b1 + i] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()).tanh();
    }
    for i in 0..n2 {
        let row = &p[w2 + i * n1..w2 + (i + 1) * n1];
        a2[i] = (p[b2 + i] + row.iter().zip(a1.iter()).map(|(w, v)| w * v).sum::<f64>()).tanh();
    }
    for i in 0..n3 {
        let row = &p[w3 + i * n2..w3 + (i + 1) * n2];
        y[i] = p[b3 + i] + row.iter().zip(a2.iter()).map(|(w, v)| w * v).sum::<f64>();
    }
}

/// Network output for one normalized input.
pub fn evaluate(arch: &Architecture, params: &[f64], x: &[f64]) -> Vec<f64> {
    let mut a1 = vec![0.0; arch.hidden1];
    let mut a2 = vec![0.0; arch.hidden2];
    let mut y = vec![0.0; arch.output_dim];
    forward_one(arch, params, x, &mut a1, &mut a2, &mut y);
    y
}

pub fn weight_norm_sq(arch: &Architecture, params: &[f64]) -> f64 {
    arch.offsets()
        .iter()
        .zip(arch.layers())
        .map(|(&(w, _), (r, c))| params[w..w + r * c].iter().map(|v| v * v).sum::<f64>())
        .sum()
}

impl Problem<'_> {
    /// Mean over samples of the squared output error.
    pub fn data_loss(&self, params: &[f64]) -> f64 {
        let n = self.inputs.len() as f64;
        let mut total = 0.0;
        for (x, t) in self.inputs.iter().zip(self.targets) {
            let y = evaluate(&self.arch, params, x);
            total += y.iter().zip(t).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        }
        total / n
    }

    pub fn loss(&self, params: &[f64]) -> f64 {
        self.data_loss(params) + self.alpha * weight_norm_sq(&self.arch, params)
    }

    pub fn loss_and_gradient(&self, params: &[f64]) -> (f64, Vec<f64>) {
        let arch = &self.arch;
        let [(w1, b1), (w2, b2), (w3, b3)] = arch.offsets();
        let (n0, n1, n2, n3) = (arch.input_dim, arch.hidden1, arch.hidden2, arch.output_dim);
        let n = self.inputs.len() as f64;
        let mut g = vec![0.0; params.len()];
        let (mut a1, mut a2, mut y) = (vec![0.0; n1], vec![0.0; n2], vec![0.0; n3]);
        let (mut d2, mut d1) = (vec![0.0; n2], vec![0.0; n1]);
        let mut total = 0.0;
        for (x, t) in self.inputs.iter().zip(self.targets) {
            forward_one(arch, params, x, &mut a1, &mut a2, &mut y);
            d2.iter_mut().for_each(|v| *v = 0.0);
            for i in 0..n3 {
                let e = y[i] - t[i];
                total += e * e;
                let dy = 2.0 * e / n;
                g[b3 + i] += dy;
                let row = w3 + i * n2;
                for j in 0..n2 {
                    g[row + j] += dy * a2[j];
                    d2[j] += params[row + j] * dy;
                }
            }
            d1.iter_mut().for_each(|v| *v = 0.0);
            for j in 0..n2 {
                let dz = d2[j] * (1.0 - a2[j] * a2[j]);
                g[b2 + j] += dz;
                let row = w2 + j * n1;
                for i in 0..n1 {
                    g[row + i] += dz * a1[i];
                    d1[i] += params[row + i] * dz;
                }
            }
            for i in 0..n1 {
                let dz = d1[i] * (1.0 - a1[i] * a1[i]);
                g[b1 + i] += dz;
                let row = w1 + i * n0;
                for (c, xv) in x.iter().enumerate() {
                    g[row + c] += dz * xv;
                }
            }
        }
        let mut reg = 0.0;
        for (&(w, _), (r, c)) in arch.offsets().iter().zip(arch.layers()) {
            for idx in w..w + r * c {
                reg += params[idx] * params[idx];
                g[idx] += 2.0 * self.alpha * params[idx];
            }
        }
        (total / n + self.alpha * reg, g)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(x: &[f64], alpha: f64, d: &[f64]) -> Vec<f64> {
    x.iter().zip(d).map(|(a, b)| a + alpha * b).collect()
}

struct LineResult {
    alpha: f64,
    loss: f64,
    grad: Vec<f64>,
}

/// Line search for the strong Wolfe conditions (bracketing then zoom).
fn wolfe_search(problem: &Problem, x: &[f64], d: &[f64], f0: f64, g0d: f64, alpha0: f64) -> Option<LineResult> {
    const C1: f64 = 1e-4;
    const C2: f64 = 0.1;
    const MAX_EVALS: usize = 40;
    let eval = |a: f64| {
        let (f, g) = problem.loss_and_gradient(&axpy(x, a, d));
        let gd = dot(&g, d);
        (f, g, gd)
    };
    let mut evals = 0;
    let (mut a_prev, mut f_prev, mut gd_prev) = (0.0, f0, g0d);
    let mut a = alpha0;
    let zoom = |mut lo: (f64, f64, f64), mut hi: (f64, f64, f64), evals: &mut usize| -> Option<LineResult> {
        while *evals < MAX_EVALS {
            // quadratic interpolation from lo's value and slope and hi's value
            let (al, fl, gl) = lo;
            let (ah, fh, _) = hi;
            let span = ah - al;
            let denom = 2.0 * (fh - fl - gl * span);
            let mut trial = if denom.abs() > 0.0 { al - gl * span * span / denom } else { al + 0.5 * span };
            let (mn, mx) = if al < ah { (al, ah) } else { (ah, al) };
            let margin = 0.1 * (mx - mn);
            if !trial.is_finite() || trial < mn + margin || trial > mx - margin {
                trial = 0.5 * (al + ah);
            }
            *evals += 1;
            let (f, g, gd) = eval(trial);
            if !f.is_finite() {
                hi = (trial, f64::INFINITY, 0.0);
                continue;
            }
            if f > f0 + C1 * trial * g0d || f >= fl {
                hi = (trial, f, gd);
            } else {
                if gd.abs() <= -C2 * g0d {
                    return Some(LineResult { alpha: trial, loss: f, grad: g });
                }
                if gd * (ah - al) >= 0.0 {
                    hi = lo;
                }
                lo = (trial, f, gd);
            }
            if (hi.0 - lo.0).abs() <= 1e-16 * lo.0.abs().max(1e-300) {
                break;
            }
        }
        // accept the best sufficient-decrease point found, if any
        if lo.0 > 0.0 && lo.1 < f0 {
            let (f, g) = problem.loss_and_gradient(&axpy(x, lo.0, d));
            return Some(LineResult { alpha: lo.0, loss: f, grad: g });
        }
        None
    };
    while evals < MAX_EVALS {
        evals += 1;
        let (f, g, gd) = eval(a);
        if !f.is_finite() {
            // step far too long; shrink
            a = 0.5 * (a_prev + a);
            continue;
        }
        if f > f0 + C1 * a * g0d || (evals > 1 && f >= f_prev) {
            return zoom((a_prev, f_prev, gd_prev), (a, f, gd), &mut evals);
        }
        if gd.abs() <= -C2 * g0d {
            return Some(LineResult { alpha: a, loss: f, grad: g });
        }
        if gd >= 0.0 {
            return zoom((a, f, gd), (a_prev, f_prev, gd_prev), &mut evals);
        }
        a_prev = a;
        f_prev = f;
        gd_prev = gd;
        a *= 2.0;
    }
    None
}

fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Fletcher-Reeves conjugate gradients on `problem` with validation-based
/// early stopping. Returns the parameters with the lowest validation loss.
pub fn train_parameters(
    problem: &Problem,
    validation: Option<&Problem>,
    init: Vec<f64>,
    cfg: &TrainConfig,
) -> Result<(Vec<f64>, TrainingRecord)> {
    let mut record = TrainingRecord::default();
    let mut x = init;
    let (mut f, mut g) = problem.loss_and_gradient(&x);
    if !f.is_finite() {
        return Err(Error::Training(format!("initial loss is not finite ({f})")));
    }
    let val_loss = |p: &[f64]| validation.map_or(f64::NAN, |v| v.data_loss(p));
    let mut best = (val_loss(&x), x.clone(), 0usize);
    record.loss.push(f);
    record.gradient_norm.push(norm(&g));
    record.validation_loss.push(best.0);
    let mut d: Vec<f64> = g.iter().map(|v| -v).collect();
    let mut since_restart = 0usize;
    let mut alpha_prev = 1.0 / norm(&g).max(1e-300);
    let mut gd_prev = -dot(&g, &g);
    let restart_every = problem.arch.weight_count().max(1);
    let mut stop = String::from("maximum epochs reached");
    let mut epoch = 0;
    while epoch < cfg.max_epochs {
        if f < cfg.tol {
            stop = "training loss below tolerance".into();
            break;
        }
        if norm(&g) < cfg.tol {
            stop = "gradient norm below tolerance".into();
            break;
        }
        let mut gd = dot(&g, &d);
        if gd >= 0.0 {
            d = g.iter().map(|v| -v).collect();
            gd = -dot(&g, &g);
            since_restart = 0;
            record.restarts += 1;
        }
        let alpha0 = (alpha_prev * gd_prev / gd).clamp(1e-12, 1e6);
        let mut step = wolfe_search(problem, &x, &d, f, gd, alpha0);
        if step.is_none() && since_restart > 0 {
            d = g.iter().map(|v| -v).collect();
            gd = -dot(&g, &g);
            since_restart = 0;
            record.restarts += 1;
            step = wolfe_search(problem, &x, &d, f, gd, (1.0 / norm(&g)).min(1.0));
        }
        let Some(step) = step else {
            stop = "line search failed".into();
            break;
        };
        if !(step.loss < f) {
            stop = "line search failed".into();
            break;
        }
        epoch += 1;
        x = axpy(&x, step.alpha, &d);
        let g_new = step.grad;
        f = step.loss;
        if !f.is_finite() {
            return Err(Error::Training(format!("loss became non-finite at epoch {epoch}")));
        }
        since_restart += 1;
        let beta = dot(&g_new, &g_new) / dot(&g, &g);
        alpha_prev = step.alpha;
        gd_prev = gd;
        if since_restart >= restart_every {
            d = g_new.iter().map(|v| -v).collect();
            since_restart = 0;
            record.restarts += 1;
        } else {
            d = g_new.iter().zip(&d).map(|(gv, dv)| -gv + beta * dv).collect();
        }
        g = g_new;
        let v = val_loss(&x);
        record.loss.push(f);
        record.gradient_norm.push(norm(&g));
        record.validation_loss.push(v);
        if validation.is_some() {
            if v < best.0 {
                best = (v, x.clone(), epoch);
            } else if epoch - best.2 >= cfg.patience {
                stop = format!("validation loss did not improve for {} epochs", cfg.patience);
                break;
            }
        }
    }
    record.epochs = epoch;
    record.stop_reason = stop;
    if validation.is_some() {
        record.best_epoch = best.2;
        Ok((best.1, record))
    } else {
        record.best_epoch = epoch;
        Ok((x, record))
    }
}

/// Uniform initialization in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`, zero biases.
pub fn initial_parameters(arch: &Architecture, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = vec![0.0; arch.parameter_count()];
    for (&(w, _), (r, c)) in arch.offsets().iter().zip(arch.layers()) {
        let bound = 1.0 / (c as f64).sqrt();
        for v in &mut p[w..w + r * c] {
            *v = rng.random_range(-bound..bound);
        }
    }
    p
}

/// Random split of `0..n` into train, validation and test thirds.
pub fn split_thirds(n: usize, seed: u64) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let third = n / 3;
    let test = idx.split_off(2 * third);
    let val = idx.split_off(third);
    (idx, val, test)
}

/// Trains on raw (theta, layout) pairs.
pub fn train_on(
    inputs: &[[f64; 2]],
    outputs: &[Vec<f64>],
    arch: Architecture,
    cfg: &TrainConfig,
) -> Result<TrainedNetwork> {
    if inputs.len() < 3 || inputs.len() != outputs.len() {
        return Err(Error::Training(format!(
            "need at least 3 matching samples, got {} inputs and {} outputs",
            inputs.len(),
            outputs.len()
        )));
    }
    if outputs.iter().any(|o| o.len() != arch.output_dim) {
        return Err(Error::Dimension(format!("outputs must have length {}", arch.output_dim)));
    }
    let transformed: Vec<Vec<f64>> = inputs.iter().map(|&t| cfg.input_transform.apply(t).to_vec()).collect();
    if transformed.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Training("transformed inputs contain non-finite values".into()));
    }
    let (tr, va, te) = split_thirds(inputs.len(), cfg.seed);
    let pick = |rows: &[Vec<f64>], ids: &[usize]| ids.iter().map(|&i| rows[i].clone()).collect::<Vec<_>>();
    let in_norm = Normalizer::fit(&pick(&transformed, &tr));
    let out_norm = Normalizer::fit(&pick(outputs, &tr));
    let xs: Vec<Vec<f64>> = transformed.iter().map(|x| in_norm.forward(x)).collect();
    let ys: Vec<Vec<f64>> = outputs.iter().map(|y| out_norm.forward(y)).collect();
    let (xt, yt) = (pick(&xs, &tr), pick(&ys, &tr));
    let (xv, yv) = (pick(&xs, &va), pick(&ys, &va));
    let (xe, ye) = (pick(&xs, &te), pick(&ys, &te));
    let problem = Problem { arch, inputs: &xt, targets: &yt, alpha: cfg.alpha };
    let validation = Problem { arch, inputs: &xv, targets: &yv, alpha: 0.0 };
    let test = Problem { arch, inputs: &xe, targets: &ye, alpha: 0.0 };
    let init = initial_parameters(&arch, cfg.seed ^ 0x5eed);
    let (params, mut record) = train_parameters(&problem, Some(&validation), init, cfg)?;
    record.n_train = tr.len();
    record.n_validation = va.len();
    record.n_test = te.len();
    record.test_loss = test.data_loss(&params);
    Ok(TrainedNetwork::from_parts(arch, params, cfg.clone(), in_norm, out_norm, record))
}

/// Trains on the finite-kappa columns of a training set with Huang-sized
/// hidden layers.
pub fn train(set: &TrainingSet, cfg: &TrainConfig) -> Result<TrainedNetwork> {
    let (inputs, outputs, excluded) = set.usable_columns();
    if excluded > 0 {
        eprintln!("excluding {excluded} columns with non-finite objectives");
    }
    let (l1, l2) = huang_layer_sizes(set.k(), set.manifest.config.n_layouts);
    let mut net = train_on(&inputs, &outputs, Architecture::new(l1, l2, 2 * set.k()), cfg)?;
    net.record.excluded_columns = excluded;
    Ok(net)
}

impl TrainedNetwork {
    fn from_parts(
        arch: Architecture,
        params: Vec<f64>,
        config: TrainConfig,
        input_normalizer: Normalizer,
        output_normalizer: Normalizer,
        record: TrainingRecord,
    ) -> Self {
        let layers = arch
            .offsets()
            .iter()
            .zip(arch.layers())
            .map(|(&(w, b), (rows, cols))| Layer {
                rows,
                cols,
                weights: params[w..w + rows * cols].to_vec(),
                bias: params[b..b + rows].to_vec(),
            })
            .collect();
        TrainedNetwork {
            architecture: arch,
            activation: "tanh".into(),
            input_transform: config.input_transform,
            input_normalizer,
            output_normalizer,
            layers,
            config,
            record,
        }
    }

    pub fn parameters(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(&l.bias).copied())
            .collect()
    }

    pub fn weight_norm(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|l| &l.weights)
            .map(|w| w * w)
            .sum::<f64>()
            .sqrt()
    }

    /// Raw stacked coordinates predicted for one objective vector.
    pub fn predict(&self, theta: [f64; 2]) -> Vec<f64> {
        let x = self.input_normalizer.forward(&self.input_transform.apply(theta));
        let y = evaluate(&self.architecture, &self.parameters(), &x);
        self.output_normalizer.inverse(&y)
    }

    pub fn predict_batch(&self, thetas: &[[f64; 2]]) -> Vec<Vec<f64>> {
        let p = self.parameters();
        thetas
            .iter()
            .map(|&t| {
                let x = self.input_normalizer.forward(&self.input_transform.apply(t));
                self.output_normalizer.inverse(&evaluate(&self.architecture, &p, &x))
            })
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let net: TrainedNetwork = serde_json::from_str(text)?;
        let arch = net.architecture;
        let ok = net.layers.len() == 3
            && net.layers.iter().zip(arch.layers()).all(|(l, (r, c))| {
                l.rows == r && l.cols == c && l.weights.len() == r * c && l.bias.len() == r
            });
        if !ok {
            return Err(Error::Dimension("layer shapes do not match the architecture".into()));
        }
        Ok(net)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Queries the network at the target objective and projects the result onto
/// the admissible layouts.
pub fn optimize_layout(
    net: &TrainedNetwork,
    domain: &PolygonDomain,
    per_side: &[usize],
    width: f64,
    min_gap: f64,
) -> Result<ElectrodeLayout> {
    let raw = net.predict(TARGET_OBJECTIVE);
    project_layout(domain, per_side, width, min_gap, &raw)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_problem_data(n: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let xs: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect();
        let ys = xs
            .iter()
            .map(|x| vec![(x[0] * 2.0).sin(), x[0] * x[1], 0.3 - x[1]])
            .collect();
        (xs, ys)
    }

    #[test]
    fn huang_sizes() {
        assert_eq!(huang_layer_sizes(12, 2000), (191, 143));
        assert_eq!(huang_layer_sizes(1, 3), (5, 1));
        let mut prev = (0, 0);
        for n in 1..500 {
            let s = huang_layer_sizes(12, n);
            assert!(s.0 >= prev.0 && s.1 >= prev.1);
            prev = s;
        }
    }

    #[test]
    fn loss_matches_dense_reimplementation() {
        let arch = Architecture::new(5, 4, 3);
        let (xs, ys) = toy_problem_data(20, 1);
        let p = initial_parameters(&arch, 3);
        let prob = Problem { arch, inputs: &xs, targets: &ys, alpha: 0.01 };
        // dense oracle with explicit matrices
        let w1 = nalgebra::DMatrix::from_row_slice(5, 2, &p[0..10]);
        let b1 = nalgebra::DVector::from_column_slice(&p[10..15]);
        let w2 = nalgebra::DMatrix::from_row_slice(4, 5, &p[15..35]);
        let b2 = nalgebra::DVector::from_column_slice(&p[35..39]);
        let w3 = nalgebra::DMatrix::from_row_slice(3, 4, &p[39..51]);
        let b3 = nalgebra::DVector::from_column_slice(&p[51..54]);
        assert_eq!(arch.parameter_count(), 54);
        let mut data = 0.0;
        for (x, t) in xs.iter().zip(&ys) {
            let x = nalgebra::DVector::from_column_slice(x);
            let a1 = (&w1 * x + &b1).map(f64::tanh);
            let a2 = (&w2 * a1 + &b2).map(f64::tanh);
            let y = &w3 * a2 + &b3;
            data += (y - nalgebra::DVector::from_column_slice(t)).norm_squared();
        }
        let want = data / 20.0 + 0.01 * (w1.norm_squared() + w2.norm_squared() + w3.norm_squared());
        let got = prob.loss(&p);
        assert!((got - want).abs() <= 1e-10 * want);
        assert!((prob.loss_and_gradient(&p).0 - want).abs() <= 1e-10 * want);
    }

    #[test]
    fn gradient_matches_central_differences() {
        let arch = Architecture::new(6, 5, 3);
        let (xs, ys) = toy_problem_data(30, 2);
        let p = initial_parameters(&arch, 4);
        let prob = Problem { arch, inputs: &xs, targets: &ys, alpha: 0.01 };
        let (_, g) = prob.loss_and_gradient(&p);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..30 {
            let i = rng.random_range(0..p.len());
            let h = 1e-5;
            let mut pp = p.clone();
            pp[i] += h;
            let mut pm = p.clone();
            pm[i] -= h;
            let fd = (prob.loss(&pp) - prob.loss(&pm)) / (2.0 * h);
            assert!((fd - g[i]).abs() <= 1e-5 * g[i].abs().max(1e-3), "param {i}: {fd} vs {}", g[i]);
        }
        assert!(!arch.is_weight(12) && arch.is_weight(11));
    }

    #[test]
    fn training_loss_decreases_on_accepted_steps() {
        let arch = Architecture::new(8, 6, 3);
        let (xs, ys) = toy_problem_data(60, 5);
        let prob = Problem { arch, inputs: &xs, targets: &ys, alpha: 0.01 };
        let cfg = TrainConfig { max_epochs: 200, ..TrainConfig::default() };
        let (_, rec) = train_parameters(&prob, None, initial_parameters(&arch, 1), &cfg).unwrap();
        assert!(rec.loss.windows(2).all(|w| w[1] < w[0]));
        assert!(!rec.stop_reason.is_empty());
        assert!(rec.loss.last().unwrap() < &(0.5 * rec.loss[0]));
    }

    #[test]
    fn strong_regularization_shrinks_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let inputs: Vec<[f64; 2]> = (0..90).map(|_| [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)]).collect();
        let outputs: Vec<Vec<f64>> = inputs.iter().map(|t| vec![t[0] + t[1], t[0] - 2.0 * t[1]]).collect();
        let arch = Architecture::new(6, 5, 2);
        let base = TrainConfig { input_transform: InputTransform::Identity, max_epochs: 300, ..TrainConfig::default() };
        let small = train_on(&inputs, &outputs, arch, &base).unwrap();
        let big = train_on(&inputs, &outputs, arch, &TrainConfig { alpha: 1e6, ..base }).unwrap();
        assert!(big.weight_norm() <= small.weight_norm());
    }

    #[test]
    fn synthetic_linear_task_is_learned() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let a = [[0.5, -0.2], [0.1, 0.3], [-0.4, 0.25], [0.2, 0.2]];
        let b = [0.1, -0.3, 0.5, 0.0];
        let f = |t: [f64; 2]| (0..4).map(|i| a[i][0] * t[0] + a[i][1] * t[1] + b[i]).collect::<Vec<f64>>();
        let inputs: Vec<[f64; 2]> = (0..500).map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect();
        let outputs: Vec<Vec<f64>> = inputs.iter().map(|&t| f(t)).collect();
        let cfg = TrainConfig {
            alpha: 1e-8,
            input_transform: InputTransform::Identity,
            max_epochs: 3000,
            patience: 300,
            seed: 2,
            ..TrainConfig::default()
        };
        let net = train_on(&inputs, &outputs, Architecture::new(10, 8, 4), &cfg).unwrap();
        let (_, val, _) = split_thirds(500, cfg.seed);
        let mse = val
            .iter()
            .map(|&i| {
                let p = net.predict(inputs[i]);
                p.iter().zip(&outputs[i]).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / 4.0
            })
            .sum::<f64>()
            / val.len() as f64;
        assert!(mse <= 1e-4, "validation MSE {mse}");
        for t in [[0.3, -0.7], [-0.5, 0.5]] {
            let p = net.predict(t);
            for (x, y) in p.iter().zip(f(t)) {
                assert!((x - y).abs() <= 1e-2);
            }
        }
        let batch = net.predict_batch(&inputs[..10]);
        for (i, row) in batch.iter().enumerate() {
            assert_eq!(row, &net.predict(inputs[i]));
        }
    }

    #[test]
    fn prediction_is_continuous() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let inputs: Vec<[f64; 2]> = (0..60).map(|_| [10f64.powf(rng.random_range(18.0..24.0)), rng.random_range(0.1..10.0)]).collect();
        let outputs: Vec<Vec<f64>> = inputs.iter().map(|t| vec![t[0].log10() / 24.0, t[1] / 10.0]).collect();
        let cfg = TrainConfig { max_epochs: 50, ..TrainConfig::default() };
        let net = train_on(&inputs, &outputs, Architecture::new(4, 3, 2), &cfg).unwrap();
        let base = net.predict([1e20, 1.0]);
        let mut prev = f64::INFINITY;
        for e in [1e-2, 1e-4, 1e-6, 1e-8] {
            let p = net.predict([1e20 * (1.0 + e), 1.0 + e]);
            let d: f64 = p.iter().zip(&base).map(|(a, b)| (a - b).abs()).sum();
            assert!(d <= prev);
            prev = d;
        }
        assert!(prev < 1e-6);
    }

    #[test]
    fn json_round_trip() {
        let inputs: Vec<[f64; 2]> = (0..30).map(|i| [1e20 * (1.0 + i as f64), i as f64 * 0.1]).collect();
        let outputs: Vec<Vec<f64>> = inputs.iter().map(|t| vec![t[1], 1.0 - t[1]]).collect();
        let cfg = TrainConfig { max_epochs: 20, ..TrainConfig::default() };
        let net = train_on(&inputs, &outputs, Architecture::new(3, 3, 2), &cfg).unwrap();
        let back = TrainedNetwork::from_json(&net.to_json().unwrap()).unwrap();
        assert_eq!(back, net);
        assert_eq!(back.predict([1e21, 0.5]), net.predict([1e21, 0.5]));
    }

    #[test]
    fn split_is_a_partition() {
        let (a, b, c) = split_thirds(10, 4);
        assert_eq!((a.len(), b.len(), c.len()), (3, 3, 4));
        let mut all: Vec<usize> = a.into_iter().chain(b).chain(c).collect();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }
}
