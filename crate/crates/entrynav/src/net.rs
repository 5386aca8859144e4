//! The density neural network: a 1-input, 100-tanh-hidden, 1-output MLP
//! regressing a transformed density against planet-centric radius.
//!
//! Density is mapped through `varrho = sqrt(B - log10(rho))` before
//! normalization, and the network is evaluated back through the inverse, so
//! its output is positive by construction. Reverse-mode gradients of the
//! density with respect to all 301 parameters drive the online adaptation.

use crate::atmos::ExpModel;
use crate::dynamics::{rk4_step, EntryDispersion, VehicleConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Hidden-layer width.
pub const HIDDEN: usize = 100;
/// Total trainable parameters: W_in, b_in, W_out each `HIDDEN`, plus b_out.
pub const N_PARAMS: usize = 3 * HIDDEN + 1;

const LN_10: f64 = std::f64::consts::LN_10;

#[derive(Debug, thiserror::Error)]
pub enum NetError {
    #[error("training diverged at epoch {epoch}: loss {loss}")]
    TrainingDiverged { epoch: usize, loss: f64 },
    #[error("density {rho} at sample {index} outside the transform domain (needs rho < 10^B)")]
    TransformDomain { rho: f64, index: usize },
    #[error("training data generation failed: {0}")]
    DataGeneration(#[from] crate::dynamics::DynamicsError),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("malformed network file: {0}")]
    MalformedFile(String),
}

/// MLP density model plus its input/output normalization statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpDensityNet {
    /// File schema version.
    pub format: u32,
    /// Input-layer weights (HIDDEN x 1).
    pub w_in: Vec<f64>,
    /// Input-layer biases.
    pub b_in: Vec<f64>,
    /// Output-layer weights (1 x HIDDEN).
    pub w_out: Vec<f64>,
    /// Output-layer bias.
    pub b_out: f64,
    /// Mean radius of the training inputs (m).
    pub r_mean: f64,
    /// Standard deviation of the training inputs (m).
    pub r_std: f64,
    /// Mean of the transformed training outputs.
    pub varrho_mean: f64,
    /// Standard deviation of the transformed training outputs.
    pub varrho_std: f64,
    /// Shift inside the sqrt-log transform (0 for SI densities below 1 kg/m^3).
    pub b_shift: f64,
}

/// `tanh` through a single exponential: `sign(x) * (1 - 2 / (exp(2|x|) + 1))`.
/// Agrees with the libm version to a few ulps (absolute) and saturates
/// exactly; one exp costs roughly half of a libm tanh, and this function
/// dominates both training and the online sigma-point evaluations.
#[inline]
pub(crate) fn fast_tanh(x: f64) -> f64 {
    let t = 1.0 - 2.0 / ((2.0 * x.abs()).exp() + 1.0);
    t.copysign(x)
}

/// Forward-pass intermediates kept for reuse by the backward pass.
struct ForwardTrace {
    input: f64,
    hidden: Vec<f64>,
    varrho: f64,
    rho: f64,
}

impl MlpDensityNet {
    /// Transform a density into network output space.
    pub fn transform(&self, rho: f64) -> f64 {
        (self.b_shift - rho.log10()).sqrt()
    }

    /// Inverse of [`transform`](Self::transform).
    pub fn inverse_transform(&self, varrho: f64) -> f64 {
        ((self.b_shift - varrho * varrho) * LN_10).exp()
    }

    #[allow(clippy::needless_range_loop)]
    fn trace(&self, r: f64) -> ForwardTrace {
        let input = (r - self.r_mean) / self.r_std;
        let mut hidden = vec![0.0; HIDDEN];
        let mut out = self.b_out;
        for j in 0..HIDDEN {
            let a = fast_tanh(self.w_in[j] * input + self.b_in[j]);
            hidden[j] = a;
            out += self.w_out[j] * a;
        }
        let varrho = out * self.varrho_std + self.varrho_mean;
        let rho = ((self.b_shift - varrho * varrho) * LN_10).exp();
        ForwardTrace { input, hidden, varrho, rho }
    }

    /// Estimated density at radius `r` (kg/m^3). Positive for all finite inputs.
    pub fn density(&self, r: f64) -> f64 {
        self.trace(r).rho
    }

    /// Density and its gradient with respect to the flattened parameter
    /// vector (order: w_in, b_in, w_out, b_out).
    pub fn density_and_gradient(&self, r: f64) -> (f64, Vec<f64>) {
        let tr = self.trace(r);
        // rho = exp((B - varrho^2) ln10)  =>  d rho / d varrho = -2 varrho ln10 rho
        let drho_dvarrho = -2.0 * tr.varrho * LN_10 * tr.rho;
        let drho_dout = drho_dvarrho * self.varrho_std;
        let mut grad = vec![0.0; N_PARAMS];
        for j in 0..HIDDEN {
            let a = tr.hidden[j];
            let delta = drho_dout * self.w_out[j] * (1.0 - a * a);
            grad[j] = delta * tr.input; // w_in
            grad[HIDDEN + j] = delta; // b_in
            grad[2 * HIDDEN + j] = drho_dout * a; // w_out
        }
        grad[3 * HIDDEN] = drho_dout; // b_out
        (tr.rho, grad)
    }

    /// Flattened copy of the trainable parameters.
    pub fn params(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(N_PARAMS);
        p.extend_from_slice(&self.w_in);
        p.extend_from_slice(&self.b_in);
        p.extend_from_slice(&self.w_out);
        p.push(self.b_out);
        p
    }

    pub fn set_params(&mut self, p: &[f64]) {
        assert_eq!(p.len(), N_PARAMS);
        self.w_in.copy_from_slice(&p[..HIDDEN]);
        self.b_in.copy_from_slice(&p[HIDDEN..2 * HIDDEN]);
        self.w_out.copy_from_slice(&p[2 * HIDDEN..3 * HIDDEN]);
        self.b_out = p[3 * HIDDEN];
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("net serialization");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, NetError> {
        let net: Self =
            serde_json::from_str(text).map_err(|e| NetError::MalformedFile(e.to_string()))?;
        net.validate()?;
        Ok(net)
    }

    pub fn validate(&self) -> Result<(), NetError> {
        if self.format != 1 {
            return Err(NetError::MalformedFile(format!("unsupported format {}", self.format)));
        }
        if self.w_in.len() != HIDDEN || self.b_in.len() != HIDDEN || self.w_out.len() != HIDDEN {
            return Err(NetError::MalformedFile("layer size mismatch".into()));
        }
        if self.r_std.is_nan() || self.r_std <= 0.0 || self.varrho_std.is_nan() || self.varrho_std <= 0.0 {
            return Err(NetError::MalformedFile("non-positive normalization scale".into()));
        }
        let finite = self
            .params()
            .iter()
            .chain([&self.r_mean, &self.r_std, &self.varrho_mean, &self.varrho_std, &self.b_shift])
            .all(|x| x.is_finite());
        if !finite {
            return Err(NetError::MalformedFile("non-finite parameter".into()));
        }
        Ok(())
    }
}

/// Adam optimizer state. Moving averages are not bias-corrected, and the
/// squared-gradient average starts from the first gradient squared.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step_count: u64,
    initialized: bool,
}

impl AdamState {
    pub fn new(n: usize, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], beta1, beta2, eps, step_count: 0, initialized: false }
    }

    /// Construct with explicit moving averages (treated as already seeded).
    pub fn with_moments(m: Vec<f64>, v: Vec<f64>, beta1: f64, beta2: f64, eps: f64) -> Self {
        assert_eq!(m.len(), v.len());
        Self { m, v, beta1, beta2, eps, step_count: 0, initialized: true }
    }

    pub fn is_initialized(&self) -> bool {
        self.initialized
    }

    /// One update: `m <- b1 m + (1-b1) g`, `v <- b2 v + (1-b2) g^2`,
    /// `theta <- theta - lr * m / (sqrt(v) + eps)`. On the first call the
    /// squared average is seeded with `g^2`.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grad.len(), self.m.len());
        if !self.initialized {
            for (v, g) in self.v.iter_mut().zip(grad) {
                *v = g * g;
            }
            self.initialized = true;
        }
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            params[i] -= lr * self.m[i] / (self.v[i].sqrt() + self.eps);
        }
        self.step_count += 1;
    }
}

/// Offline training settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Number of simulated entry trajectories.
    pub n_trajectories: usize,
    /// Trajectory duration (s).
    pub traj_t_end: f64,
    /// Sampling interval for (radius, density) pairs (s).
    pub sample_dt: f64,
    /// RK4 substep (s).
    pub rk4_dt: f64,
    /// Training epochs (one full pass over the shuffled training set each).
    pub epochs: usize,
    /// Mini-batch size.
    pub batch_size: usize,
    /// Learning-rate sweep bounds.
    pub lr_min: f64,
    pub lr_max: f64,
    /// Fraction of epochs spent warming up from lr_min to lr_max.
    pub warmup_frac: f64,
    /// Fraction of trajectories held out for validation.
    pub val_fraction: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            n_trajectories: 1000,
            traj_t_end: 250.0,
            sample_dt: 0.5,
            rk4_dt: 0.05,
            epochs: 1000,
            batch_size: 1024,
            lr_min: 1e-6,
            lr_max: 1e-2,
            warmup_frac: 0.1,
            val_fraction: 0.2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), NetError> {
        if self.n_trajectories == 0 || self.epochs == 0 {
            return Err(NetError::InvalidConfig("need trajectories and epochs".into()));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(NetError::InvalidConfig("val_fraction must be in (0, 1)".into()));
        }
        if self.lr_min <= 0.0 || self.lr_max < self.lr_min {
            return Err(NetError::InvalidConfig("bad learning-rate range".into()));
        }
        if self.sample_dt < self.rk4_dt || self.traj_t_end <= 0.0 {
            return Err(NetError::InvalidConfig("bad time grid".into()));
        }
        if self.batch_size == 0 {
            return Err(NetError::InvalidConfig("batch_size must be at least 1".into()));
        }
        Ok(())
    }

    /// One-cycle schedule: linear warmup to `lr_max`, cosine anneal back.
    fn learning_rate(&self, epoch: usize) -> f64 {
        let warmup = ((self.epochs as f64 * self.warmup_frac).ceil() as usize).max(1);
        if epoch < warmup {
            self.lr_min + (self.lr_max - self.lr_min) * epoch as f64 / warmup as f64
        } else {
            let span = (self.epochs - warmup).max(1) as f64;
            let t = (epoch - warmup) as f64 / span;
            self.lr_min
                + 0.5 * (self.lr_max - self.lr_min) * (1.0 + (std::f64::consts::PI * t).cos())
        }
    }
}

/// Training outcome summary, intended for the training-report JSON.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub n_train_samples: usize,
    pub n_val_samples: usize,
    pub epochs_run: usize,
    /// Final mean squared error on the normalized training targets.
    pub final_train_loss: f64,
    /// Final mean squared error on the normalized validation targets.
    pub final_val_loss: f64,
    /// Fraction of validation samples with relative density error below 1%.
    pub val_sub_1pct_fraction: f64,
    /// Histogram of validation relative density errors: upper bin edges
    /// (fractions) and counts. The final bin is open-ended.
    pub val_error_bin_edges: Vec<f64>,
    pub val_error_bin_counts: Vec<usize>,
}

/// Trained network plus its report.
#[derive(Debug, Clone)]
pub struct TrainedNet {
    pub net: MlpDensityNet,
    pub report: TrainReport,
}

fn mean_and_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    // Guard against constant data; scale 1 keeps the targets untouched.
    (mean, if std > 1e-12 { std } else { 1.0 })
}

/// Fixed chunk size for the deterministic parallel gradient reduction.
const GRAD_CHUNK: usize = 512;

/// Mean squared error loss and gradient over normalized (input, target)
/// pairs. Chunks are mapped in parallel and reduced in order, so the result
/// is independent of thread scheduling.
fn batch_loss_and_grad(params: &[f64], data: &[(f64, f64)]) -> (f64, Vec<f64>) {
    let (w_in, rest) = params.split_at(HIDDEN);
    let (b_in, rest) = rest.split_at(HIDDEN);
    let (w_out, b_out) = rest.split_at(HIDDEN);
    let b_out = b_out[0];

    let blocks: Vec<(f64, Vec<f64>)> = data
        .par_chunks(GRAD_CHUNK)
        .map(|chunk| {
            let mut grad = vec![0.0; N_PARAMS];
            let mut loss = 0.0;
            let mut hidden = [0.0; HIDDEN];
            for &(input, target) in chunk {
                let mut out = b_out;
                for j in 0..HIDDEN {
                    let a = fast_tanh(w_in[j] * input + b_in[j]);
                    hidden[j] = a;
                    out += w_out[j] * a;
                }
                let err = out - target;
                loss += err * err;
                let g_out = 2.0 * err;
                for j in 0..HIDDEN {
                    let a = hidden[j];
                    let delta = g_out * w_out[j] * (1.0 - a * a);
                    grad[j] += delta * input;
                    grad[HIDDEN + j] += delta;
                    grad[2 * HIDDEN + j] += g_out * a;
                }
                grad[3 * HIDDEN] += g_out;
            }
            (loss, grad)
        })
        .collect();

    let n = data.len() as f64;
    let mut grad = vec![0.0; N_PARAMS];
    let mut loss = 0.0;
    for (block_loss, block_grad) in blocks {
        loss += block_loss;
        for (g, bg) in grad.iter_mut().zip(&block_grad) {
            *g += bg;
        }
    }
    for g in &mut grad {
        *g /= n;
    }
    (loss / n, grad)
}

fn batch_loss(params: &[f64], data: &[(f64, f64)]) -> f64 {
    let (w_in, rest) = params.split_at(HIDDEN);
    let (b_in, rest) = rest.split_at(HIDDEN);
    let (w_out, b_out) = rest.split_at(HIDDEN);
    let b_out = b_out[0];
    let loss: f64 = data
        .par_chunks(GRAD_CHUNK)
        .map(|chunk| {
            let mut loss = 0.0;
            for &(input, target) in chunk {
                let mut out = b_out;
                for j in 0..HIDDEN {
                    out += w_out[j] * fast_tanh(w_in[j] * input + b_in[j]);
                }
                let err = out - target;
                loss += err * err;
            }
            loss
        })
        .collect::<Vec<_>>()
        .iter()
        .sum();
    loss / data.len() as f64
}

/// Offline data generation and training.
///
/// Simulates `n_trajectories` entry arcs under the fitted exponential model
/// from dispersed initial conditions, records (radius, density) pairs at the
/// sampling interval, applies the sqrt-log transform and normalization, and
/// trains the network full-batch with Adam under a one-cycle learning-rate
/// sweep. The split is by trajectory; normalization statistics come from the
/// training split only.
pub fn offline_train(
    fit: &ExpModel,
    dispersion: &EntryDispersion,
    vehicle: &VehicleConfig,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainedNet, NetError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Initial conditions are drawn sequentially; propagation parallelizes
    // over trajectories without disturbing determinism.
    let initial_states: Vec<_> = (0..cfg.n_trajectories).map(|_| dispersion.sample(&mut rng)).collect();
    let record_every = (cfg.sample_dt / cfg.rk4_dt).round() as usize;
    let n_steps = (cfg.traj_t_end / cfg.rk4_dt).round() as usize;
    let trajectories: Vec<Result<Vec<(f64, f64)>, NetError>> = initial_states
        .par_iter()
        .map(|s0| {
            let mut samples = Vec::with_capacity(n_steps / record_every + 1);
            let mut s = *s0;
            samples.push((s.r, fit.density(s.r)));
            for step in 1..=n_steps {
                s = rk4_step(&s, cfg.rk4_dt, |r| Ok(fit.density(r)), vehicle)
                    .map_err(NetError::DataGeneration)?;
                if step % record_every == 0 {
                    samples.push((s.r, fit.density(s.r)));
                }
            }
            Ok(samples)
        })
        .collect();

    let n_val_traj = ((cfg.n_trajectories as f64) * cfg.val_fraction).round().max(1.0) as usize;
    let n_train_traj = cfg.n_trajectories - n_val_traj;
    if n_train_traj == 0 {
        return Err(NetError::InvalidConfig("validation split leaves no training data".into()));
    }

    let b_shift = 0.0;
    let mut train_raw: Vec<(f64, f64)> = Vec::new();
    let mut val_raw: Vec<(f64, f64)> = Vec::new();
    for (ti, traj) in trajectories.into_iter().enumerate() {
        let traj = traj?;
        let dst = if ti < n_train_traj { &mut train_raw } else { &mut val_raw };
        dst.extend(traj);
    }
    for (idx, &(_, rho)) in train_raw.iter().chain(val_raw.iter()).enumerate() {
        let order = rho.log10();
        if order.is_nan() || order >= b_shift {
            return Err(NetError::TransformDomain { rho, index: idx });
        }
    }

    let radii: Vec<f64> = train_raw.iter().map(|&(r, _)| r).collect();
    let varrhos: Vec<f64> = train_raw.iter().map(|&(_, rho)| (b_shift - rho.log10()).sqrt()).collect();
    let (r_mean, r_std) = mean_and_std(&radii);
    let (varrho_mean, varrho_std) = mean_and_std(&varrhos);

    let normalize = |raw: &[(f64, f64)]| -> Vec<(f64, f64)> {
        raw.iter()
            .map(|&(r, rho)| {
                let i = (r - r_mean) / r_std;
                let o = ((b_shift - rho.log10()).sqrt() - varrho_mean) / varrho_std;
                (i, o)
            })
            .collect()
    };
    let train: Vec<(f64, f64)> = normalize(&train_raw);
    let val: Vec<(f64, f64)> = normalize(&val_raw);

    // Uniform +-1/sqrt(fan_in) initialization.
    let mut params = vec![0.0; N_PARAMS];
    // w_in and b_in have fan_in 1; the output layer has fan_in HIDDEN.
    for p in params.iter_mut().take(2 * HIDDEN) {
        *p = rng.random_range(-1.0..1.0);
    }
    let bound = 1.0 / (HIDDEN as f64).sqrt();
    for p in params.iter_mut().skip(2 * HIDDEN) {
        *p = rng.random_range(-bound..bound);
    }

    // Mini-batch Adam over a per-epoch shuffled training set. The shuffle is
    // seeded, and each batch gradient reduces its parallel chunks in order,
    // so training is bitwise reproducible.
    let mut adam = AdamState::new(N_PARAMS, cfg.beta1, cfg.beta2, cfg.eps);
    let mut train = train;
    let mut train_loss = f64::NAN;
    for epoch in 0..cfg.epochs {
        use rand::seq::SliceRandom;
        train.shuffle(&mut rng);
        let lr = cfg.learning_rate(epoch);
        let mut epoch_loss = 0.0;
        for batch in train.chunks(cfg.batch_size) {
            let (loss, grad) = batch_loss_and_grad(&params, batch);
            if !loss.is_finite() {
                return Err(NetError::TrainingDiverged { epoch, loss });
            }
            adam.step(&mut params, &grad, lr);
            epoch_loss += loss * batch.len() as f64;
        }
        train_loss = epoch_loss / train.len() as f64;
    }

    let mut net = MlpDensityNet {
        format: 1,
        w_in: vec![0.0; HIDDEN],
        b_in: vec![0.0; HIDDEN],
        w_out: vec![0.0; HIDDEN],
        b_out: 0.0,
        r_mean,
        r_std,
        varrho_mean,
        varrho_std,
        b_shift,
    };
    net.set_params(&params);

    let val_loss = batch_loss(&params, &val);
    let bin_edges = vec![0.001, 0.0025, 0.005, 0.01, 0.02, 0.05, 0.10];
    let mut bin_counts = vec![0usize; bin_edges.len() + 1];
    let mut sub_1pct = 0usize;
    for &(r, rho_true) in &val_raw {
        let rel = ((net.density(r) - rho_true) / rho_true).abs();
        if rel < 0.01 {
            sub_1pct += 1;
        }
        let bin = bin_edges.iter().position(|&e| rel < e).unwrap_or(bin_edges.len());
        bin_counts[bin] += 1;
    }

    let report = TrainReport {
        n_train_samples: train.len(),
        n_val_samples: val.len(),
        epochs_run: cfg.epochs,
        final_train_loss: train_loss,
        final_val_loss: val_loss,
        val_sub_1pct_fraction: sub_1pct as f64 / val_raw.len().max(1) as f64,
        val_error_bin_edges: bin_edges,
        val_error_bin_counts: bin_counts,
    };
    Ok(TrainedNet { net, report })
}
