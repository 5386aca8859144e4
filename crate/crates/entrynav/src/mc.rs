//! Monte Carlo harness: dispersed initial conditions, per-run surrogate
//! atmospheres and truth trajectories, identical measurement streams feeding
//! every enabled filter, and the RMSE / RMSPE / coverage metrics.

use crate::atmos::{sample_truth_atmosphere, AtmosError, AtmosGenConfig, ExpModel, TabulatedProfile};
use crate::dynamics::{
    propagate_truth, DynamicsError, EntryDispersion, EntryState, ProcessNoiseStd, VehicleConfig,
};
use crate::filters::{
    AcConfig, CmConfig, EcrvConfig, EntryFilter, MloConfig, StepContext, UkfAc, UkfCm, UskfNn,
    UtConfig,
};
use crate::net::{MlpDensityNet, NetError};
use crate::sensors::{measure_noisy, Measurement, NoiseSpec};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;

/// Offset separating per-run testing atmosphere seeds from the training
/// profile seeds (`seed + i` for profile `i`), keeping the ranges disjoint.
pub const TEST_ATMOS_SEED_OFFSET: u64 = 1_000_000;

pub const STATE_NAMES: [&str; 8] = ["r", "phi", "theta", "v", "gamma", "psi", "B", "LoD"];

#[derive(Debug, thiserror::Error)]
pub enum McError {
    #[error("atmosphere generation failed: {0}")]
    Atmos(#[from] AtmosError),
    #[error("truth propagation failed: {0}")]
    Dynamics(#[from] DynamicsError),
    #[error("network unavailable: {0}")]
    Net(#[from] NetError),
    #[error("invalid Monte Carlo config: {0}")]
    InvalidConfig(String),
    #[error("trace length mismatch: {0}")]
    LengthMismatch(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Entry conditions: per-state mean and 3-sigma, in the units the mission
/// tables use (meters, degrees, m/s, m^2/kg).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EntryConditions {
    pub r_m: (f64, f64),
    pub phi_deg: (f64, f64),
    pub theta_deg: (f64, f64),
    pub v_ms: (f64, f64),
    pub gamma_deg: (f64, f64),
    pub psi_deg: (f64, f64),
    pub b_m2kg: (f64, f64),
    pub lod: (f64, f64),
}

impl Default for EntryConditions {
    fn default() -> Self {
        Self {
            r_m: (3.5222e6, 3.2066e1),
            phi_deg: (-3.919, 7.81e-4),
            theta_deg: (126.72, 3.67e-4),
            v_ms: (6.0833e3, 2.6059e-2),
            gamma_deg: (-15.489, 4.0e-4),
            psi_deg: (93.206, 2.68e-4),
            b_m2kg: (7.1e-3, 4.8e-3),
            lod: (2.4e-1, 1.5178e-1),
        }
    }
}

impl EntryConditions {
    /// Mean state and 1-sigma dispersion in SI units and radians.
    pub fn dispersion(&self) -> EntryDispersion {
        let mean = EntryState {
            r: self.r_m.0,
            phi: self.phi_deg.0.to_radians(),
            theta: self.theta_deg.0.to_radians(),
            v: self.v_ms.0,
            gamma: self.gamma_deg.0.to_radians(),
            psi: self.psi_deg.0.to_radians(),
            b: self.b_m2kg.0,
            lod: self.lod.0,
        };
        let sigma = [
            self.r_m.1 / 3.0,
            (self.phi_deg.1 / 3.0).to_radians(),
            (self.theta_deg.1 / 3.0).to_radians(),
            self.v_ms.1 / 3.0,
            (self.gamma_deg.1 / 3.0).to_radians(),
            (self.psi_deg.1 / 3.0).to_radians(),
            self.b_m2kg.1 / 3.0,
            self.lod.1 / 3.0,
        ];
        EntryDispersion { mean, sigma }
    }
}

/// Process noise 3-sigma per sensor interval (table units).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProcessNoiseTable {
    pub v_ms: f64,
    pub gamma_deg: f64,
    pub psi_deg: f64,
    pub b_m2kg: f64,
    pub lod: f64,
}

impl Default for ProcessNoiseTable {
    fn default() -> Self {
        Self { v_ms: 3e-1, gamma_deg: 2e-3, psi_deg: 2e-4, b_m2kg: 1e-5, lod: 3e-5 }
    }
}

impl ProcessNoiseTable {
    pub fn one_sigma(&self) -> ProcessNoiseStd {
        ProcessNoiseStd {
            v: self.v_ms / 3.0,
            gamma: (self.gamma_deg / 3.0).to_radians(),
            psi: (self.psi_deg / 3.0).to_radians(),
            b: self.b_m2kg / 3.0,
            lod: self.lod / 3.0,
        }
    }
}

/// Measurement noise 3-sigma: accelerometer in micro-g, the rest as percent
/// of reading.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeasNoiseTable {
    pub accel_ug: f64,
    pub q_pct: f64,
    pub qdot_pct: f64,
}

impl Default for MeasNoiseTable {
    fn default() -> Self {
        Self { accel_ug: 3e2, q_pct: 1.0, qdot_pct: 1.0 }
    }
}

impl MeasNoiseTable {
    pub fn noise_spec(&self) -> NoiseSpec {
        NoiseSpec::from_three_sigma(self.accel_ug, self.q_pct, self.qdot_pct)
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterToggles {
    pub ukf_cm: bool,
    pub ukf_ac: bool,
    pub uskf_nn: bool,
}

impl Default for FilterToggles {
    fn default() -> Self {
        Self { ukf_cm: true, ukf_ac: true, uskf_nn: true }
    }
}

/// Full Monte Carlo configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McConfig {
    pub n_runs: usize,
    /// Flight duration (s).
    pub t_end_s: f64,
    pub sensor_hz: f64,
    /// Master seed; every stream derives from it.
    pub seed: u64,
    /// Truth integrator step (s).
    pub truth_dt_s: f64,
    /// Filter RK4 substeps per sensor interval.
    pub filter_substeps: usize,
    pub entry: EntryConditions,
    pub process_noise: ProcessNoiseTable,
    pub measurement_noise: MeasNoiseTable,
    pub mu_m3s2: f64,
    pub bank_deg: f64,
    pub alpha_att_deg: f64,
    pub nose_radius_m: f64,
    pub atmos: AtmosGenConfig,
    pub filters: FilterToggles,
    pub ut_alpha: f64,
    pub ut_beta: f64,
    pub mlo: MloConfig,
    pub ecrv: EcrvConfig,
    pub ac: AcConfig,
    pub cm: CmConfig,
}

impl Default for McConfig {
    fn default() -> Self {
        Self {
            n_runs: 100,
            t_end_s: 350.0,
            sensor_hz: 4.0,
            seed: 1,
            truth_dt_s: 0.05,
            filter_substeps: 5,
            entry: EntryConditions::default(),
            process_noise: ProcessNoiseTable::default(),
            measurement_noise: MeasNoiseTable::default(),
            mu_m3s2: 4.282837e13,
            bank_deg: 0.0,
            alpha_att_deg: -17.0,
            nose_radius_m: 1.125,
            atmos: AtmosGenConfig::default(),
            filters: FilterToggles::default(),
            ut_alpha: 1.0,
            ut_beta: 2.0,
            mlo: MloConfig::default(),
            ecrv: EcrvConfig::default(),
            ac: AcConfig::default(),
            cm: CmConfig::default(),
        }
    }
}

impl McConfig {
    pub fn validate(&self) -> Result<(), McError> {
        if self.n_runs == 0 {
            return Err(McError::InvalidConfig("n_runs must be at least 1".into()));
        }
        if self.sensor_hz <= 0.0 || self.t_end_s <= 0.0 || self.truth_dt_s <= 0.0 {
            return Err(McError::InvalidConfig("time grid values must be positive".into()));
        }
        if self.filter_substeps == 0 {
            return Err(McError::InvalidConfig("filter_substeps must be at least 1".into()));
        }
        let sensor_dt = self.sensor_dt();
        let ratio = sensor_dt / self.truth_dt_s;
        if (ratio - ratio.round()).abs() > 1e-9 {
            return Err(McError::InvalidConfig(format!(
                "sensor interval {sensor_dt} must be a multiple of truth_dt {}",
                self.truth_dt_s
            )));
        }
        self.atmos.validate()?;
        Ok(())
    }

    pub fn sensor_dt(&self) -> f64 {
        1.0 / self.sensor_hz
    }

    pub fn n_epochs(&self) -> usize {
        (self.t_end_s * self.sensor_hz).round() as usize
    }

    pub fn vehicle(&self) -> VehicleConfig {
        VehicleConfig {
            mu: self.mu_m3s2,
            sigma_bank: self.bank_deg.to_radians(),
            alpha_att: self.alpha_att_deg.to_radians(),
            nose_radius: self.nose_radius_m,
        }
    }

    pub fn step_context(&self) -> StepContext {
        StepContext {
            dt: self.sensor_dt(),
            substeps: self.filter_substeps,
            vehicle: self.vehicle(),
            noise: self.measurement_noise.noise_spec(),
        }
    }

    pub fn ut_for(&self, dim: usize) -> UtConfig {
        UtConfig { alpha: self.ut_alpha, beta: self.ut_beta, kappa: 3.0 - dim as f64, dim }
    }

    /// Per-epoch process noise variance diagonal assumed by the filters.
    pub fn q_diag(&self) -> [f64; 8] {
        self.process_noise.one_sigma().variance_diagonal()
    }

    /// Atmosphere seed for testing run `run_idx`, disjoint from training.
    pub fn test_atmos_seed(&self, run_idx: u64) -> u64 {
        self.seed.wrapping_add(TEST_ATMOS_SEED_OFFSET).wrapping_add(run_idx)
    }

    /// Training profile seed for profile `i`.
    pub fn train_atmos_seed(&self, i: u64) -> u64 {
        self.seed.wrapping_add(i)
    }
}

/// Trained artifacts the Monte Carlo consumes.
#[derive(Debug, Clone)]
pub struct RunAssets {
    /// Least-squares exponential fit to the training profiles.
    pub fit: ExpModel,
    /// Offline-trained density network (required when USKF-NN is enabled).
    pub net: Option<MlpDensityNet>,
}

/// Truth initial state, filter initial estimate, and the filter's initial
/// covariance diagonal.
pub fn sample_initial_state<R: rand::Rng>(
    cfg: &McConfig,
    rng: &mut R,
) -> (EntryState, EntryState, [f64; 8]) {
    let disp = cfg.entry.dispersion();
    let truth0 = disp.sample(rng);
    let filter_disp = EntryDispersion { mean: truth0, sigma: disp.sigma };
    let filter0 = filter_disp.sample(rng);
    (truth0, filter0, disp.variance_diagonal())
}

/// One filter's per-epoch traces over a run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FilterTrace {
    pub name: String,
    /// Posterior estimates, one per epoch.
    pub estimates: Vec<[f64; 8]>,
    /// Posterior sigma (sqrt covariance diagonal), one per epoch.
    pub sigmas: Vec<[f64; 8]>,
    /// Posterior density estimate at the estimated radius.
    pub rho_hat: Vec<f64>,
    pub loss_pre: Vec<f64>,
    pub loss_post: Vec<f64>,
    pub mlo_iters: Vec<u32>,
    /// Failure message if the filter died mid-run; traces stop there.
    pub failed: Option<String>,
}

/// One Monte Carlo run: truth, measurements, and every enabled filter's
/// traces on the shared measurement stream.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunResult {
    pub run_idx: u64,
    /// Epoch times (s), length `n_epochs`.
    pub t: Vec<f64>,
    /// Truth state per measurement epoch.
    pub truth: Vec<[f64; 8]>,
    /// True density at the truth state per epoch.
    pub rho_true: Vec<f64>,
    pub traces: Vec<FilterTrace>,
    pub measurements: Vec<Measurement>,
}

impl RunResult {
    pub fn trace(&self, name: &str) -> Option<&FilterTrace> {
        self.traces.iter().find(|t| t.name == name)
    }
}

/// Execute one run against an explicit atmosphere profile and initial
/// conditions (the deterministic core of [`run_case`]).
#[allow(clippy::too_many_arguments)]
pub fn execute_run(
    cfg: &McConfig,
    assets: &RunAssets,
    profile: &TabulatedProfile,
    truth0: EntryState,
    filter0: EntryState,
    p0_diag: [f64; 8],
    truth_seed: u64,
    meas_seed: u64,
    run_idx: u64,
) -> Result<RunResult, McError> {
    let ctx = cfg.step_context();
    let n_epochs = cfg.n_epochs();
    let truth_series = propagate_truth(
        &truth0,
        profile,
        &ctx.vehicle,
        cfg.truth_dt_s,
        cfg.sensor_dt(),
        cfg.t_end_s,
        &cfg.process_noise.one_sigma(),
        truth_seed,
    )?;

    let mut meas_rng = ChaCha8Rng::seed_from_u64(meas_seed);
    let measurements: Vec<Measurement> = truth_series[1..]
        .iter()
        .map(|s| measure_noisy(&s.state, s.rho, &ctx.vehicle, &ctx.noise, &mut meas_rng))
        .collect();

    let q_diag = cfg.q_diag();
    let mut filters: Vec<Box<dyn EntryFilter>> = Vec::new();
    if cfg.filters.ukf_cm {
        let mut f = UkfCm::new(filter0, p0_diag, q_diag, assets.fit, cfg.cm);
        f.ut = cfg.ut_for(8);
        filters.push(Box::new(f));
    }
    if cfg.filters.ukf_ac {
        let rho_true0 = profile.density(truth0.r)?;
        let factor0 = rho_true0 / assets.fit.density(truth0.r);
        let mut f = UkfAc::new(filter0, p0_diag, q_diag, assets.fit, factor0, cfg.ac);
        f.ut = cfg.ut_for(9);
        filters.push(Box::new(f));
    }
    if cfg.filters.uskf_nn {
        let net = assets.net.clone().ok_or_else(|| {
            McError::InvalidConfig("USKF-NN enabled without a trained network".into())
        })?;
        let mut f = UskfNn::new(filter0, p0_diag, q_diag, net, cfg.ecrv, cfg.mlo);
        f.ut = cfg.ut_for(9);
        filters.push(Box::new(f));
    }

    let mut traces: Vec<FilterTrace> = filters
        .iter()
        .map(|f| FilterTrace {
            name: f.name().to_string(),
            estimates: Vec::with_capacity(n_epochs),
            sigmas: Vec::with_capacity(n_epochs),
            rho_hat: Vec::with_capacity(n_epochs),
            loss_pre: Vec::with_capacity(n_epochs),
            loss_post: Vec::with_capacity(n_epochs),
            mlo_iters: Vec::with_capacity(n_epochs),
            failed: None,
        })
        .collect();

    for (k, y) in measurements.iter().enumerate() {
        for (f, trace) in filters.iter_mut().zip(&mut traces) {
            if trace.failed.is_some() {
                continue;
            }
            match f.step(y, &ctx) {
                Ok(log) => {
                    trace.estimates.push(f.estimate().to_array());
                    trace.sigmas.push(f.sigma_diag());
                    trace.rho_hat.push(log.rho_hat);
                    trace.loss_pre.push(log.loss_pre);
                    trace.loss_post.push(log.loss_post);
                    trace.mlo_iters.push(log.mlo_iters);
                }
                Err(e) => {
                    trace.failed = Some(format!("epoch {}: {e}", k + 1));
                }
            }
        }
    }

    Ok(RunResult {
        run_idx,
        t: truth_series[1..].iter().map(|s| s.t).collect(),
        truth: truth_series[1..].iter().map(|s| s.state.to_array()).collect(),
        rho_true: truth_series[1..].iter().map(|s| s.rho).collect(),
        traces,
        measurements,
    })
}

/// One Monte Carlo case: a fresh surrogate atmosphere (seed disjoint from the
/// training range), dispersed truth and filter initial states, and one noisy
/// measurement stream consumed by every enabled filter. Deterministic in
/// `(cfg, run_idx)`.
pub fn run_case(cfg: &McConfig, assets: &RunAssets, run_idx: u64) -> Result<RunResult, McError> {
    cfg.validate()?;
    let profile = sample_truth_atmosphere(cfg.test_atmos_seed(run_idx), &cfg.atmos)?;
    let mut seed_rng =
        ChaCha8Rng::seed_from_u64(cfg.seed ^ run_idx.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let init_seed = seed_rng.next_u64();
    let truth_seed = seed_rng.next_u64();
    let meas_seed = seed_rng.next_u64();

    let mut init_rng = ChaCha8Rng::seed_from_u64(init_seed);
    let (truth0, filter0, p0_diag) = sample_initial_state(cfg, &mut init_rng);
    execute_run(cfg, assets, &profile, truth0, filter0, p0_diag, truth_seed, meas_seed, run_idx)
}

/// Per-state error series: inner Monte Carlo mean of absolute error per
/// epoch, outer time average.
pub struct RmseResult {
    pub series: Vec<[f64; 8]>,
    pub time_avg: [f64; 8],
}

pub fn compute_rmse(
    truths: &[&[[f64; 8]]],
    estimates: &[&[[f64; 8]]],
) -> Result<RmseResult, McError> {
    if truths.len() != estimates.len() || truths.is_empty() {
        return Err(McError::LengthMismatch(format!(
            "{} truth runs vs {} estimate runs",
            truths.len(),
            estimates.len()
        )));
    }
    let n_epochs = truths[0].len();
    for (t, e) in truths.iter().zip(estimates) {
        if t.len() != n_epochs || e.len() != n_epochs {
            return Err(McError::LengthMismatch(format!(
                "epoch counts differ: {} vs {} (expected {n_epochs})",
                t.len(),
                e.len()
            )));
        }
    }
    let n_runs = truths.len() as f64;
    let mut series = vec![[0.0; 8]; n_epochs];
    for (t_run, e_run) in truths.iter().zip(estimates) {
        for (k, (t, e)) in t_run.iter().zip(e_run.iter()).enumerate() {
            for i in 0..8 {
                // sqrt of a single squared term: the absolute error.
                series[k][i] += (t[i] - e[i]).abs() / n_runs;
            }
        }
    }
    let mut time_avg = [0.0; 8];
    for row in &series {
        for i in 0..8 {
            time_avg[i] += row[i] / n_epochs as f64;
        }
    }
    Ok(RmseResult { series, time_avg })
}

pub struct RmspeResult {
    pub series: Vec<f64>,
    pub time_avg: f64,
}

/// Density RMSPE in percent: mean absolute relative error across runs per
/// epoch, time-averaged.
pub fn compute_rmspe(rho_true: &[&[f64]], rho_hat: &[&[f64]]) -> Result<RmspeResult, McError> {
    if rho_true.len() != rho_hat.len() || rho_true.is_empty() {
        return Err(McError::LengthMismatch(format!(
            "{} truth runs vs {} estimate runs",
            rho_true.len(),
            rho_hat.len()
        )));
    }
    let n_epochs = rho_true[0].len();
    let n_runs = rho_true.len() as f64;
    let mut series = vec![0.0; n_epochs];
    for (t_run, h_run) in rho_true.iter().zip(rho_hat) {
        if t_run.len() != n_epochs || h_run.len() != n_epochs {
            return Err(McError::LengthMismatch("epoch counts differ".into()));
        }
        for (k, (rho, hat)) in t_run.iter().zip(h_run.iter()).enumerate() {
            if rho.is_nan() || *rho <= 0.0 {
                return Err(McError::InvalidConfig(format!(
                    "non-positive true density {rho} at epoch {k}"
                )));
            }
            series[k] += ((rho - hat) / rho).abs() * 100.0 / n_runs;
        }
    }
    let time_avg = series.iter().sum::<f64>() / n_epochs as f64;
    Ok(RmspeResult { series, time_avg })
}

/// Fraction of (run, epoch) samples with |error| within 3 filter sigmas,
/// per state.
pub fn coverage_3sigma(
    truths: &[&[[f64; 8]]],
    estimates: &[&[[f64; 8]]],
    sigmas: &[&[[f64; 8]]],
) -> Result<[f64; 8], McError> {
    if truths.len() != estimates.len() || truths.len() != sigmas.len() || truths.is_empty() {
        return Err(McError::LengthMismatch("run counts differ".into()));
    }
    let mut hits = [0u64; 8];
    let mut total = 0u64;
    for ((t_run, e_run), s_run) in truths.iter().zip(estimates).zip(sigmas) {
        if t_run.len() != e_run.len() || t_run.len() != s_run.len() {
            return Err(McError::LengthMismatch("epoch counts differ".into()));
        }
        for ((t, e), s) in t_run.iter().zip(e_run.iter()).zip(s_run.iter()) {
            total += 1;
            for i in 0..8 {
                if (t[i] - e[i]).abs() <= 3.0 * s[i] {
                    hits[i] += 1;
                }
            }
        }
    }
    let mut out = [0.0; 8];
    for i in 0..8 {
        out[i] = hits[i] as f64 / total as f64;
    }
    Ok(out)
}

/// Aggregated metrics for one filter across the batch.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FilterReport {
    pub name: String,
    pub completed_runs: usize,
    pub failed_runs: usize,
    pub rmse_time_avg: [f64; 8],
    pub rmspe_pct: f64,
    pub coverage_3sigma: [f64; 8],
}

/// Batch summary, serialized as the summary JSON. Filters are ordered by
/// density RMSPE, best first.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct McReport {
    pub format: u32,
    pub seed: u64,
    pub n_runs: usize,
    pub n_epochs: usize,
    pub t_end_s: f64,
    pub sensor_hz: f64,
    /// Runs that failed at the harness level (atmosphere or truth
    /// propagation), with their error messages.
    pub failed_runs: Vec<(u64, String)>,
    pub filters: Vec<FilterReport>,
}

impl McReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serialization");
        s.push('\n');
        s
    }

    pub fn filter(&self, name: &str) -> Option<&FilterReport> {
        self.filters.iter().find(|f| f.name == name)
    }
}

/// Per-epoch RMSE series for each filter, for the series CSV.
#[derive(Debug, Clone)]
pub struct McSeries {
    pub t: Vec<f64>,
    /// (filter name, per-epoch per-state series).
    pub rmse: Vec<(String, Vec<[f64; 8]>)>,
}

/// Outcome of a full Monte Carlo batch.
pub struct McOutcome {
    pub report: McReport,
    pub series: McSeries,
    pub runs: Vec<RunResult>,
}

/// Run the full batch in parallel. Per-run randomness is seeded
/// independently, and the reduction walks runs in order, so the outcome does
/// not depend on thread scheduling. Harness-level run failures are recorded
/// and excluded from the metrics rather than aborting the batch.
pub fn run_montecarlo(cfg: &McConfig, assets: &RunAssets) -> Result<McOutcome, McError> {
    cfg.validate()?;
    if cfg.filters.uskf_nn && assets.net.is_none() {
        return Err(McError::InvalidConfig("USKF-NN enabled without a trained network".into()));
    }
    let attempts: Vec<(u64, Result<RunResult, McError>)> = (0..cfg.n_runs as u64)
        .into_par_iter()
        .map(|idx| (idx, run_case(cfg, assets, idx)))
        .collect();
    let mut runs: Vec<RunResult> = Vec::new();
    let mut failed_runs: Vec<(u64, String)> = Vec::new();
    for (idx, attempt) in attempts {
        match attempt {
            Ok(run) => runs.push(run),
            Err(e) => failed_runs.push((idx, e.to_string())),
        }
    }

    let names: Vec<String> = runs
        .first()
        .map(|r| r.traces.iter().map(|t| t.name.clone()).collect())
        .unwrap_or_default();

    let mut filter_reports = Vec::new();
    let mut rmse_series = Vec::new();
    for name in &names {
        let mut truths: Vec<&[[f64; 8]]> = Vec::new();
        let mut estimates: Vec<&[[f64; 8]]> = Vec::new();
        let mut sigmas: Vec<&[[f64; 8]]> = Vec::new();
        let mut rho_true: Vec<&[f64]> = Vec::new();
        let mut rho_hat: Vec<&[f64]> = Vec::new();
        let mut failed = 0usize;
        for run in &runs {
            let trace = run.trace(name).expect("trace present in every run");
            if trace.failed.is_some() {
                failed += 1;
                continue;
            }
            truths.push(&run.truth);
            estimates.push(&trace.estimates);
            sigmas.push(&trace.sigmas);
            rho_true.push(&run.rho_true);
            rho_hat.push(&trace.rho_hat);
        }
        if truths.is_empty() {
            filter_reports.push(FilterReport {
                name: name.clone(),
                completed_runs: 0,
                failed_runs: failed,
                rmse_time_avg: [f64::NAN; 8],
                rmspe_pct: f64::NAN,
                coverage_3sigma: [f64::NAN; 8],
            });
            rmse_series.push((name.clone(), Vec::new()));
            continue;
        }
        let rmse = compute_rmse(&truths, &estimates)?;
        let rmspe = compute_rmspe(&rho_true, &rho_hat)?;
        let coverage = coverage_3sigma(&truths, &estimates, &sigmas)?;
        filter_reports.push(FilterReport {
            name: name.clone(),
            completed_runs: truths.len(),
            failed_runs: failed,
            rmse_time_avg: rmse.time_avg,
            rmspe_pct: rmspe.time_avg,
            coverage_3sigma: coverage,
        });
        rmse_series.push((name.clone(), rmse.series));
    }

    // Best density tracker first; ties and NaNs sink to the end.
    filter_reports.sort_by(|a, b| {
        a.rmspe_pct.partial_cmp(&b.rmspe_pct).unwrap_or(std::cmp::Ordering::Greater)
    });
    let order: Vec<usize> = filter_reports
        .iter()
        .map(|f| rmse_series.iter().position(|(n, _)| *n == f.name).unwrap())
        .collect();
    rmse_series = order.into_iter().map(|i| rmse_series[i].clone()).collect();

    let t = runs.first().map(|r| r.t.clone()).unwrap_or_default();
    Ok(McOutcome {
        report: McReport {
            format: 1,
            seed: cfg.seed,
            n_runs: cfg.n_runs,
            n_epochs: cfg.n_epochs(),
            t_end_s: cfg.t_end_s,
            sensor_hz: cfg.sensor_hz,
            failed_runs,
            filters: filter_reports,
        },
        series: McSeries { t, rmse: rmse_series },
        runs,
    })
}

/// CSV: `t_s,state,ukf_cm,ukf_ac,uskf_nn`; absent filters leave empty cells.
pub fn write_rmse_series_csv<W: Write>(out: &mut W, series: &McSeries) -> std::io::Result<()> {
    writeln!(out, "t_s,state,ukf_cm,ukf_ac,uskf_nn")?;
    let col = |name: &str, k: usize, i: usize| -> String {
        series
            .rmse
            .iter()
            .find(|(n, _)| n == name)
            .and_then(|(_, s)| s.get(k))
            .map(|row| row[i].to_string())
            .unwrap_or_default()
    };
    for (k, t) in series.t.iter().enumerate() {
        for (i, state) in STATE_NAMES.iter().enumerate() {
            writeln!(
                out,
                "{},{},{},{},{}",
                t,
                state,
                col("ukf_cm", k, i),
                col("ukf_ac", k, i),
                col("uskf_nn", k, i)
            )?;
        }
    }
    Ok(())
}

/// CSV: `run,t_s,rho_true,rho_hat_ac,rho_hat_nn`.
pub fn write_density_csv<W: Write>(out: &mut W, runs: &[RunResult]) -> std::io::Result<()> {
    writeln!(out, "run,t_s,rho_true,rho_hat_ac,rho_hat_nn")?;
    for run in runs {
        let ac = run.trace("ukf_ac");
        let nn = run.trace("uskf_nn");
        let cell = |trace: Option<&FilterTrace>, k: usize| -> String {
            trace.and_then(|t| t.rho_hat.get(k)).map(|v| v.to_string()).unwrap_or_default()
        };
        for (k, t) in run.t.iter().enumerate() {
            writeln!(
                out,
                "{},{},{},{},{}",
                run.run_idx,
                t,
                run.rho_true[k],
                cell(ac, k),
                cell(nn, k)
            )?;
        }
    }
    Ok(())
}

/// CSV for one filter's run log: estimate, sigma diagonal, densities, and
/// adaptation diagnostics per epoch.
pub fn write_filter_log_csv<W: Write>(
    out: &mut W,
    run: &RunResult,
    trace: &FilterTrace,
) -> std::io::Result<()> {
    write!(out, "t_s")?;
    for s in STATE_NAMES {
        write!(out, ",{s}")?;
    }
    for s in STATE_NAMES {
        write!(out, ",sig_{s}")?;
    }
    writeln!(out, ",rho_hat,rho_true,loss_pre,loss_post,mlo_iters")?;
    for k in 0..trace.estimates.len() {
        write!(out, "{}", run.t[k])?;
        for v in trace.estimates[k] {
            write!(out, ",{v}")?;
        }
        for v in trace.sigmas[k] {
            write!(out, ",{v}")?;
        }
        writeln!(
            out,
            ",{},{},{},{},{}",
            trace.rho_hat[k],
            run.rho_true[k],
            trace.loss_pre[k],
            trace.loss_post[k],
            trace.mlo_iters[k]
        )?;
    }
    Ok(())
}
