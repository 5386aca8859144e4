//! The three adaptive entry navigation filters and their shared machinery.

pub mod sigma;
pub mod ukf_ac;
pub mod ukf_cm;
pub mod uskf_nn;

pub use sigma::{sigma_points, SigmaPoints, UtConfig};
pub use ukf_ac::{AcConfig, UkfAc};
pub use ukf_cm::{estimate_q_matching, estimate_r_matching, sanitize_q, CmConfig, CmSample, UkfCm};
pub use uskf_nn::{ConsiderFilterState, EcrvConfig, MloConfig, UskfNn};

use crate::dynamics::{DynamicsError, EntryState, VehicleConfig};
use crate::sensors::{Measurement, NoiseSpec};
use nalgebra::{DMatrix, DVector};

#[derive(Debug, thiserror::Error)]
pub enum FilterError {
    #[error("covariance not positive semi-definite (after jitter retry)")]
    CovarianceNotPsd,
    #[error("innovation covariance is singular")]
    SingularInnovation,
    #[error("dynamics failed inside sigma propagation: {0}")]
    Dynamics(#[from] DynamicsError),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

/// Everything a filter needs per measurement epoch beyond its own state.
#[derive(Debug, Clone, Copy)]
pub struct StepContext {
    /// Interval between measurement epochs (s).
    pub dt: f64,
    /// Internal RK4 substeps per interval.
    pub substeps: usize,
    pub vehicle: VehicleConfig,
    pub noise: NoiseSpec,
}

impl StepContext {
    pub fn substep_dt(&self) -> f64 {
        self.dt / self.substeps as f64
    }
}

/// Per-epoch diagnostics shared by all filters; the MLO fields stay zero for
/// the filters that do not adapt a network.
#[derive(Debug, Clone, Copy)]
pub struct FilterStepLog {
    /// Density implied by the filter's model at the posterior radius.
    pub rho_hat: f64,
    pub loss_pre: f64,
    pub loss_post: f64,
    pub mlo_iters: u32,
    /// Measurement update skipped (singular innovation covariance).
    pub update_skipped: bool,
    /// Sigma-point generation needed a jitter retry this epoch.
    pub jittered: bool,
}

/// Common interface the Monte Carlo harness drives.
pub trait EntryFilter {
    fn name(&self) -> &'static str;
    fn step(&mut self, y: &Measurement, ctx: &StepContext) -> Result<FilterStepLog, FilterError>;
    fn estimate(&self) -> EntryState;
    /// Square roots of the state covariance diagonal.
    fn sigma_diag(&self) -> [f64; 8];
    /// Density implied by the filter's current model at its estimated radius.
    fn density_estimate(&self) -> f64;
}

pub(crate) fn state_to_vector(s: &EntryState) -> DVector<f64> {
    DVector::from_row_slice(&s.to_array())
}

pub(crate) fn vector_to_state(v: &DVector<f64>) -> EntryState {
    let mut a = [0.0; 8];
    a.copy_from_slice(&v.as_slice()[..8]);
    EntryState::from_array(a)
}

pub(crate) fn sigma_diag_from_cov(p: &DMatrix<f64>) -> [f64; 8] {
    let mut out = [0.0; 8];
    for (i, o) in out.iter_mut().enumerate() {
        *o = p[(i, i)].max(0.0).sqrt();
    }
    out
}
