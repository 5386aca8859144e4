//! UKF with state augmentation and correction (UKF-AC).
//!
//! The eight-component entry state is augmented with a multiplicative
//! correction factor on a nominal exponential density profile. The factor is
//! a random walk estimated by a standard unscented filter — no consider
//! analysis — so the density adaptation is linear in the measurement.

use super::sigma::{unscented_propagate, unscented_update, UtConfig};
use super::{
    sigma_diag_from_cov, state_to_vector, vector_to_state, EntryFilter, FilterError,
    FilterStepLog, StepContext,
};
use crate::atmos::ExpModel;
use crate::dynamics::{rk4_step, EntryState};
use crate::sensors::{build_r, measure_ideal, Measurement};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

const NX: usize = EntryState::DIM;
const NAUG: usize = NX + 1;

/// Correction-factor tuning.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AcConfig {
    /// Per-step process noise variance of the correction factor.
    pub q_factor: f64,
    /// Initial variance of the correction factor.
    pub p_factor0: f64,
}

impl Default for AcConfig {
    fn default() -> Self {
        Self { q_factor: 1e-7, p_factor0: 1e-10 }
    }
}

/// The UKF-AC filter: nominal exponential model plus correction factor.
pub struct UkfAc {
    /// Augmented estimate [x; K].
    x_aug: DVector<f64>,
    /// Augmented covariance (9x9).
    p_aug: DMatrix<f64>,
    pub nominal: ExpModel,
    pub ut: UtConfig,
    /// Augmented per-epoch process noise (9x9).
    q_aug: DMatrix<f64>,
    pub jitter_events: u32,
    pub skipped_updates: u32,
}

impl UkfAc {
    /// `factor0` is the initial correction factor, conventionally the ratio
    /// of true to nominal density at the entry radius.
    pub fn new(
        x0: EntryState,
        p0_diag: [f64; 8],
        q_diag: [f64; 8],
        nominal: ExpModel,
        factor0: f64,
        cfg: AcConfig,
    ) -> Self {
        let mut x_aug = DVector::zeros(NAUG);
        x_aug.rows_mut(0, NX).copy_from(&state_to_vector(&x0));
        x_aug[NX] = factor0;

        let mut p_aug = DMatrix::zeros(NAUG, NAUG);
        for (i, v) in p0_diag.iter().enumerate() {
            p_aug[(i, i)] = *v;
        }
        p_aug[(NX, NX)] = cfg.p_factor0;

        let mut q_aug = DMatrix::zeros(NAUG, NAUG);
        for (i, v) in q_diag.iter().enumerate() {
            q_aug[(i, i)] = *v;
        }
        q_aug[(NX, NX)] = cfg.q_factor;

        Self {
            x_aug,
            p_aug,
            nominal,
            ut: UtConfig::standard(NAUG),
            q_aug,
            jitter_events: 0,
            skipped_updates: 0,
        }
    }

    pub fn correction_factor(&self) -> f64 {
        self.x_aug[NX]
    }

    pub fn factor_variance(&self) -> f64 {
        self.p_aug[(NX, NX)]
    }
}

impl EntryFilter for UkfAc {
    fn name(&self) -> &'static str {
        "ukf_ac"
    }

    fn step(&mut self, y: &Measurement, ctx: &StepContext) -> Result<FilterStepLog, FilterError> {
        let nominal = self.nominal;
        let sub_dt = ctx.substep_dt();
        let substeps = ctx.substeps;
        let vehicle = ctx.vehicle;

        let prop = unscented_propagate(&self.x_aug, &self.p_aug, &self.q_aug, &self.ut, |pt| {
            let factor = pt[NX];
            let mut s = vector_to_state(pt);
            for _ in 0..substeps {
                s = rk4_step(&s, sub_dt, |r| Ok(factor * nominal.density(r)), &vehicle)?;
            }
            let mut out = DVector::zeros(NAUG);
            out.rows_mut(0, NX).copy_from(&state_to_vector(&s));
            out[NX] = factor; // random walk: no deterministic drift
            Ok(out)
        })?;
        self.x_aug = prop.mean;
        self.p_aug = prop.cov;

        let prior = vector_to_state(&self.x_aug);
        let rho_prior = self.x_aug[NX] * nominal.density(prior.r);
        let r = build_r(&measure_ideal(&prior, rho_prior, &vehicle), &ctx.noise);

        let y_vec = DVector::from_row_slice(&y.to_array());
        let update = unscented_update(&self.x_aug, &self.p_aug, &y_vec, &r, &self.ut, |pt| {
            let s = vector_to_state(pt);
            let rho = pt[NX] * nominal.density(s.r);
            DVector::from_row_slice(&measure_ideal(&s, rho, &vehicle).to_array())
        });
        let (skipped, jittered) = match update {
            Ok(u) => {
                self.x_aug = u.mean;
                self.p_aug = u.cov;
                (false, prop.jittered || u.jittered)
            }
            Err(FilterError::SingularInnovation) => {
                self.skipped_updates += 1;
                (true, prop.jittered)
            }
            Err(e) => return Err(e),
        };
        if jittered {
            self.jitter_events += 1;
        }

        Ok(FilterStepLog {
            rho_hat: self.density_estimate(),
            loss_pre: 0.0,
            loss_post: 0.0,
            mlo_iters: 0,
            update_skipped: skipped,
            jittered,
        })
    }

    fn estimate(&self) -> EntryState {
        vector_to_state(&self.x_aug)
    }

    fn sigma_diag(&self) -> [f64; 8] {
        sigma_diag_from_cov(&self.p_aug.view((0, 0), (NX, NX)).into_owned())
    }

    fn density_estimate(&self) -> f64 {
        self.x_aug[NX] * self.nominal.density(self.x_aug[0])
    }
}
