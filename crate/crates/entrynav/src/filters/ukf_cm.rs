//! UKF with covariance matching (UKF-CM).
//!
//! The density model is the fixed least-squares exponential fit; adaptation
//! happens only through the process noise covariance, re-estimated from a
//! sliding window of state innovations in the Myers-Tapley fashion. Since a
//! UKF has no explicit state-transition matrix, the `Phi P+ Phi^T` term is
//! approximated by the unscented prior covariance with the current process
//! noise removed.

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
use std::collections::VecDeque;

const NX: usize = EntryState::DIM;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CmConfig {
    /// Sliding-window length (time steps).
    pub window: usize,
}

impl Default for CmConfig {
    fn default() -> Self {
        Self { window: 10 }
    }
}

/// One window entry for the process-noise estimator.
#[derive(Debug, Clone)]
pub struct CmSample {
    /// State innovation: posterior minus prior estimate.
    pub nu_x: DVector<f64>,
    /// Propagated-covariance proxy (prior covariance minus the process noise
    /// used to build it).
    pub m_prop: DMatrix<f64>,
    /// Posterior covariance at the same epoch.
    pub p_post: DMatrix<f64>,
}

/// Myers-Tapley process-noise estimate over a window of state innovations:
/// the innovation sample covariance minus the expected covariance decrement.
/// The caller decides what to do about indefiniteness (conventionally the
/// diagonal is reset to absolute values).
pub fn estimate_q_matching(samples: &[CmSample]) -> Result<DMatrix<f64>, FilterError> {
    let n = samples.len();
    if n < 2 {
        return Err(FilterError::DimensionMismatch(format!(
            "covariance matching needs at least 2 samples, got {n}"
        )));
    }
    let dim = samples[0].nu_x.len();
    let mut mean = DVector::zeros(dim);
    for s in samples {
        mean += &s.nu_x;
    }
    mean /= n as f64;

    let mut q = DMatrix::zeros(dim, dim);
    let scatter_w = 1.0 / (n as f64 - 1.0);
    let decrement_w = 1.0 / n as f64;
    for s in samples {
        let d = &s.nu_x - &mean;
        q.ger(scatter_w, &d, &d, 1.0);
        q += (&s.p_post - &s.m_prop) * decrement_w;
    }
    Ok(q)
}

/// Measurement-noise counterpart: innovation sample covariance minus the
/// propagated measurement covariance (`H P- H^T`, supplied as `P_yy - R`).
/// Provided for completeness; the UKF-CM adapts only the process noise.
pub fn estimate_r_matching(
    innovations: &[DVector<f64>],
    hph: &[DMatrix<f64>],
) -> Result<DMatrix<f64>, FilterError> {
    let n = innovations.len();
    if n < 2 || hph.len() != n {
        return Err(FilterError::DimensionMismatch(format!(
            "measurement matching needs >= 2 aligned samples, got {n} / {}",
            hph.len()
        )));
    }
    let dim = innovations[0].len();
    let mut mean = DVector::zeros(dim);
    for nu in innovations {
        mean += nu;
    }
    mean /= n as f64;

    let mut r = DMatrix::zeros(dim, dim);
    let scatter_w = 1.0 / (n as f64 - 1.0);
    let decrement_w = 1.0 / n as f64;
    for (nu, h) in innovations.iter().zip(hph) {
        let d = nu - &mean;
        r.ger(scatter_w, &d, &d, 1.0);
        r -= h * decrement_w;
    }
    Ok(r)
}

/// Absolute value of the diagonal, off-diagonals dropped. Resetting the
/// diagonal only cures indefiniteness when the estimate is used diagonally;
/// retaining the (rank-deficient, noisy) off-diagonals from a 10-sample
/// window routinely leaves the prior covariance unfactorable mid-flight.
pub fn sanitize_q(q: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(q.nrows(), q.ncols());
    for i in 0..q.nrows() {
        out[(i, i)] = q[(i, i)].abs();
    }
    out
}

/// The UKF-CM filter.
pub struct UkfCm {
    x: DVector<f64>,
    p: DMatrix<f64>,
    /// Currently adapted process noise.
    pub q: DMatrix<f64>,
    pub model: ExpModel,
    pub ut: UtConfig,
    pub cfg: CmConfig,
    window: VecDeque<CmSample>,
    pub jitter_events: u32,
    pub skipped_updates: u32,
}

impl UkfCm {
    pub fn new(
        x0: EntryState,
        p0_diag: [f64; 8],
        q_diag: [f64; 8],
        model: ExpModel,
        cfg: CmConfig,
    ) -> Self {
        Self {
            x: state_to_vector(&x0),
            p: DMatrix::from_diagonal(&DVector::from_row_slice(&p0_diag)),
            q: DMatrix::from_diagonal(&DVector::from_row_slice(&q_diag)),
            model,
            ut: UtConfig::standard(NX),
            cfg,
            window: VecDeque::new(),
            jitter_events: 0,
            skipped_updates: 0,
        }
    }

    pub fn window_len(&self) -> usize {
        self.window.len()
    }
}

impl EntryFilter for UkfCm {
    fn name(&self) -> &'static str {
        "ukf_cm"
    }

    fn step(&mut self, y: &Measurement, ctx: &StepContext) -> Result<FilterStepLog, FilterError> {
        let model = self.model;
        let sub_dt = ctx.substep_dt();
        let substeps = ctx.substeps;
        let vehicle = ctx.vehicle;

        let prop = unscented_propagate(&self.x, &self.p, &self.q, &self.ut, |pt| {
            let mut s = vector_to_state(pt);
            for _ in 0..substeps {
                s = rk4_step(&s, sub_dt, |r| Ok(model.density(r)), &vehicle)?;
            }
            Ok(state_to_vector(&s))
        })?;
        let m_prop = &prop.cov - &self.q;
        let x_prior = prop.mean.clone();
        self.x = prop.mean;
        self.p = prop.cov;

        let prior_state = vector_to_state(&self.x);
        let r = build_r(
            &measure_ideal(&prior_state, model.density(prior_state.r), &vehicle),
            &ctx.noise,
        );

        let y_vec = DVector::from_row_slice(&y.to_array());
        let update = unscented_update(&self.x, &self.p, &y_vec, &r, &self.ut, |pt| {
            let s = vector_to_state(pt);
            DVector::from_row_slice(&measure_ideal(&s, model.density(s.r), &vehicle).to_array())
        });
        let (skipped, jittered) = match update {
            Ok(u) => {
                self.x = u.mean;
                self.p = u.cov;
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

        if !skipped {
            self.window.push_back(CmSample {
                nu_x: &self.x - &x_prior,
                m_prop,
                p_post: self.p.clone(),
            });
            while self.window.len() > self.cfg.window {
                self.window.pop_front();
            }
            if self.window.len() == self.cfg.window {
                let q = estimate_q_matching(self.window.make_contiguous())?;
                self.q = sanitize_q(&q);
            }
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
        vector_to_state(&self.x)
    }

    fn sigma_diag(&self) -> [f64; 8] {
        sigma_diag_from_cov(&self.p)
    }

    fn density_estimate(&self) -> f64 {
        self.model.density(self.x[0])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn batch_size_default_is_ten() {
        assert_eq!(CmConfig::default().window, 10);
    }

    #[test]
    fn zero_innovations_and_equal_covariances_give_zero_q() {
        let dim = 3;
        let p = DMatrix::identity(dim, dim) * 0.5;
        let samples: Vec<CmSample> = (0..10)
            .map(|_| CmSample {
                nu_x: DVector::zeros(dim),
                m_prop: p.clone(),
                p_post: p.clone(),
            })
            .collect();
        let q = estimate_q_matching(&samples).unwrap();
        assert_eq!(q, DMatrix::zeros(dim, dim));
    }

    #[test]
    fn underfull_window_is_an_error() {
        let s = CmSample {
            nu_x: DVector::zeros(2),
            m_prop: DMatrix::zeros(2, 2),
            p_post: DMatrix::zeros(2, 2),
        };
        assert!(estimate_q_matching(&[s]).is_err());
    }

    #[test]
    fn scalar_linear_system_recovers_process_noise() {
        // Random walk x_{k+1} = x_k + w, w ~ N(0, 0.04); y = x + v with
        // measurement noise comparable to the process noise so the window
        // estimator is identifiable. The filter starts with a badly wrong
        // process noise and the windowed estimate's time-average must pull
        // near the truth.
        let q_true: f64 = 0.04;
        let r_true: f64 = 0.04;
        let ut = UtConfig::standard(1);
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let mut draw = |sd: f64| -> f64 {
            let z: f64 = StandardNormal.sample(&mut rng);
            sd * z
        };

        let mut truth = 0.0;
        let mut x = DVector::from_element(1, 0.0);
        let mut p = DMatrix::from_element(1, 1, 1.0);
        let mut q = DMatrix::from_element(1, 1, 0.5);
        let r = DMatrix::from_element(1, 1, r_true);
        let mut window: VecDeque<CmSample> = VecDeque::new();
        let mut q_history = Vec::new();

        for _ in 0..2000 {
            truth += draw(q_true.sqrt());
            let y = DVector::from_element(1, truth + draw(r_true.sqrt()));

            let prop = unscented_propagate(&x, &p, &q, &ut, |pt| Ok(pt.clone())).unwrap();
            let m_prop = &prop.cov - &q;
            let x_prior = prop.mean.clone();
            let up = unscented_update(&prop.mean, &prop.cov, &y, &r, &ut, |pt| pt.clone()).unwrap();
            x = up.mean;
            p = up.cov;

            window.push_back(CmSample {
                nu_x: &x - &x_prior,
                m_prop,
                p_post: p.clone(),
            });
            while window.len() > 10 {
                window.pop_front();
            }
            if window.len() == 10 {
                let est = estimate_q_matching(window.make_contiguous()).unwrap();
                q = sanitize_q(&est);
                q_history.push(q[(0, 0)]);
            }
        }

        let avg: f64 = q_history.iter().sum::<f64>() / q_history.len() as f64;
        assert!(
            (avg - q_true).abs() / q_true < 0.5,
            "windowed Q average {avg:.4} vs truth {q_true}"
        );
    }

    #[test]
    fn r_matching_zero_innovations() {
        let hph: Vec<DMatrix<f64>> = (0..5).map(|_| DMatrix::from_element(2, 2, 0.3)).collect();
        let innovations: Vec<DVector<f64>> = (0..5).map(|_| DVector::zeros(2)).collect();
        let r = estimate_r_matching(&innovations, &hph).unwrap();
        // Zero scatter leaves only the negated propagated-covariance mean.
        for i in 0..2 {
            for j in 0..2 {
                assert_relative_eq!(r[(i, j)], -0.3, max_relative = 1e-12);
            }
        }
    }

    #[test]
    fn r_matching_recovers_innovation_covariance() {
        // With H P- H^T = 0, the estimator reduces to the sample covariance
        // of the innovations.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let s_true: f64 = 0.25;
        let n = 200;
        let innovations: Vec<DVector<f64>> = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                DVector::from_element(1, s_true.sqrt() * z)
            })
            .collect();
        let hph: Vec<DMatrix<f64>> = (0..n).map(|_| DMatrix::zeros(1, 1)).collect();
        let r = estimate_r_matching(&innovations, &hph).unwrap();
        assert!(
            (r[(0, 0)] - s_true).abs() / s_true < 0.3,
            "estimated {} vs {s_true}",
            r[(0, 0)]
        );
    }

    #[test]
    fn r_matching_needs_two_samples() {
        let innovations = vec![DVector::zeros(1)];
        let hph = vec![DMatrix::zeros(1, 1)];
        assert!(estimate_r_matching(&innovations, &hph).is_err());
    }

    #[test]
    fn window_fills_and_slides() {
        let model = ExpModel { rho0: 0.0158, r0: 3.3895e6, hs: 9354.0 };
        let x0 = EntryState {
            r: 3.5222e6,
            phi: -0.0684,
            theta: 2.2117,
            v: 6.0833e3,
            gamma: -0.2703,
            psi: 1.6268,
            b: 7.1e-3,
            lod: 0.24,
        };
        let p0 = [114.24, 2.06e-11, 4.56e-12, 7.55e-5, 5.41e-12, 2.43e-12, 2.56e-6, 2.56e-3];
        let q0 = [0.0, 0.0, 0.0, 1e-2, 1.354e-10, 1.354e-12, 1.11e-11, 1e-10];
        let mut filter = UkfCm::new(x0, p0, q0, model, CmConfig::default());
        let ctx = StepContext {
            dt: 0.25,
            substeps: 5,
            vehicle: crate::dynamics::VehicleConfig::default(),
            noise: crate::sensors::NoiseSpec::default(),
        };
        let q_initial = filter.q.clone();
        let mut truth = x0;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for k in 1..=12 {
            for _ in 0..5 {
                truth = rk4_step(&truth, 0.05, |r| Ok(1.2 * model.density(r)), &ctx.vehicle)
                    .unwrap();
            }
            let y = crate::sensors::measure_noisy(
                &truth,
                1.2 * model.density(truth.r),
                &ctx.vehicle,
                &ctx.noise,
                &mut rng,
            );
            filter.step(&y, &ctx).unwrap();
            assert_eq!(filter.window_len(), k.min(10));
            if k < 10 {
                assert_eq!(filter.q, q_initial, "Q adapted before the window filled");
            }
        }
        assert_ne!(filter.q, q_initial, "Q never adapted");
        for i in 0..8 {
            assert!(filter.q[(i, i)] >= 0.0);
        }
    }
}
