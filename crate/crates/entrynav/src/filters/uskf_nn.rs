//! Unscented Schmidt-Kalman filter with a neural density model adapted
//! online by maximum-likelihood optimization (USKF-NN).
//!
//! The filter state is augmented with a consider parameter `c`, an
//! exponentially correlated random variable centered at one that multiplies
//! the network's density at every sigma point. Its estimate is never updated
//! — only its covariance and cross-covariance carry the density uncertainty
//! into the gain. Between propagation and update, the measurement innovation
//! drives Adam steps on the 301 network parameters.

use super::sigma::{
    sigma_points, symmetrize, weighted_cov, weighted_cross_cov, weighted_mean, UtConfig,
};
use super::{
    sigma_diag_from_cov, state_to_vector, vector_to_state, EntryFilter, FilterError,
    FilterStepLog, StepContext,
};
use crate::dynamics::{rk4_step, EntryState, VehicleConfig};
use crate::net::{AdamState, MlpDensityNet, N_PARAMS};
use crate::sensors::{build_r_diag, measure_ideal, Measurement};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

const NX: usize = EntryState::DIM;
const NAUG: usize = NX + 1;
const NY: usize = Measurement::DIM;

/// Exponentially correlated random variable settings for the consider
/// parameter.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EcrvConfig {
    /// Time constant (s).
    pub tau: f64,
    /// Steady-state variance.
    pub p_ss: f64,
    /// Initial consider variance.
    pub p_c0: f64,
}

impl Default for EcrvConfig {
    fn default() -> Self {
        Self { tau: 5.0, p_ss: 1e-3, p_c0: 1e-10 }
    }
}

impl EcrvConfig {
    /// Mean-flow contraction over `dt`: `exp(-dt / tau)`.
    pub fn decay(&self, dt: f64) -> f64 {
        (-dt / self.tau).exp()
    }

    /// Discrete process noise `(1 - exp(-2 dt / tau)) P_ss`.
    pub fn q_c(&self, dt: f64) -> f64 {
        (1.0 - (-2.0 * dt / self.tau).exp()) * self.p_ss
    }
}

/// Maximum-likelihood optimization settings.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MloConfig {
    /// Base step size; the learning rate at epoch `k` is `alpha_base / k`.
    pub alpha_base: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Non-improving steps tolerated before giving up.
    pub patience_max: u32,
    /// Loss threshold gating the optimization.
    pub loss_threshold: f64,
    /// Hard iteration cap per epoch (safety bound, far above typical usage).
    pub max_iters: u32,
}

impl Default for MloConfig {
    fn default() -> Self {
        Self {
            alpha_base: 0.01,
            beta1: 0.1,
            beta2: 0.9,
            eps: 1e-8,
            patience_max: 1,
            loss_threshold: 1.0,
            max_iters: 200,
        }
    }
}

/// Augmented estimate, covariance blocks, network, and optimizer memory.
#[derive(Debug, Clone)]
pub struct ConsiderFilterState {
    pub x_hat: EntryState,
    /// Consider parameter estimate; structurally pinned to 1.
    pub c_hat: f64,
    /// State covariance (8x8).
    pub p: DMatrix<f64>,
    /// State-consider cross covariance (8x1).
    pub c_cross: DVector<f64>,
    /// Consider variance.
    pub p_c: f64,
    pub net: MlpDensityNet,
    pub adam: AdamState,
    /// 1-based measurement epoch counter.
    pub k_meas: u64,
}

impl ConsiderFilterState {
    pub fn new(
        x0: EntryState,
        p0_diag: [f64; 8],
        net: MlpDensityNet,
        ecrv: &EcrvConfig,
        mlo: &MloConfig,
    ) -> Self {
        Self {
            x_hat: x0,
            c_hat: 1.0,
            p: DMatrix::from_diagonal(&DVector::from_row_slice(&p0_diag)),
            c_cross: DVector::zeros(NX),
            p_c: ecrv.p_c0,
            net,
            adam: AdamState::new(N_PARAMS, mlo.beta1, mlo.beta2, mlo.eps),
            k_meas: 0,
        }
    }

    fn augmented_mean(&self) -> DVector<f64> {
        let mut x = DVector::zeros(NAUG);
        x.rows_mut(0, NX).copy_from(&state_to_vector(&self.x_hat));
        x[NX] = self.c_hat;
        x
    }

    fn augmented_cov(&self) -> DMatrix<f64> {
        let mut p = DMatrix::zeros(NAUG, NAUG);
        p.view_mut((0, 0), (NX, NX)).copy_from(&self.p);
        p.view_mut((0, NX), (NX, 1)).copy_from(&self.c_cross);
        p.view_mut((NX, 0), (1, NX)).copy_from(&self.c_cross.transpose());
        p[(NX, NX)] = self.p_c;
        p
    }
}

/// Time propagation of the augmented state (sigma points through RK4, with
/// each point's consider component scaling the network density and then
/// contracting toward one along the ECRV mean flow).
pub fn uskf_propagate(
    st: &mut ConsiderFilterState,
    dt: f64,
    substeps: usize,
    q: &DMatrix<f64>,
    ecrv: &EcrvConfig,
    ut: &UtConfig,
    vehicle: &VehicleConfig,
) -> Result<bool, FilterError> {
    let x_a = st.augmented_mean();
    let p_a = st.augmented_cov();

    let mut q_a = DMatrix::zeros(NAUG, NAUG);
    q_a.view_mut((0, 0), (NX, NX)).copy_from(q);
    q_a[(NX, NX)] = ecrv.q_c(dt);

    let decay = ecrv.decay(dt);
    let sub_dt = dt / substeps as f64;
    let net = &st.net;

    let sp = sigma_points(&x_a, &p_a, ut)?;
    let propagated: Vec<DVector<f64>> = sp
        .points
        .iter()
        .map(|pt| -> Result<DVector<f64>, FilterError> {
            let c = pt[NX];
            let mut s = vector_to_state(pt);
            for _ in 0..substeps {
                s = rk4_step(&s, sub_dt, |r| Ok(c * net.density(r)), vehicle)?;
            }
            let mut out = DVector::zeros(NAUG);
            out.rows_mut(0, NX).copy_from(&state_to_vector(&s));
            out[NX] = 1.0 + decay * (c - 1.0);
            Ok(out)
        })
        .collect::<Result<_, _>>()?;

    let mean = weighted_mean(&propagated, &sp.w_m);
    let cov = symmetrize(&(weighted_cov(&propagated, &mean, &sp.w_c) + q_a));

    st.x_hat = vector_to_state(&mean);
    // The ECRV flow is affine and centered at one, so the weighted consider
    // mean is one up to roundoff; pin it exactly.
    debug_assert!((mean[NX] - 1.0).abs() < 1e-9);
    st.c_hat = 1.0;
    st.p = cov.view((0, 0), (NX, NX)).into();
    st.c_cross = cov.view((0, NX), (NX, 1)).column(0).into_owned();
    st.p_c = cov[(NX, NX)];
    Ok(sp.jittered)
}

/// Outcome of one maximum-likelihood optimization pass.
#[derive(Debug, Clone, Copy)]
pub struct MloOutcome {
    pub loss_pre: f64,
    pub loss_post: f64,
    pub iters: u32,
    /// Adaptation aborted on a non-finite loss or gradient; parameters kept.
    pub aborted: bool,
    /// The safety iteration cap was reached.
    pub hit_cap: bool,
}

/// Measurement log-likelihood loss at the prior mean:
/// `nu^T R^-1 nu` with `nu = y - h(x_hat, net(r_hat))`.
pub fn innovation_loss(
    net: &MlpDensityNet,
    x: &EntryState,
    y: &Measurement,
    r_diag: &[f64; NY],
    vehicle: &VehicleConfig,
) -> f64 {
    let rho = net.density(x.r);
    let pred = measure_ideal(x, rho, vehicle);
    let nu_arr = y.to_array();
    let pred_arr = pred.to_array();
    let mut loss = 0.0;
    for i in 0..NY {
        let nu = nu_arr[i] - pred_arr[i];
        loss += nu * nu / r_diag[i];
    }
    loss
}

/// Gradient of the loss with respect to the network parameters, chained
/// through the measurement model and the density network.
pub fn innovation_loss_gradient(
    net: &MlpDensityNet,
    x: &EntryState,
    y: &Measurement,
    r_diag: &[f64; NY],
    vehicle: &VehicleConfig,
) -> Vec<f64> {
    let (rho, drho_dxi) = net.density_and_gradient(x.r);
    let pred = measure_ideal(x, rho, vehicle);

    // Accelerations and dynamic pressure are linear in density, so their
    // sensitivities come from evaluating the model at unit density. The heat
    // rate scales as sqrt(rho).
    let per_unit = measure_ideal(x, 1.0, vehicle);
    let mut dh_drho = [0.0; NY];
    dh_drho[0] = per_unit.a_body[0];
    dh_drho[1] = per_unit.a_body[1];
    dh_drho[2] = per_unit.a_body[2];
    dh_drho[3] = per_unit.q_dyn;
    dh_drho[4] = if rho > 0.0 { pred.qdot_s / (2.0 * rho) } else { 0.0 };

    let y_arr = y.to_array();
    let pred_arr = pred.to_array();
    let mut dloss_drho = 0.0;
    for i in 0..NY {
        let nu = y_arr[i] - pred_arr[i];
        dloss_drho += -2.0 * nu * dh_drho[i] / r_diag[i];
    }

    let mut grad = drho_dxi;
    for g in &mut grad {
        *g *= dloss_drho;
    }
    grad
}

/// Algorithm: evaluate the innovation loss; while it exceeds the threshold,
/// take Adam steps on the network parameters, keeping only improving steps
/// and stopping once patience runs out.
pub fn mlo(
    st: &mut ConsiderFilterState,
    y: &Measurement,
    r_diag: &[f64; NY],
    cfg: &MloConfig,
    vehicle: &VehicleConfig,
) -> MloOutcome {
    let lr = cfg.alpha_base / st.k_meas.max(1) as f64;
    let loss_pre = innovation_loss(&st.net, &st.x_hat, y, r_diag, vehicle);
    let mut outcome =
        MloOutcome { loss_pre, loss_post: loss_pre, iters: 0, aborted: false, hit_cap: false };
    if !loss_pre.is_finite() {
        outcome.aborted = true;
        return outcome;
    }

    let mut loss = loss_pre;
    let mut patience = 0;
    while loss > cfg.loss_threshold {
        if outcome.iters >= cfg.max_iters {
            outcome.hit_cap = true;
            break;
        }
        let grad = innovation_loss_gradient(&st.net, &st.x_hat, y, r_diag, vehicle);
        if grad.iter().any(|g| !g.is_finite()) {
            outcome.aborted = true;
            break;
        }
        let mut candidate_params = st.net.params();
        let mut candidate_adam = st.adam.clone();
        candidate_adam.step(&mut candidate_params, &grad, lr);
        let mut candidate_net = st.net.clone();
        candidate_net.set_params(&candidate_params);
        let candidate_loss = innovation_loss(&candidate_net, &st.x_hat, y, r_diag, vehicle);
        outcome.iters += 1;
        if !candidate_loss.is_finite() {
            outcome.aborted = true;
            break;
        }
        if candidate_loss < loss {
            st.net = candidate_net;
            st.adam = candidate_adam;
            loss = candidate_loss;
        } else {
            patience += 1;
        }
        if patience >= cfg.patience_max {
            break;
        }
    }
    outcome.loss_post = loss;
    outcome
}

/// Outcome of the consider measurement update.
#[derive(Debug, Clone, Copy)]
pub struct UpdateOutcome {
    pub skipped: bool,
    pub jittered: bool,
}

/// Consider measurement update: the gain is computed over the augmented
/// state, but only its state rows correct the estimate, and the consider
/// variance block is left untouched.
pub fn uskf_update(
    st: &mut ConsiderFilterState,
    y: &Measurement,
    r: &DMatrix<f64>,
    ut: &UtConfig,
    vehicle: &VehicleConfig,
) -> Result<UpdateOutcome, FilterError> {
    let x_a = st.augmented_mean();
    let p_a = st.augmented_cov();
    let net = &st.net;

    let sp = sigma_points(&x_a, &p_a, ut)?;
    let predicted: Vec<DVector<f64>> = sp
        .points
        .iter()
        .map(|pt| {
            let s = vector_to_state(pt);
            let rho = pt[NX] * net.density(s.r);
            DVector::from_row_slice(&measure_ideal(&s, rho, vehicle).to_array())
        })
        .collect();

    let y_hat = weighted_mean(&predicted, &sp.w_m);
    let p_yy = symmetrize(&(weighted_cov(&predicted, &y_hat, &sp.w_c) + r));
    let p_xay = weighted_cross_cov(&sp.points, &x_a, &predicted, &y_hat, &sp.w_c);

    let chol = match nalgebra::Cholesky::new(p_yy.clone()) {
        Some(c) => c,
        None => return Ok(UpdateOutcome { skipped: true, jittered: sp.jittered }),
    };
    let gain = chol.solve(&p_xay.transpose()).transpose();
    let k_x: DMatrix<f64> = gain.view((0, 0), (NX, NY)).into();
    let k_c: DMatrix<f64> = gain.view((NX, 0), (1, NY)).into();

    let innovation = DVector::from_row_slice(&y.to_array()) - &y_hat;
    let x_new = state_to_vector(&st.x_hat) + &k_x * &innovation;

    let kx_pyy = &k_x * &p_yy;
    let p_new = symmetrize(&(&st.p - &kx_pyy * k_x.transpose()));
    let c_new = &st.c_cross - &kx_pyy * k_c.transpose();

    st.x_hat = vector_to_state(&x_new);
    st.p = p_new;
    st.c_cross = c_new.column(0).into_owned();
    // st.p_c and st.c_hat intentionally untouched.
    Ok(UpdateOutcome { skipped: false, jittered: sp.jittered })
}

/// The full USKF-NN filter: configuration plus mutable state.
pub struct UskfNn {
    pub state: ConsiderFilterState,
    pub ut: UtConfig,
    pub ecrv: EcrvConfig,
    pub mlo_cfg: MloConfig,
    /// Assumed per-epoch process noise (8x8).
    pub q: DMatrix<f64>,
    /// Cumulative diagnostics.
    pub jitter_events: u32,
    pub mlo_aborts: u32,
    pub mlo_cap_hits: u32,
    pub skipped_updates: u32,
}

impl UskfNn {
    pub fn new(
        x0: EntryState,
        p0_diag: [f64; 8],
        q_diag: [f64; 8],
        net: MlpDensityNet,
        ecrv: EcrvConfig,
        mlo_cfg: MloConfig,
    ) -> Self {
        Self {
            state: ConsiderFilterState::new(x0, p0_diag, net, &ecrv, &mlo_cfg),
            ut: UtConfig::standard(NAUG),
            ecrv,
            mlo_cfg,
            q: DMatrix::from_diagonal(&DVector::from_row_slice(&q_diag)),
            jitter_events: 0,
            mlo_aborts: 0,
            mlo_cap_hits: 0,
            skipped_updates: 0,
        }
    }

    /// One full recursion: propagate, adapt the network, update.
    pub fn recursion_step(
        &mut self,
        y: &Measurement,
        ctx: &StepContext,
    ) -> Result<FilterStepLog, FilterError> {
        self.state.k_meas += 1;
        let jit_prop = uskf_propagate(
            &mut self.state,
            ctx.dt,
            ctx.substeps,
            &self.q,
            &self.ecrv,
            &self.ut,
            &ctx.vehicle,
        )?;

        // Measurement covariance from the prior predicted reading.
        let rho_prior = self.state.net.density(self.state.x_hat.r);
        let predicted = measure_ideal(&self.state.x_hat, rho_prior, &ctx.vehicle);
        let r_diag = build_r_diag(&predicted, &ctx.noise);

        let mlo_out = mlo(&mut self.state, y, &r_diag, &self.mlo_cfg, &ctx.vehicle);
        if mlo_out.aborted {
            self.mlo_aborts += 1;
        }
        if mlo_out.hit_cap {
            self.mlo_cap_hits += 1;
        }

        let r = DMatrix::from_diagonal(&DVector::from_row_slice(&r_diag));
        let up = uskf_update(&mut self.state, y, &r, &self.ut, &ctx.vehicle)?;
        if up.skipped {
            self.skipped_updates += 1;
        }
        if jit_prop || up.jittered {
            self.jitter_events += 1;
        }

        Ok(FilterStepLog {
            rho_hat: self.state.net.density(self.state.x_hat.r),
            loss_pre: mlo_out.loss_pre,
            loss_post: mlo_out.loss_post,
            mlo_iters: mlo_out.iters,
            update_skipped: up.skipped,
            jittered: jit_prop || up.jittered,
        })
    }
}

impl EntryFilter for UskfNn {
    fn name(&self) -> &'static str {
        "uskf_nn"
    }

    fn step(&mut self, y: &Measurement, ctx: &StepContext) -> Result<FilterStepLog, FilterError> {
        self.recursion_step(y, ctx)
    }

    fn estimate(&self) -> EntryState {
        self.state.x_hat
    }

    fn sigma_diag(&self) -> [f64; 8] {
        sigma_diag_from_cov(&self.state.p)
    }

    fn density_estimate(&self) -> f64 {
        self.state.net.density(self.state.x_hat.r)
    }
}
