//! Simplified 3-DOF point-mass entry dynamics and fixed-step RK4 propagation.
//!
//! Planetary rotation and wind are neglected; gravity is first-order
//! (`g = mu / r^2`). The aerodynamic states `B` (inverse ballistic
//! coefficient) and `L/D` carry zero deterministic drift — they are random
//! walks whose randomness enters only through injected process noise.

use crate::atmos::{AtmosError, TabulatedProfile};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::io::Write;

const COS_SINGULARITY_EPS: f64 = 1e-9;

#[derive(Debug, thiserror::Error)]
pub enum DynamicsError {
    #[error("singular geometry: |cos({0})| below 1e-9")]
    Singularity(&'static str),
    #[error("density lookup failed: {0}")]
    Density(#[from] AtmosError),
    #[error("invalid propagation setup: {0}")]
    InvalidSetup(String),
}

/// Vehicle entry state. Angles in radians, SI units throughout.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EntryState {
    /// Planet-centric radius (m).
    pub r: f64,
    /// Latitude (rad).
    pub phi: f64,
    /// Longitude (rad).
    pub theta: f64,
    /// Speed (m/s).
    pub v: f64,
    /// Flight-path angle (rad, negative down).
    pub gamma: f64,
    /// Heading azimuth (rad, 0 = North, pi/2 = East).
    pub psi: f64,
    /// Inverse ballistic coefficient `C_d S / m` (m^2/kg).
    pub b: f64,
    /// Lift-to-drag ratio.
    pub lod: f64,
}

impl EntryState {
    pub const DIM: usize = 8;

    pub fn to_array(self) -> [f64; 8] {
        [self.r, self.phi, self.theta, self.v, self.gamma, self.psi, self.b, self.lod]
    }

    pub fn from_array(a: [f64; 8]) -> Self {
        Self { r: a[0], phi: a[1], theta: a[2], v: a[3], gamma: a[4], psi: a[5], b: a[6], lod: a[7] }
    }

    /// Altitude above the given surface radius (m).
    pub fn altitude(&self, r_surface: f64) -> f64 {
        self.r - r_surface
    }
}

/// Fixed vehicle and environment parameters.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct VehicleConfig {
    /// Gravitational parameter (m^3/s^2).
    pub mu: f64,
    /// Bank angle (rad).
    pub sigma_bank: f64,
    /// Angle of attack (rad).
    pub alpha_att: f64,
    /// Nose radius (m).
    pub nose_radius: f64,
}

impl Default for VehicleConfig {
    fn default() -> Self {
        Self {
            mu: 4.282837e13,
            sigma_bank: 0.0,
            alpha_att: -17.0_f64.to_radians(),
            nose_radius: 1.125,
        }
    }
}

/// Drag and lift accelerations (m/s^2) at the given density.
pub fn accel_drag_lift(s: &EntryState, rho: f64) -> (f64, f64) {
    let drag = 0.5 * rho * s.v * s.v * s.b;
    (drag, drag * s.lod)
}

/// Time derivative of the eight state components.
pub fn state_derivative(
    s: &EntryState,
    rho: f64,
    cfg: &VehicleConfig,
) -> Result<[f64; 8], DynamicsError> {
    let cos_gamma = s.gamma.cos();
    let cos_phi = s.phi.cos();
    if cos_gamma.abs() < COS_SINGULARITY_EPS {
        return Err(DynamicsError::Singularity("gamma"));
    }
    if cos_phi.abs() < COS_SINGULARITY_EPS {
        return Err(DynamicsError::Singularity("phi"));
    }
    let sin_gamma = s.gamma.sin();
    let (sin_psi, cos_psi) = s.psi.sin_cos();
    let g = cfg.mu / (s.r * s.r);
    let (drag, lift) = accel_drag_lift(s, rho);
    let v2_r = s.v * s.v / s.r;

    let r_dot = s.v * sin_gamma;
    let phi_dot = cos_gamma * cos_psi / s.r * s.v;
    let theta_dot = cos_gamma * sin_psi / (s.r * cos_phi) * s.v;
    let v_dot = -drag - g * sin_gamma;
    let gamma_dot = (lift * cfg.sigma_bank.cos() - g * cos_gamma + v2_r * cos_gamma) / s.v;
    let psi_dot = (lift * cfg.sigma_bank.sin() / cos_gamma
        + v2_r * cos_gamma * sin_psi * (s.phi.tan()))
        / s.v;

    Ok([r_dot, phi_dot, theta_dot, v_dot, gamma_dot, psi_dot, 0.0, 0.0])
}

/// One classical RK4 step. The density callable is re-evaluated at each
/// stage's radius.
pub fn rk4_step<F>(
    s: &EntryState,
    dt: f64,
    density: F,
    cfg: &VehicleConfig,
) -> Result<EntryState, DynamicsError>
where
    F: Fn(f64) -> Result<f64, AtmosError>,
{
    let eval = |state: &EntryState| -> Result<[f64; 8], DynamicsError> {
        state_derivative(state, density(state.r)?, cfg)
    };
    let shift = |base: &EntryState, k: &[f64; 8], h: f64| {
        let mut a = base.to_array();
        for i in 0..8 {
            a[i] += h * k[i];
        }
        EntryState::from_array(a)
    };

    let k1 = eval(s)?;
    let k2 = eval(&shift(s, &k1, dt / 2.0))?;
    let k3 = eval(&shift(s, &k2, dt / 2.0))?;
    let k4 = eval(&shift(s, &k3, dt))?;

    let mut out = s.to_array();
    for i in 0..8 {
        out[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
    Ok(EntryState::from_array(out))
}

/// Per-step process noise, 1-sigma. Radius, latitude and longitude carry no
/// process noise; only the velocity-related and aerodynamic states do.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct ProcessNoiseStd {
    pub v: f64,
    pub gamma: f64,
    pub psi: f64,
    pub b: f64,
    pub lod: f64,
}

impl ProcessNoiseStd {
    /// Diagonal of the corresponding 8x8 process-noise covariance.
    pub fn variance_diagonal(&self) -> [f64; 8] {
        [
            0.0,
            0.0,
            0.0,
            self.v * self.v,
            self.gamma * self.gamma,
            self.psi * self.psi,
            self.b * self.b,
            self.lod * self.lod,
        ]
    }
}

/// Gaussian dispersion of entry states: per-component 1-sigma about a mean.
///
/// Used both to scatter the true initial conditions across Monte Carlo runs
/// and to sample the filter's initial estimate about the truth.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EntryDispersion {
    pub mean: EntryState,
    /// 1-sigma per state component, in the order of [`EntryState::to_array`].
    pub sigma: [f64; 8],
}

impl EntryDispersion {
    pub fn sample<R: rand::Rng>(&self, rng: &mut R) -> EntryState {
        let mut a = self.mean.to_array();
        for (x, sd) in a.iter_mut().zip(self.sigma) {
            let z: f64 = StandardNormal.sample(rng);
            *x += sd * z;
        }
        EntryState::from_array(a)
    }

    /// Diagonal covariance implied by the dispersion.
    pub fn variance_diagonal(&self) -> [f64; 8] {
        let mut d = [0.0; 8];
        for (out, sd) in d.iter_mut().zip(self.sigma) {
            *out = sd * sd;
        }
        d
    }
}

/// One sample of a propagated truth trajectory.
#[derive(Debug, Clone, Copy)]
pub struct TruthSample {
    pub t: f64,
    pub state: EntryState,
    pub rho: f64,
}

/// Propagate the truth trajectory against a tabulated atmosphere.
///
/// RK4 substeps run at `dt`; additive zero-mean Gaussian process noise is
/// injected once per sensor interval (`sensor_dt`). The returned series holds
/// one sample per sensor epoch, including the initial state at `t = 0`.
#[allow(clippy::too_many_arguments)]
pub fn propagate_truth(
    s0: &EntryState,
    profile: &TabulatedProfile,
    cfg: &VehicleConfig,
    dt: f64,
    sensor_dt: f64,
    t_end: f64,
    q: &ProcessNoiseStd,
    seed: u64,
) -> Result<Vec<TruthSample>, DynamicsError> {
    if dt <= 0.0 || sensor_dt <= 0.0 || t_end <= 0.0 {
        return Err(DynamicsError::InvalidSetup("dt, sensor_dt, t_end must be positive".into()));
    }
    let substeps = (sensor_dt / dt).round() as usize;
    if substeps == 0 || (substeps as f64 * dt - sensor_dt).abs() > 1e-9 {
        return Err(DynamicsError::InvalidSetup(format!(
            "sensor interval {sensor_dt} not a multiple of dt {dt}"
        )));
    }
    let n_epochs = (t_end / sensor_dt).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let density = |r: f64| profile.density(r);

    let mut out = Vec::with_capacity(n_epochs + 1);
    let mut state = *s0;
    out.push(TruthSample { t: 0.0, state, rho: profile.density(state.r)? });
    for k in 1..=n_epochs {
        for _ in 0..substeps {
            state = rk4_step(&state, dt, density, cfg)?;
        }
        let draw = |rng: &mut ChaCha8Rng, sd: f64| -> f64 {
            let z: f64 = StandardNormal.sample(rng);
            sd * z
        };
        state.v += draw(&mut rng, q.v);
        state.gamma += draw(&mut rng, q.gamma);
        state.psi += draw(&mut rng, q.psi);
        state.b += draw(&mut rng, q.b);
        state.lod += draw(&mut rng, q.lod);
        out.push(TruthSample { t: k as f64 * sensor_dt, state, rho: profile.density(state.r)? });
    }
    Ok(out)
}

/// CSV serialization of a truth trajectory:
/// `t_s,r_m,phi_rad,theta_rad,v_ms,gamma_rad,psi_rad,B_m2kg,LoD,rho_true`.
pub fn write_truth_csv<W: Write>(samples: &[TruthSample], mut w: W) -> std::io::Result<()> {
    writeln!(w, "t_s,r_m,phi_rad,theta_rad,v_ms,gamma_rad,psi_rad,B_m2kg,LoD,rho_true")?;
    for s in samples {
        let x = s.state;
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{}",
            s.t, x.r, x.phi, x.theta, x.v, x.gamma, x.psi, x.b, x.lod, s.rho
        )?;
    }
    Ok(())
}
