//! Measurement models: IMU specific force, aggregated dynamic pressure, and
//! Sutton-Graves convective heat rate.

use crate::dynamics::{accel_drag_lift, EntryState, VehicleConfig};
use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::io::Write;

/// Sutton-Graves constant for Mars entry (kg^1/2 / m).
pub const SUTTON_GRAVES_K: f64 = 1.9027e-4;
/// Standard gravity, used to convert IMU noise specs quoted in micro-g.
pub const G0: f64 = 9.80665;
/// Variance floor applied to every diagonal entry of the measurement covariance.
pub const R_DIAG_FLOOR: f64 = 1e-20;

/// One epoch of sensor outputs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    /// Specific force in the body frame (m/s^2).
    pub a_body: [f64; 3],
    /// Dynamic pressure (Pa).
    pub q_dyn: f64,
    /// Convective heating rate (W/m^2).
    pub qdot_s: f64,
}

impl Measurement {
    pub const DIM: usize = 5;

    pub fn to_array(self) -> [f64; 5] {
        [self.a_body[0], self.a_body[1], self.a_body[2], self.q_dyn, self.qdot_s]
    }

    pub fn from_array(a: [f64; 5]) -> Self {
        Self { a_body: [a[0], a[1], a[2]], q_dyn: a[3], qdot_s: a[4] }
    }
}

/// 1-sigma measurement noise levels.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct NoiseSpec {
    /// Per-axis accelerometer noise (m/s^2).
    pub sigma_accel: f64,
    /// Fractional noise on dynamic pressure (1-sigma, fraction of reading).
    pub frac_q: f64,
    /// Fractional noise on heat rate (1-sigma, fraction of reading).
    pub frac_qdot: f64,
}

impl NoiseSpec {
    /// Accelerometer 3-sigma in micro-g plus fractional 3-sigma in percent of
    /// reading for the pressure and heat-rate channels.
    pub fn from_three_sigma(accel_ug: f64, q_pct: f64, qdot_pct: f64) -> Self {
        Self {
            sigma_accel: accel_ug * 1e-6 * G0 / 3.0,
            frac_q: q_pct / 100.0 / 3.0,
            frac_qdot: qdot_pct / 100.0 / 3.0,
        }
    }

    pub fn zero() -> Self {
        Self { sigma_accel: 0.0, frac_q: 0.0, frac_qdot: 0.0 }
    }
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self::from_three_sigma(3e2, 1.0, 1.0)
    }
}

/// Rotation from the velocity frame to the body frame: a single pitch by the
/// total angle of attack about the velocity-frame y-axis.
fn velocity_to_body(alpha: f64) -> [[f64; 3]; 3] {
    let (s, c) = alpha.sin_cos();
    [[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]]
}

/// Noise-free measurement at the given state and density.
pub fn measure_ideal(s: &EntryState, rho: f64, cfg: &VehicleConfig) -> Measurement {
    let (drag, lift) = accel_drag_lift(s, rho);
    let a_v = [-drag, lift * cfg.sigma_bank.sin(), lift * cfg.sigma_bank.cos()];
    let t = velocity_to_body(cfg.alpha_att);
    let mut a_body = [0.0; 3];
    for i in 0..3 {
        a_body[i] = t[i][0] * a_v[0] + t[i][1] * a_v[1] + t[i][2] * a_v[2];
    }
    let q_dyn = 0.5 * rho * s.v * s.v;
    let qdot_s = SUTTON_GRAVES_K * (rho / cfg.nose_radius).sqrt() * s.v.powi(3);
    Measurement { a_body, q_dyn, qdot_s }
}

/// Ideal measurement plus additive Gaussian noise. Fractional channels are
/// scaled by the noise-free reading.
pub fn measure_noisy<R: Rng>(
    s: &EntryState,
    rho: f64,
    cfg: &VehicleConfig,
    noise: &NoiseSpec,
    rng: &mut R,
) -> Measurement {
    let mut m = measure_ideal(s, rho, cfg);
    let mut draw = |sd: f64| -> f64 {
        let z: f64 = StandardNormal.sample(rng);
        sd * z
    };
    for a in &mut m.a_body {
        *a += draw(noise.sigma_accel);
    }
    m.q_dyn += draw(noise.frac_q * m.q_dyn);
    m.qdot_s += draw(noise.frac_qdot * m.qdot_s);
    m
}

/// Diagonal of the measurement covariance for a predicted measurement.
///
/// Accelerometer variances are constant; the pressure and heat-rate variances
/// scale with the predicted reading so noise never correlates with the
/// realized measurement.
pub fn build_r_diag(predicted: &Measurement, noise: &NoiseSpec) -> [f64; 5] {
    let sa = noise.sigma_accel * noise.sigma_accel;
    let sq = noise.frac_q * predicted.q_dyn;
    let sqd = noise.frac_qdot * predicted.qdot_s;
    [
        sa.max(R_DIAG_FLOOR),
        sa.max(R_DIAG_FLOOR),
        sa.max(R_DIAG_FLOOR),
        (sq * sq).max(R_DIAG_FLOOR),
        (sqd * sqd).max(R_DIAG_FLOOR),
    ]
}

/// Full 5x5 measurement covariance (diagonal).
pub fn build_r(predicted: &Measurement, noise: &NoiseSpec) -> DMatrix<f64> {
    DMatrix::from_diagonal(&nalgebra::DVector::from_row_slice(&build_r_diag(predicted, noise)))
}

/// CSV serialization of a measurement log: `t_s,ax,ay,az,q_pa,qdot_wm2`.
pub fn write_measurement_csv<W: Write>(
    rows: &[(f64, Measurement)],
    mut w: W,
) -> std::io::Result<()> {
    writeln!(w, "t_s,ax,ay,az,q_pa,qdot_wm2")?;
    for (t, m) in rows {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            t, m.a_body[0], m.a_body[1], m.a_body[2], m.q_dyn, m.qdot_s
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn state(v: f64) -> EntryState {
        EntryState {
            r: 3.47e6,
            phi: -0.068,
            theta: 2.21,
            v,
            gamma: -0.27,
            psi: 1.63,
            b: 7.1e-3,
            lod: 0.24,
        }
    }

    #[test]
    fn vacuum_measurement_is_zero() {
        let m = measure_ideal(&state(5000.0), 0.0, &VehicleConfig::default());
        assert_eq!(m.a_body, [0.0, 0.0, 0.0]);
        assert_eq!(m.q_dyn, 0.0);
        assert_eq!(m.qdot_s, 0.0);
    }

    #[test]
    fn identity_attitude_zero_bank_layout() {
        let cfg = VehicleConfig { alpha_att: 0.0, sigma_bank: 0.0, ..VehicleConfig::default() };
        let s = state(5000.0);
        let rho = 0.01;
        let (d, l) = accel_drag_lift(&s, rho);
        let m = measure_ideal(&s, rho, &cfg);
        assert_relative_eq!(m.a_body[0], -d, max_relative = 1e-14);
        assert_eq!(m.a_body[1], 0.0);
        assert_relative_eq!(m.a_body[2], l, max_relative = 1e-14);
    }

    #[test]
    fn pressure_and_heat_rate_scalar_oracle() {
        let cfg = VehicleConfig::default(); // nose radius 1.125 m
        let m = measure_ideal(&state(5000.0), 0.01, &cfg);
        assert_relative_eq!(m.q_dyn, 125000.0, max_relative = 1e-13);
        assert_relative_eq!(m.qdot_s, 2242353.45427274, max_relative = 1e-12);
    }

    #[test]
    fn density_recoverable_from_dynamic_pressure() {
        let s = state(4321.0);
        for rho in [1e-8, 1e-5, 1e-2] {
            let m = measure_ideal(&s, rho, &VehicleConfig::default());
            let recovered = 2.0 * m.q_dyn / (s.v * s.v);
            assert_relative_eq!(recovered, rho, max_relative = 1e-14);
        }
    }

    #[test]
    fn heat_rate_scalings() {
        let cfg = VehicleConfig::default();
        let base = measure_ideal(&state(3000.0), 4e-4, &cfg);
        let double_v = measure_ideal(&state(6000.0), 4e-4, &cfg);
        assert_relative_eq!(double_v.qdot_s, 8.0 * base.qdot_s, max_relative = 1e-13);
        let quad_rho = measure_ideal(&state(3000.0), 16e-4, &cfg);
        assert_relative_eq!(quad_rho.qdot_s, 2.0 * base.qdot_s, max_relative = 1e-13);
    }

    #[test]
    fn attitude_transform_preserves_norm() {
        let cfg = VehicleConfig { sigma_bank: 0.4, ..VehicleConfig::default() };
        let s = state(5200.0);
        let rho = 3e-3;
        let (d, l) = accel_drag_lift(&s, rho);
        let a_v_norm = (d * d
            + (l * cfg.sigma_bank.sin()).powi(2)
            + (l * cfg.sigma_bank.cos()).powi(2))
        .sqrt();
        let m = measure_ideal(&s, rho, &cfg);
        let a_b_norm = (m.a_body.iter().map(|x| x * x).sum::<f64>()).sqrt();
        assert_relative_eq!(a_b_norm, a_v_norm, max_relative = 1e-12);
    }

    #[test]
    fn zero_noise_equals_ideal() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = state(5500.0);
        let cfg = VehicleConfig::default();
        let noisy = measure_noisy(&s, 2e-3, &cfg, &NoiseSpec::zero(), &mut rng);
        assert_eq!(noisy, measure_ideal(&s, 2e-3, &cfg));
    }

    #[test]
    fn default_noise_matches_table_values() {
        let n = NoiseSpec::default();
        assert_relative_eq!(n.sigma_accel, 3e2 * 1e-6 * G0 / 3.0, max_relative = 1e-14);
        assert_relative_eq!(n.frac_q, 0.01 / 3.0, max_relative = 1e-14);
        assert_relative_eq!(n.frac_qdot, 0.01 / 3.0, max_relative = 1e-14);
    }

    #[test]
    fn noisy_pressure_std_matches_spec() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let s = state(5000.0);
        let cfg = VehicleConfig::default();
        let noise = NoiseSpec::default();
        let ideal = measure_ideal(&s, 0.01, &cfg);
        let n = 100_000;
        let samples: Vec<f64> =
            (0..n).map(|_| measure_noisy(&s, 0.01, &cfg, &noise, &mut rng).q_dyn).collect();
        let mean = samples.iter().sum::<f64>() / n as f64;
        let var = samples.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
        let expect = ideal.q_dyn * 0.01 / 3.0;
        assert_relative_eq!(var.sqrt(), expect, max_relative = 0.02);
    }

    #[test]
    fn r_diag_floor_and_entries() {
        let zero = Measurement { a_body: [0.0; 3], q_dyn: 0.0, qdot_s: 0.0 };
        let r = build_r_diag(&zero, &NoiseSpec::zero());
        assert_eq!(r, [R_DIAG_FLOOR; 5]);

        let m = Measurement { a_body: [1.0, 0.0, 0.5], q_dyn: 1000.0, qdot_s: 5e5 };
        let r = build_r_diag(&m, &NoiseSpec::default());
        // 3e2 micro-g converted at g0, squared.
        assert_relative_eq!(r[0], 9.61703842225e-7, max_relative = 1e-12);
        assert_relative_eq!(r[1], r[0], max_relative = 1e-15);
        assert_relative_eq!(r[2], r[0], max_relative = 1e-15);

        let m2 = Measurement { q_dyn: 2000.0, ..m };
        let r2 = build_r_diag(&m2, &NoiseSpec::default());
        assert_relative_eq!(r2[3], 4.0 * r[3], max_relative = 1e-13);
    }

    #[test]
    fn measurement_csv_format() {
        let m = Measurement { a_body: [-1.0, 0.0, 0.25], q_dyn: 12.5, qdot_s: 990.0 };
        let mut buf = Vec::new();
        write_measurement_csv(&[(0.25, m)], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "t_s,ax,ay,az,q_pa,qdot_wm2\n0.25,-1,0,0.25,12.5,990\n");
    }
}
