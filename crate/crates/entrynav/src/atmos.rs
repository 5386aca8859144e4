//! Atmospheric density models.
//!
//! Three families live here: the onboard exponential model (least-squares fit
//! in log space), the COSPAR modified-exponential model, and tabulated
//! profiles with natural cubic-spline lookup. Tabulated profiles double as
//! the "truth" atmosphere, produced by a seeded surrogate generator that
//! perturbs a randomized COSPAR baseline with a smooth altitude-correlated
//! log-normal field.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, Read, Write};

#[derive(Debug, thiserror::Error)]
pub enum AtmosError {
    #[error("profile needs at least two knots, got {0}")]
    TooFewKnots(usize),
    #[error("profile radii must be strictly increasing (violated at index {0})")]
    NonIncreasingRadii(usize),
    #[error("profile densities must be positive (violated at index {0})")]
    NonPositiveDensity(usize),
    #[error("radius {r} outside tabulated range [{min}, {max}]")]
    OutOfRange { r: f64, min: f64, max: f64 },
    #[error("exponential fit is degenerate: {0}")]
    DegenerateFit(String),
    #[error("invalid generator config: {0}")]
    InvalidConfig(String),
    #[error("malformed profile CSV: {0}")]
    MalformedCsv(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Isothermal exponential density model: `rho0 * exp(-(r - r0) / hs)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExpModel {
    /// Density at the reference radius (kg/m^3).
    pub rho0: f64,
    /// Reference planet-centric radius (m).
    pub r0: f64,
    /// Scale height (m).
    pub hs: f64,
}

impl ExpModel {
    pub fn density(&self, r: f64) -> f64 {
        debug_assert!(self.rho0 > 0.0 && self.hs > 0.0);
        self.rho0 * (-(r - self.r0) / self.hs).exp()
    }
}

/// COSPAR modified-exponential model:
/// `rho0 * exp(-beta*(r-r0) + gamma*cos(omega*(r-r0)) + delta*sin(omega*(r-r0)))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CosparModel {
    pub rho0: f64,
    pub r0: f64,
    pub beta_rho: f64,
    pub gamma_rho: f64,
    pub omega_rho: f64,
    pub delta_rho: f64,
}

impl CosparModel {
    pub fn density(&self, r: f64) -> f64 {
        debug_assert!(self.rho0 > 0.0 && self.omega_rho >= 0.0);
        let dr = r - self.r0;
        let arg = self.omega_rho * dr;
        (self.rho0)
            * (-self.beta_rho * dr + self.gamma_rho * arg.cos() + self.delta_rho * arg.sin()).exp()
    }
}

/// Density profile tabulated on a strictly increasing radius grid, with a
/// precomputed natural cubic spline for lookup between knots.
#[derive(Debug, Clone, PartialEq)]
pub struct TabulatedProfile {
    radii: Vec<f64>,
    densities: Vec<f64>,
    /// Second derivatives of density at each knot (natural boundary: 0 at ends).
    d2: Vec<f64>,
}

impl TabulatedProfile {
    pub fn new(radii: Vec<f64>, densities: Vec<f64>) -> Result<Self, AtmosError> {
        if radii.len() < 2 {
            return Err(AtmosError::TooFewKnots(radii.len()));
        }
        if radii.len() != densities.len() {
            return Err(AtmosError::MalformedCsv(format!(
                "{} radii vs {} densities",
                radii.len(),
                densities.len()
            )));
        }
        for i in 1..radii.len() {
            if radii[i] <= radii[i - 1] {
                return Err(AtmosError::NonIncreasingRadii(i));
            }
        }
        for (i, &d) in densities.iter().enumerate() {
            if d.is_nan() || d <= 0.0 {
                return Err(AtmosError::NonPositiveDensity(i));
            }
        }
        let d2 = natural_spline_second_derivatives(&radii, &densities);
        Ok(Self { radii, densities, d2 })
    }

    pub fn radii(&self) -> &[f64] {
        &self.radii
    }

    pub fn densities(&self) -> &[f64] {
        &self.densities
    }

    pub fn r_min(&self) -> f64 {
        self.radii[0]
    }

    pub fn r_max(&self) -> f64 {
        *self.radii.last().unwrap()
    }

    /// Natural cubic spline evaluation. Errors instead of extrapolating.
    pub fn density(&self, r: f64) -> Result<f64, AtmosError> {
        let (lo, hi) = (self.r_min(), self.r_max());
        if r < lo || r > hi {
            return Err(AtmosError::OutOfRange { r, min: lo, max: hi });
        }
        // partition_point returns the first index with radius > r, so the
        // interval is [idx-1, idx]; clamp handles r == r_max.
        let idx = self.radii.partition_point(|&x| x <= r).min(self.radii.len() - 1);
        let (i0, i1) = (idx - 1, idx);
        let h = self.radii[i1] - self.radii[i0];
        let a = (self.radii[i1] - r) / h;
        let b = (r - self.radii[i0]) / h;
        Ok(a * self.densities[i0]
            + b * self.densities[i1]
            + ((a * a * a - a) * self.d2[i0] + (b * b * b - b) * self.d2[i1]) * h * h / 6.0)
    }

    /// CSV serialization: header `radius_m,density_kgm3`, one knot per row.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<(), AtmosError> {
        writeln!(w, "radius_m,density_kgm3")?;
        for (r, d) in self.radii.iter().zip(&self.densities) {
            writeln!(w, "{r},{d}")?;
        }
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self, AtmosError> {
        let reader = BufReader::new(r);
        let mut lines = reader.lines();
        let header = lines
            .next()
            .ok_or_else(|| AtmosError::MalformedCsv("empty file".into()))??;
        if header.trim() != "radius_m,density_kgm3" {
            return Err(AtmosError::MalformedCsv(format!("bad header {header:?}")));
        }
        let mut radii = Vec::new();
        let mut densities = Vec::new();
        for (n, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let mut cols = line.split(',');
            let parse = |s: Option<&str>| -> Result<f64, AtmosError> {
                s.and_then(|v| v.trim().parse().ok())
                    .ok_or_else(|| AtmosError::MalformedCsv(format!("row {}: {line:?}", n + 2)))
            };
            radii.push(parse(cols.next())?);
            densities.push(parse(cols.next())?);
        }
        Self::new(radii, densities)
    }
}

/// Second derivatives for a natural cubic spline (tridiagonal forward sweep
/// with back substitution).
fn natural_spline_second_derivatives(xs: &[f64], ys: &[f64]) -> Vec<f64> {
    let n = xs.len();
    let mut d2 = vec![0.0; n];
    let mut u = vec![0.0; n];
    for i in 1..n - 1 {
        let sig = (xs[i] - xs[i - 1]) / (xs[i + 1] - xs[i - 1]);
        let p = sig * d2[i - 1] + 2.0;
        d2[i] = (sig - 1.0) / p;
        let slope_hi = (ys[i + 1] - ys[i]) / (xs[i + 1] - xs[i]);
        let slope_lo = (ys[i] - ys[i - 1]) / (xs[i] - xs[i - 1]);
        u[i] = (6.0 * (slope_hi - slope_lo) / (xs[i + 1] - xs[i - 1]) - sig * u[i - 1]) / p;
    }
    d2[n - 1] = 0.0;
    for i in (0..n - 1).rev() {
        d2[i] = d2[i] * d2[i + 1] + u[i];
    }
    d2
}

/// Least-squares exponential fit over the pooled knots of the given profiles.
///
/// Linear regression of `ln(rho)` against `r - r0`: the slope gives `-1/hs`
/// and the intercept gives `ln(rho0)`.
pub fn fit_exponential(profiles: &[TabulatedProfile], r0: f64) -> Result<ExpModel, AtmosError> {
    if profiles.is_empty() {
        return Err(AtmosError::DegenerateFit("no profiles".into()));
    }
    let mut n = 0.0;
    let (mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0);
    for p in profiles {
        for (&r, &rho) in p.radii.iter().zip(&p.densities) {
            let x = r - r0;
            let y = rho.ln();
            n += 1.0;
            sx += x;
            sy += y;
            sxx += x * x;
            sxy += x * y;
        }
    }
    let det = n * sxx - sx * sx;
    if det.abs() <= f64::EPSILON * n * sxx.max(1.0) {
        return Err(AtmosError::DegenerateFit("all radii identical".into()));
    }
    let slope = (n * sxy - sx * sy) / det;
    let intercept = (sy - slope * sx) / n;
    if slope >= 0.0 {
        return Err(AtmosError::DegenerateFit(format!(
            "non-decaying profile (slope {slope:.3e})"
        )));
    }
    Ok(ExpModel { rho0: intercept.exp(), r0, hs: -1.0 / slope })
}

/// Settings for the surrogate truth-atmosphere generator.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AtmosGenConfig {
    /// Surface reference radius (m); profiles are tabulated in altitude
    /// relative to it.
    pub r_surface: f64,
    /// Altitude grid bottom (m). Negative values keep dispersed trajectories
    /// that undershoot the reference surface inside the table.
    pub alt_min: f64,
    /// Altitude grid top (m). Must cover the entry interface.
    pub alt_max: f64,
    /// Altitude grid spacing (m).
    pub alt_step: f64,
    /// Center surface density for the randomized baseline (kg/m^3).
    pub rho0_center: f64,
    /// Log-normal spread of the baseline surface density.
    pub rho0_log_sigma: f64,
    /// Uniform range of baseline scale heights (m).
    pub hs_range: (f64, f64),
    /// Uniform range of the COSPAR cosine/sine amplitudes.
    pub wave_amp_range: (f64, f64),
    /// Uniform range of the COSPAR wavenumber (rad/m).
    pub omega_range: (f64, f64),
    /// Fractional 1-sigma of the log-normal perturbation at the surface.
    pub pert_sigma_surface: f64,
    /// Fractional 1-sigma of the perturbation at the grid top.
    pub pert_sigma_top: f64,
    /// Altitude correlation length of the perturbation field (m).
    pub pert_corr_length: f64,
    /// Overall perturbation scale; 0 disables perturbations.
    pub pert_amplitude: f64,
}

impl Default for AtmosGenConfig {
    fn default() -> Self {
        Self {
            r_surface: 3.3895e6,
            alt_min: -40e3,
            alt_max: 150e3,
            alt_step: 500.0,
            rho0_center: 0.0158,
            rho0_log_sigma: 0.10,
            hs_range: (9000.0, 9700.0),
            wave_amp_range: (-0.30, 0.30),
            omega_range: (4e-4, 1.2e-3),
            pert_sigma_surface: 0.02,
            pert_sigma_top: 0.45,
            pert_corr_length: 8e3,
            pert_amplitude: 1.0,
        }
    }
}

impl AtmosGenConfig {
    pub fn validate(&self) -> Result<(), AtmosError> {
        let bounds_ok = self.pert_sigma_surface > 0.0
            && self.pert_sigma_surface < 1.0
            && self.pert_sigma_top > 0.0
            && self.pert_sigma_top < 1.0;
        if !bounds_ok {
            return Err(AtmosError::InvalidConfig(
                "perturbation sigmas must lie in (0, 1)".into(),
            ));
        }
        if self.alt_step <= 0.0 || self.alt_max <= self.alt_min + self.alt_step || self.alt_max <= 0.0
        {
            return Err(AtmosError::InvalidConfig("bad altitude grid".into()));
        }
        if self.pert_amplitude < 0.0 {
            return Err(AtmosError::InvalidConfig("negative perturbation amplitude".into()));
        }
        if self.rho0_center <= 0.0 || self.hs_range.0 <= 0.0 || self.hs_range.0 > self.hs_range.1 {
            return Err(AtmosError::InvalidConfig("bad baseline ranges".into()));
        }
        Ok(())
    }

    /// Baseline COSPAR model drawn for `seed`, without the perturbation field.
    pub fn baseline(&self, seed: u64) -> CosparModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.draw_baseline(&mut rng)
    }

    fn draw_baseline(&self, rng: &mut ChaCha8Rng) -> CosparModel {
        let z: f64 = StandardNormal.sample(rng);
        let rho0 = self.rho0_center * (self.rho0_log_sigma * z).exp();
        let hs = rng.random_range(self.hs_range.0..=self.hs_range.1);
        let gamma_rho = rng.random_range(self.wave_amp_range.0..=self.wave_amp_range.1);
        let delta_rho = rng.random_range(self.wave_amp_range.0..=self.wave_amp_range.1);
        let omega_rho = rng.random_range(self.omega_range.0..=self.omega_range.1);
        CosparModel {
            rho0,
            r0: self.r_surface,
            beta_rho: 1.0 / hs,
            gamma_rho,
            omega_rho,
            delta_rho,
        }
    }
}

/// Draw one surrogate truth atmosphere, deterministic in `seed`.
///
/// The baseline is a randomized COSPAR profile; on top of it a smooth
/// altitude-correlated zero-mean Gaussian log field multiplies the density,
/// with pointwise sigma ramping linearly from `pert_sigma_surface` at the
/// surface to `pert_sigma_top` at the grid top.
pub fn sample_truth_atmosphere(
    seed: u64,
    cfg: &AtmosGenConfig,
) -> Result<TabulatedProfile, AtmosError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let baseline = cfg.draw_baseline(&mut rng);

    let n = ((cfg.alt_max - cfg.alt_min) / cfg.alt_step).round() as usize + 1;
    let alts: Vec<f64> = (0..n).map(|i| cfg.alt_min + i as f64 * cfg.alt_step).collect();
    let white: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();

    // Gaussian-kernel smoothing of the white field, renormalized so each knot
    // keeps unit variance regardless of the kernel footprint.
    let half_width = (4.0 * cfg.pert_corr_length / cfg.alt_step).ceil() as isize;
    let kernel: Vec<f64> = (-half_width..=half_width)
        .map(|j| {
            let d = j as f64 * cfg.alt_step;
            (-d * d / (2.0 * cfg.pert_corr_length * cfg.pert_corr_length)).exp()
        })
        .collect();
    let kernel_norm = kernel.iter().map(|k| k * k).sum::<f64>().sqrt();

    let mut radii = Vec::with_capacity(n);
    let mut densities = Vec::with_capacity(n);
    for (i, &alt) in alts.iter().enumerate() {
        let mut g = 0.0;
        let mut w2 = 0.0;
        for (kj, j) in (-half_width..=half_width).enumerate() {
            let idx = i as isize + j;
            if idx >= 0 && (idx as usize) < n {
                g += kernel[kj] * white[idx as usize];
                w2 += kernel[kj] * kernel[kj];
            }
        }
        // Edge knots see a truncated kernel; renormalize with the local norm.
        g /= w2.sqrt().max(kernel_norm * 1e-12);
        // Sigma ramps from the surface value at alt <= 0 to the top value
        // at the grid top; the sqrt shape concentrates variability where the
        // trajectory spends its time.
        let ramp = (alt / cfg.alt_max).clamp(0.0, 1.0).sqrt();
        let sigma = cfg.pert_amplitude
            * (cfg.pert_sigma_surface + (cfg.pert_sigma_top - cfg.pert_sigma_surface) * ramp);
        let r = cfg.r_surface + alt;
        radii.push(r);
        densities.push(baseline.density(r) * (sigma * g).exp());
    }
    TabulatedProfile::new(radii, densities)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::{assert_abs_diff_eq, assert_relative_eq};

    fn spec_exp() -> ExpModel {
        ExpModel { rho0: 0.0158, r0: 3.3895e6, hs: 9354.0 }
    }

    #[test]
    fn exp_density_at_reference_radius() {
        let m = spec_exp();
        assert_eq!(m.density(m.r0), 0.0158);
    }

    #[test]
    fn exp_density_one_scale_height() {
        let m = spec_exp();
        assert_relative_eq!(m.density(m.r0 + m.hs), 0.0158 / std::f64::consts::E, max_relative = 1e-14);
    }

    #[test]
    fn exp_density_scalar_oracle() {
        // 0.02 * exp(-2), evaluated independently.
        let m = ExpModel { rho0: 0.02, r0: 3.39e6, hs: 1.0e4 };
        assert_relative_eq!(m.density(3.41e6), 2.7067056647322543e-3, max_relative = 1e-12);
    }

    #[test]
    fn cospar_degenerates_to_exponential() {
        let e = spec_exp();
        let c = CosparModel {
            rho0: e.rho0,
            r0: e.r0,
            beta_rho: 1.0 / e.hs,
            gamma_rho: 0.0,
            omega_rho: 1e-4,
            delta_rho: 0.0,
        };
        for dr in [0.0, 1e3, 3e4, 1.2e5] {
            assert_relative_eq!(c.density(e.r0 + dr), e.density(e.r0 + dr), max_relative = 1e-14);
        }
    }

    #[test]
    fn cospar_at_reference_radius() {
        let c = CosparModel {
            rho0: 0.0158,
            r0: 3.3895e6,
            beta_rho: 1.07e-4,
            gamma_rho: 0.05,
            omega_rho: 2e-5,
            delta_rho: 0.02,
        };
        assert_relative_eq!(c.density(c.r0), 0.0158 * 0.05f64.exp(), max_relative = 1e-14);
    }

    #[test]
    fn cospar_scalar_oracle() {
        // Independent evaluation of the modified-exponential law at r0 + 50 km.
        let c = CosparModel {
            rho0: 0.0158,
            r0: 3.3895e6,
            beta_rho: 1.07e-4,
            gamma_rho: 0.05,
            omega_rho: 2e-5,
            delta_rho: 0.02,
        };
        assert_relative_eq!(c.density(c.r0 + 5e4), 7.838321060720818e-5, max_relative = 1e-12);
    }

    #[test]
    fn models_strictly_decreasing_without_wave_terms() {
        let e = spec_exp();
        let c = CosparModel {
            rho0: 0.02,
            r0: e.r0,
            beta_rho: 1e-4,
            gamma_rho: 0.0,
            omega_rho: 0.0,
            delta_rho: 0.0,
        };
        let mut prev_e = f64::INFINITY;
        let mut prev_c = f64::INFINITY;
        for i in 0..200 {
            let r = e.r0 + 700.0 * i as f64;
            let (de, dc) = (e.density(r), c.density(r));
            assert!(de > 0.0 && de < prev_e);
            assert!(dc > 0.0 && dc < prev_c);
            prev_e = de;
            prev_c = dc;
        }
    }

    fn exp_profile(m: &ExpModel, alt0: f64, alt1: f64, step: f64) -> TabulatedProfile {
        let n = ((alt1 - alt0) / step) as usize + 1;
        let radii: Vec<f64> = (0..n).map(|i| m.r0 + alt0 + step * i as f64).collect();
        let dens: Vec<f64> = radii.iter().map(|&r| m.density(r)).collect();
        TabulatedProfile::new(radii, dens).unwrap()
    }

    #[test]
    fn fit_recovers_generating_model() {
        let m = spec_exp();
        let p = exp_profile(&m, 0.0, 130e3, 500.0);
        let fit = fit_exponential(&[p], m.r0).unwrap();
        assert_relative_eq!(fit.rho0, m.rho0, max_relative = 1e-10);
        assert_relative_eq!(fit.hs, m.hs, max_relative = 1e-10);
    }

    #[test]
    fn fit_two_profiles_brackets_scale_height() {
        let m1 = ExpModel { rho0: 0.0158, r0: 3.3895e6, hs: 9000.0 };
        let m2 = ExpModel { rho0: 0.0158, r0: 3.3895e6, hs: 10000.0 };
        let p1 = exp_profile(&m1, 0.0, 130e3, 500.0);
        let p2 = exp_profile(&m2, 0.0, 130e3, 500.0);
        let fit = fit_exponential(&[p1.clone(), p2.clone()], m1.r0).unwrap();
        assert!(fit.hs > 9000.0 && fit.hs < 10000.0, "hs = {}", fit.hs);

        // Cross-check against an independent normal-equations solve on the
        // pooled log-density samples.
        let (mut xs, mut ys) = (Vec::new(), Vec::new());
        for p in [&p1, &p2] {
            for (&r, &d) in p.radii().iter().zip(p.densities()) {
                xs.push(r - m1.r0);
                ys.push(d.ln());
            }
        }
        let n = xs.len() as f64;
        let xbar = xs.iter().sum::<f64>() / n;
        let ybar = ys.iter().sum::<f64>() / n;
        let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - xbar) * (y - ybar)).sum();
        let sxx: f64 = xs.iter().map(|x| (x - xbar) * (x - xbar)).sum();
        let slope = sxy / sxx;
        assert_relative_eq!(fit.hs, -1.0 / slope, max_relative = 1e-10);
        assert_relative_eq!(fit.rho0.ln(), ybar - slope * xbar, max_relative = 1e-10);
    }

    #[test]
    fn fit_invariant_to_duplicated_samples() {
        let m = spec_exp();
        let p = exp_profile(&m, 0.0, 100e3, 1000.0);
        let once = fit_exponential(&[p.clone()], m.r0).unwrap();
        let twice = fit_exponential(&[p.clone(), p], m.r0).unwrap();
        assert_relative_eq!(once.hs, twice.hs, max_relative = 1e-12);
        assert_relative_eq!(once.rho0, twice.rho0, max_relative = 1e-12);
    }

    #[test]
    fn one_knot_profile_is_rejected() {
        let err = TabulatedProfile::new(vec![3.4e6], vec![0.01]).unwrap_err();
        assert!(matches!(err, AtmosError::TooFewKnots(1)));
    }

    #[test]
    fn spline_exact_at_knots() {
        let p = sample_truth_atmosphere(11, &AtmosGenConfig::default()).unwrap();
        for (&r, &d) in p.radii().iter().zip(p.densities()) {
            assert_eq!(p.density(r).unwrap(), d);
        }
    }

    #[test]
    fn spline_reproduces_linear_table() {
        let radii: Vec<f64> = (0..40).map(|i| 3.4e6 + 1500.0 * i as f64).collect();
        let dens: Vec<f64> = radii.iter().map(|&r| 5.0 + 2e-6 * (r - 3.4e6)).collect();
        let p = TabulatedProfile::new(radii.clone(), dens).unwrap();
        for i in 0..39 {
            let r = radii[i] + 617.0;
            let expect = 5.0 + 2e-6 * (r - 3.4e6);
            assert_relative_eq!(p.density(r).unwrap(), expect, max_relative = 1e-12);
        }
    }

    /// Independent natural-spline oracle: assemble and solve the full
    /// tridiagonal system by naive Gaussian elimination.
    fn spline_oracle(xs: &[f64], ys: &[f64], x: f64) -> f64 {
        let n = xs.len();
        let mut a = vec![vec![0.0; n]; n];
        let mut b = vec![0.0; n];
        a[0][0] = 1.0;
        a[n - 1][n - 1] = 1.0;
        for i in 1..n - 1 {
            let h0 = xs[i] - xs[i - 1];
            let h1 = xs[i + 1] - xs[i];
            a[i][i - 1] = h0 / 6.0;
            a[i][i] = (h0 + h1) / 3.0;
            a[i][i + 1] = h1 / 6.0;
            b[i] = (ys[i + 1] - ys[i]) / h1 - (ys[i] - ys[i - 1]) / h0;
        }
        // Gaussian elimination without pivoting (diagonally dominant system).
        let mut m = vec![0.0; n];
        for c in 0..n {
            for r in c + 1..n {
                if a[r][c] != 0.0 {
                    let f = a[r][c] / a[c][c];
                    for k in c..n {
                        a[r][k] -= f * a[c][k];
                    }
                    b[r] -= f * b[c];
                }
            }
        }
        for r in (0..n).rev() {
            let mut s = b[r];
            for k in r + 1..n {
                s -= a[r][k] * m[k];
            }
            m[r] = s / a[r][r];
        }
        let j = xs.partition_point(|&v| v <= x).min(n - 1) - 1;
        let h = xs[j + 1] - xs[j];
        let t0 = (xs[j + 1] - x) / h;
        let t1 = (x - xs[j]) / h;
        t0 * ys[j]
            + t1 * ys[j + 1]
            + ((t0 * t0 * t0 - t0) * m[j] + (t1 * t1 * t1 - t1) * m[j + 1]) * h * h / 6.0
    }

    #[test]
    fn spline_matches_independent_oracle_at_midpoint() {
        let xs = vec![3.40e6, 3.41e6, 3.43e6, 3.46e6];
        let ys = vec![1.2e-2, 8.0e-3, 3.5e-3, 9.0e-4];
        let p = TabulatedProfile::new(xs.clone(), ys.clone()).unwrap();
        let mid = 0.5 * (xs[1] + xs[2]);
        assert_relative_eq!(
            p.density(mid).unwrap(),
            spline_oracle(&xs, &ys, mid),
            max_relative = 1e-10
        );
    }

    #[test]
    fn spline_second_derivative_continuity() {
        let p = sample_truth_atmosphere(3, &AtmosGenConfig::default()).unwrap();
        let radii = p.radii().to_vec();
        // Large enough that the difference quotient sits above the roundoff
        // floor even at the kg/m^3-scale knots near the grid bottom.
        let h = 0.1;
        for &r in radii.iter().skip(1).take(radii.len() - 2).step_by(17) {
            let f = |x: f64| p.density(x).unwrap();
            let left = (f(r - 2.0 * h) - 2.0 * f(r - h) + f(r)) / (h * h);
            let right = (f(r) - 2.0 * f(r + h) + f(r + 2.0 * h)) / (h * h);
            // Scaled by the knot value so the check is meaningful at all altitudes.
            assert_abs_diff_eq!(left, right, epsilon = 1e-8 * (1.0 + left.abs().max(right.abs())));
        }
    }

    #[test]
    fn spline_rejects_out_of_range() {
        let p = sample_truth_atmosphere(5, &AtmosGenConfig::default()).unwrap();
        assert!(matches!(p.density(p.r_min() - 1.0), Err(AtmosError::OutOfRange { .. })));
        assert!(matches!(p.density(p.r_max() + 1.0), Err(AtmosError::OutOfRange { .. })));
    }

    #[test]
    fn generator_is_deterministic() {
        let cfg = AtmosGenConfig::default();
        let a = sample_truth_atmosphere(42, &cfg).unwrap();
        let b = sample_truth_atmosphere(42, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_amplitude_reproduces_baseline() {
        let cfg = AtmosGenConfig { pert_amplitude: 0.0, ..AtmosGenConfig::default() };
        let p = sample_truth_atmosphere(9, &cfg).unwrap();
        let base = cfg.baseline(9);
        for (&r, &d) in p.radii().iter().zip(p.densities()) {
            assert_eq!(d, base.density(r));
        }
    }

    #[test]
    fn generator_spread_at_100km_in_expected_band() {
        let cfg = AtmosGenConfig::default();
        let r_query = cfg.r_surface + 100e3;
        let n = 1000;
        let samples: Vec<f64> = (0..n)
            .map(|s| sample_truth_atmosphere(s as u64, &cfg).unwrap().density(r_query).unwrap())
            .collect();
        let mean = samples.iter().sum::<f64>() / n as f64;
        let var = samples.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / (n - 1) as f64;
        let ratio = var.sqrt() / mean;
        assert!((0.25..=0.65).contains(&ratio), "std/mean at 100 km = {ratio:.3}");
    }

    #[test]
    fn log_perturbation_field_has_zero_mean() {
        let cfg = AtmosGenConfig::default();
        let cfg0 = AtmosGenConfig { pert_amplitude: 0.0, ..cfg.clone() };
        let r_query = cfg.r_surface + 80e3;
        let n = 600;
        let logs: Vec<f64> = (0..n)
            .map(|s| {
                let pert = sample_truth_atmosphere(s as u64, &cfg).unwrap();
                let base = sample_truth_atmosphere(s as u64, &cfg0).unwrap();
                (pert.density(r_query).unwrap() / base.density(r_query).unwrap()).ln()
            })
            .collect();
        let mean = logs.iter().sum::<f64>() / n as f64;
        let var = logs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
        let se = (var / n as f64).sqrt();
        assert!(mean.abs() < 3.0 * se, "mean {mean:.4e} vs 3*SE {:.4e}", 3.0 * se);
    }

    #[test]
    fn profile_csv_roundtrip() {
        let p = sample_truth_atmosphere(7, &AtmosGenConfig::default()).unwrap();
        let mut buf = Vec::new();
        p.write_csv(&mut buf).unwrap();
        let q = TabulatedProfile::read_csv(&buf[..]).unwrap();
        assert_eq!(p, q);
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            /// Positive and strictly decreasing whenever the wave terms are
            /// off and the decay rate is positive.
            #[test]
            fn decaying_models_positive_and_monotone(
                rho0 in 1e-4f64..0.1,
                hs in 3e3f64..2e4,
                dr0 in 0.0f64..1.4e5,
                step in 1.0f64..5e4,
            ) {
                let e = ExpModel { rho0, r0: 3.3895e6, hs };
                let c = CosparModel {
                    rho0,
                    r0: e.r0,
                    beta_rho: 1.0 / hs,
                    gamma_rho: 0.0,
                    omega_rho: 0.0,
                    delta_rho: 0.0,
                };
                let (r0, r1) = (e.r0 + dr0, e.r0 + dr0 + step);
                prop_assert!(e.density(r0) > 0.0);
                prop_assert!(e.density(r1) > 0.0);
                prop_assert!(e.density(r1) < e.density(r0));
                prop_assert!(c.density(r1) < c.density(r0));
                prop_assert!((c.density(r0) / e.density(r0) - 1.0).abs() < 1e-12);
            }

            /// The pooled log-space fit ignores sample duplication.
            #[test]
            fn fit_duplication_invariance(rho0 in 1e-3f64..0.05, hs in 5e3f64..1.5e4) {
                let m = ExpModel { rho0, r0: 3.3895e6, hs };
                let p = exp_profile(&m, 0.0, 120e3, 2e3);
                let once = fit_exponential(&[p.clone()], m.r0).unwrap();
                let thrice = fit_exponential(&[p.clone(), p.clone(), p], m.r0).unwrap();
                prop_assert!((once.hs - thrice.hs).abs() <= 1e-9 * once.hs);
                prop_assert!((once.rho0 - thrice.rho0).abs() <= 1e-9 * once.rho0);
            }
        }
    }
}
