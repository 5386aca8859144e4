//! Sigma-point generation and generic unscented transforms.

use super::FilterError;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

/// Unscented transform scaling constants for a given augmented dimension.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct UtConfig {
    pub alpha: f64,
    pub beta: f64,
    pub kappa: f64,
    /// Augmented state dimension L.
    pub dim: usize,
}

impl UtConfig {
    /// Constants used throughout: `alpha = 1`, `beta = 2`, `kappa = 3 - L`.
    pub fn standard(dim: usize) -> Self {
        Self { alpha: 1.0, beta: 2.0, kappa: 3.0 - dim as f64, dim }
    }

    /// `lambda = alpha^2 (L + kappa) - L`.
    pub fn lambda(&self) -> f64 {
        let l = self.dim as f64;
        self.alpha * self.alpha * (l + self.kappa) - l
    }

    pub fn validate(&self) -> Result<(), FilterError> {
        if self.dim == 0 {
            return Err(FilterError::DimensionMismatch("zero-dimensional transform".into()));
        }
        if self.dim as f64 + self.lambda() <= 0.0 {
            return Err(FilterError::DimensionMismatch(format!(
                "L + lambda = {} must be positive",
                self.dim as f64 + self.lambda()
            )));
        }
        Ok(())
    }

    /// Mean and covariance weights for the 2L+1 points.
    pub fn weights(&self) -> (Vec<f64>, Vec<f64>) {
        let l = self.dim as f64;
        let lambda = self.lambda();
        let n = 2 * self.dim + 1;
        let mut w_m = vec![1.0 / (2.0 * (l + lambda)); n];
        let mut w_c = w_m.clone();
        w_m[0] = lambda / (l + lambda);
        w_c[0] = w_m[0] + 1.0 - self.alpha * self.alpha + self.beta;
        (w_m, w_c)
    }
}

/// A 2L+1 sigma-point set with its weights.
#[derive(Debug, Clone)]
pub struct SigmaPoints {
    pub points: Vec<DVector<f64>>,
    pub w_m: Vec<f64>,
    pub w_c: Vec<f64>,
    /// True when the covariance needed a diagonal jitter retry to factor.
    pub jittered: bool,
}

/// Deterministic sigma points: the mean plus/minus the columns of the lower
/// Cholesky factor of `(L + lambda) P`. The covariance is symmetrized first;
/// one jitter retry (`1e-12 * trace / L` on the diagonal) is attempted before
/// giving up.
pub fn sigma_points(
    x: &DVector<f64>,
    p: &DMatrix<f64>,
    ut: &UtConfig,
) -> Result<SigmaPoints, FilterError> {
    ut.validate()?;
    let l = ut.dim;
    if x.len() != l || p.nrows() != l || p.ncols() != l {
        return Err(FilterError::DimensionMismatch(format!(
            "state {} / covariance {}x{} vs configured L = {l}",
            x.len(),
            p.nrows(),
            p.ncols()
        )));
    }
    let scale = l as f64 + ut.lambda();
    let sym = symmetrize(p);

    let (factor, jittered) = match nalgebra::Cholesky::new(&sym * scale) {
        Some(c) => (c, false),
        None => {
            let jitter = 1e-12 * sym.trace() / l as f64;
            let mut retry = sym.clone();
            for i in 0..l {
                retry[(i, i)] += jitter;
            }
            match nalgebra::Cholesky::new(retry * scale) {
                Some(c) => (c, true),
                None => return Err(FilterError::CovarianceNotPsd),
            }
        }
    };
    let root = factor.l();

    let mut points = Vec::with_capacity(2 * l + 1);
    points.push(x.clone());
    for i in 0..l {
        points.push(x + root.column(i));
    }
    for i in 0..l {
        points.push(x - root.column(i));
    }
    let (w_m, w_c) = ut.weights();
    Ok(SigmaPoints { points, w_m, w_c, jittered })
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn weighted_mean(points: &[DVector<f64>], w: &[f64]) -> DVector<f64> {
    let mut mean = DVector::zeros(points[0].len());
    for (p, &wi) in points.iter().zip(w) {
        mean.axpy(wi, p, 1.0);
    }
    mean
}

pub fn weighted_cov(points: &[DVector<f64>], mean: &DVector<f64>, w: &[f64]) -> DMatrix<f64> {
    let n = mean.len();
    let mut cov = DMatrix::zeros(n, n);
    for (p, &wi) in points.iter().zip(w) {
        let d = p - mean;
        cov.ger(wi, &d, &d, 1.0);
    }
    symmetrize(&cov)
}

pub fn weighted_cross_cov(
    xs: &[DVector<f64>],
    x_mean: &DVector<f64>,
    ys: &[DVector<f64>],
    y_mean: &DVector<f64>,
    w: &[f64],
) -> DMatrix<f64> {
    let mut cov = DMatrix::zeros(x_mean.len(), y_mean.len());
    for ((x, y), &wi) in xs.iter().zip(ys).zip(w) {
        cov.ger(wi, &(x - x_mean), &(y - y_mean), 1.0);
    }
    cov
}

/// Result of a generic unscented time update.
pub struct PropagateResult {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub jittered: bool,
}

/// Propagate `(x, P)` through `f` and add `Q`.
pub fn unscented_propagate<F>(
    x: &DVector<f64>,
    p: &DMatrix<f64>,
    q: &DMatrix<f64>,
    ut: &UtConfig,
    f: F,
) -> Result<PropagateResult, FilterError>
where
    F: Fn(&DVector<f64>) -> Result<DVector<f64>, FilterError>,
{
    let sp = sigma_points(x, p, ut)?;
    let propagated: Vec<DVector<f64>> = sp.points.iter().map(&f).collect::<Result<_, _>>()?;
    let mean = weighted_mean(&propagated, &sp.w_m);
    let cov = weighted_cov(&propagated, &mean, &sp.w_c) + q;
    Ok(PropagateResult { mean, cov: symmetrize(&cov), jittered: sp.jittered })
}

/// Result of a generic unscented measurement update.
pub struct UpdateResult {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub innovation: DVector<f64>,
    /// Innovation covariance `P_yy` (measurement noise included).
    pub p_yy: DMatrix<f64>,
    pub jittered: bool,
}

/// Standard unscented Kalman update over every state component.
pub fn unscented_update<H>(
    x: &DVector<f64>,
    p: &DMatrix<f64>,
    y: &DVector<f64>,
    r: &DMatrix<f64>,
    ut: &UtConfig,
    h: H,
) -> Result<UpdateResult, FilterError>
where
    H: Fn(&DVector<f64>) -> DVector<f64>,
{
    let sp = sigma_points(x, p, ut)?;
    let predicted: Vec<DVector<f64>> = sp.points.iter().map(&h).collect();
    let y_hat = weighted_mean(&predicted, &sp.w_m);
    let p_yy = weighted_cov(&predicted, &y_hat, &sp.w_c) + r;
    let p_xy = weighted_cross_cov(&sp.points, x, &predicted, &y_hat, &sp.w_c);

    let chol =
        nalgebra::Cholesky::new(symmetrize(&p_yy)).ok_or(FilterError::SingularInnovation)?;
    // K = P_xy P_yy^-1, via P_yy K^T = P_xy^T.
    let gain = chol.solve(&p_xy.transpose()).transpose();

    let innovation = y - &y_hat;
    let mean = x + &gain * &innovation;
    let cov = p - &gain * &p_yy * gain.transpose();
    Ok(UpdateResult { mean, cov: symmetrize(&cov), innovation, p_yy, jittered: sp.jittered })
}
