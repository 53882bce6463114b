//! Evaluation utilities: node-level RMSE, analytic CRPS for normal and
//! Gaussian-mixture forecasts, wall-clock timing, and the grid-searched
//! power-law regression used to estimate discretization convergence rates.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::tables;
use crate::{Error, Result};

/// Evaluation summary for one fitted model on one test set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    /// Root mean squared error over all (test input, node) entries.
    pub rmse: f64,
    /// CRPS averaged over all (test input, node) entries.
    pub mean_crps: f64,
    /// Wall-clock fitting time of the run that produced the model.
    pub fit_seconds: f64,
    /// Wall-clock prediction time for one full test sweep, in milliseconds,
    /// median of repeats.
    pub predict_ms_per_run: f64,
    /// RMSE per node over test inputs, when requested.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_node_rmse: Option<Vec<f64>>,
}

/// Root mean squared error between two equally shaped matrices, over all
/// entries.
pub fn rmse(truth: &DMatrix<f64>, pred: &DMatrix<f64>) -> Result<f64> {
    if truth.shape() != pred.shape() {
        return Err(Error::InvalidArgument(format!(
            "rmse shapes differ: {}x{} vs {}x{}",
            truth.nrows(),
            truth.ncols(),
            pred.nrows(),
            pred.ncols()
        )));
    }
    if truth.is_empty() {
        return Err(Error::InvalidArgument("rmse of empty matrices".into()));
    }
    let sum_sq: f64 = truth
        .iter()
        .zip(pred.iter())
        .map(|(t, p)| (t - p) * (t - p))
        .sum();
    Ok((sum_sq / truth.len() as f64).sqrt())
}

/// RMSE of each row of `truth` against the same row of `pred`.
pub fn per_row_rmse(truth: &DMatrix<f64>, pred: &DMatrix<f64>) -> Result<Vec<f64>> {
    if truth.shape() != pred.shape() {
        return Err(Error::InvalidArgument(format!(
            "rmse shapes differ: {}x{} vs {}x{}",
            truth.nrows(),
            truth.ncols(),
            pred.nrows(),
            pred.ncols()
        )));
    }
    Ok((0..truth.nrows())
        .map(|j| {
            let sum_sq: f64 = (0..truth.ncols())
                .map(|i| {
                    let d = truth[(j, i)] - pred[(j, i)];
                    d * d
                })
                .sum();
            (sum_sq / truth.ncols() as f64).sqrt()
        })
        .collect())
}

fn std_normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

fn std_normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)
}

/// `A(m, v) = E|X - (-m)|` for `X ~ N(0, v)`: the expected absolute
/// difference appearing in the closed-form CRPS. `v = 0` degenerates
/// to `|m|`.
fn expected_abs(m: f64, var: f64) -> f64 {
    if var == 0.0 {
        return m.abs();
    }
    let s = var.sqrt();
    let z = m / s;
    m * (2.0 * std_normal_cdf(z) - 1.0) + 2.0 * s * std_normal_pdf(z)
}

/// Continuous ranked probability score of a normal forecast `N(mu, sigma^2)`
/// against the outcome `y`. `sigma = 0` degenerates to the absolute error.
pub fn crps_normal(mu: f64, sigma: f64, y: f64) -> f64 {
    assert!(
        sigma.is_finite() && sigma >= 0.0,
        "sigma is {sigma}; it must be nonnegative and finite"
    );
    if sigma == 0.0 {
        return (y - mu).abs();
    }
    let z = (y - mu) / sigma;
    // 1/sqrt(pi) written through the library constant 2/sqrt(pi)
    let inv_sqrt_pi = std::f64::consts::FRAC_2_SQRT_PI / 2.0;
    sigma * (z * (2.0 * std_normal_cdf(z) - 1.0) + 2.0 * std_normal_pdf(z) - inv_sqrt_pi)
}

/// CRPS of a Gaussian-mixture forecast against the outcome `y`:
/// `sum_i w_i A(y-mu_i, v_i) - 1/2 sum_{i,j} w_i w_j A(mu_i-mu_j, v_i+v_j)`.
/// Weights must be nonnegative and sum to one within 1e-10.
pub fn crps_mixture(weights: &[f64], means: &[f64], variances: &[f64], y: f64) -> f64 {
    assert!(
        weights.len() == means.len() && weights.len() == variances.len(),
        "mixture arrays disagree: {} weights, {} means, {} variances",
        weights.len(),
        means.len(),
        variances.len()
    );
    assert!(!weights.is_empty(), "empty mixture");
    assert!(
        weights.iter().all(|w| *w >= 0.0 && w.is_finite()),
        "weights must be nonnegative and finite"
    );
    let total: f64 = weights.iter().sum();
    assert!(
        (total - 1.0).abs() <= 1e-10,
        "weights sum to {total}, not 1"
    );
    assert!(
        variances.iter().all(|v| *v >= 0.0 && v.is_finite()),
        "variances must be nonnegative and finite"
    );
    let k = weights.len();
    let mut first = 0.0;
    for i in 0..k {
        first += weights[i] * expected_abs(y - means[i], variances[i]);
    }
    let mut second = 0.0;
    for i in 0..k {
        for j in 0..k {
            second += weights[i]
                * weights[j]
                * expected_abs(means[i] - means[j], variances[i] + variances[j]);
        }
    }
    // analytically nonnegative; clamp round-off in degenerate limits
    (first - 0.5 * second).max(0.0)
}

/// One measured point of the discretization-error grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConvergencePoint {
    pub h_x: f64,
    pub h_t: f64,
    pub error: f64,
}

/// Result of the grid-searched two-term power-law regression
/// `E = a * h_X^nu + b * h_T^(r+1)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConvergenceFit {
    pub a: f64,
    pub b: f64,
    pub nu: u32,
    pub r: u32,
    pub r_squared: f64,
}

/// Grid of input-resolution exponents searched by default.
pub const DEFAULT_NU_GRID: [u32; 6] = [1, 2, 3, 4, 5, 6];
/// Grid of mesh-rate parameters searched by default (`h_T` enters as
/// `r + 1`).
pub const DEFAULT_R_GRID: [u32; 5] = [0, 1, 2, 3, 4];

/// Fits `E = a * h_X^nu + b * h_T^(r+1)` by least squares (no intercept) for
/// every integer pair on the grids and returns the pair with the highest
/// R-squared; ties keep the first pair in grid order.
pub fn convergence_regression(
    points: &[ConvergencePoint],
    nu_grid: &[u32],
    r_grid: &[u32],
) -> Result<ConvergenceFit> {
    if points.len() < 4 {
        return Err(Error::InvalidArgument(format!(
            "convergence regression needs at least 4 grid points, got {}",
            points.len()
        )));
    }
    if nu_grid.is_empty() || r_grid.is_empty() {
        return Err(Error::InvalidArgument(
            "empty exponent grid for convergence regression".into(),
        ));
    }
    for p in points {
        if !(p.h_x > 0.0 && p.h_t > 0.0) || !p.error.is_finite() || p.error < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "bad convergence point (h_x={}, h_t={}, error={})",
                p.h_x, p.h_t, p.error
            )));
        }
    }
    let errors = DVector::from_iterator(points.len(), points.iter().map(|p| p.error));
    let mean = errors.sum() / errors.len() as f64;
    let ss_tot: f64 = errors.iter().map(|e| (e - mean) * (e - mean)).sum();
    if ss_tot == 0.0 {
        return Err(Error::NumericalDegeneracy(
            "convergence regression is degenerate: the errors show no variation".into(),
        ));
    }

    let mut best: Option<ConvergenceFit> = None;
    for &nu in nu_grid {
        for &r in r_grid {
            let design = DMatrix::from_fn(points.len(), 2, |i, c| {
                if c == 0 {
                    points[i].h_x.powi(nu as i32)
                } else {
                    points[i].h_t.powi(r as i32 + 1)
                }
            });
            let svd = design.clone().svd(true, true);
            let coeff = svd
                .solve(&errors, 1e-12)
                .map_err(|e| Error::NumericalDegeneracy(format!("least squares failed: {e}")))?;
            let residual = &design * &coeff - &errors;
            let ss_res: f64 = residual.iter().map(|v| v * v).sum();
            let r_squared = 1.0 - ss_res / ss_tot;
            if best.as_ref().is_none_or(|b| r_squared > b.r_squared) {
                best = Some(ConvergenceFit {
                    a: coeff[0],
                    b: coeff[1],
                    nu,
                    r,
                    r_squared,
                });
            }
        }
    }
    Ok(best.expect("non-empty grids produce a candidate"))
}

/// Header used by the convergence-grid CSV exchange format.
pub const CONVERGENCE_HEADER: [&str; 3] = ["h_X", "h_T", "error"];

/// Writes a convergence grid as CSV with columns `h_X, h_T, error`.
pub fn write_convergence_csv(path: &Path, points: &[ConvergencePoint]) -> Result<()> {
    let m = DMatrix::from_fn(points.len(), 3, |i, c| match c {
        0 => points[i].h_x,
        1 => points[i].h_t,
        _ => points[i].error,
    });
    tables::write_f64_table(path, Some(&CONVERGENCE_HEADER), &m)
}

/// Reads a convergence grid written by [`write_convergence_csv`].
pub fn read_convergence_csv(path: &Path) -> Result<Vec<ConvergencePoint>> {
    let m = tables::read_f64_table(path)?;
    if m.ncols() != 3 {
        return Err(Error::format(
            &path.display().to_string(),
            &format!("expected 3 columns (h_X, h_T, error), found {}", m.ncols()),
        ));
    }
    Ok((0..m.nrows())
        .map(|i| ConvergencePoint {
            h_x: m[(i, 0)],
            h_t: m[(i, 1)],
            error: m[(i, 2)],
        })
        .collect())
}

/// Wall-clock seconds of `op`, median of three repeats.
pub fn median_secs_of_three(mut op: impl FnMut()) -> f64 {
    let mut times = [0.0_f64; 3];
    for slot in &mut times {
        let start = std::time::Instant::now();
        op();
        *slot = start.elapsed().as_secs_f64();
    }
    times.sort_by(|a, b| a.partial_cmp(b).expect("finite timings"));
    times[1]
}
