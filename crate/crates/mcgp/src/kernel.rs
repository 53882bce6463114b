//! Anisotropic Matern-5/2 correlation, correlation-matrix assembly with a
//! nugget, and Cholesky-based factorization shared by all GP fitting.
//!
//! The correlation between two points is a function of the scaled distance
//! `t = sqrt(sum_k ((x1_k - x2_k) / theta_k)^2)`; the smoothness is fixed at
//! 5/2, for which the Matern family has the closed form
//! `(1 + sqrt(5) t + (5/3) t^2) exp(-sqrt(5) t)`. Correlation matrices get a
//! small positive nugget added to the diagonal so factorizations stay
//! positive-definite even for coincident design points.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Per-dimension positive lengthscales of the correlation function.
///
/// The invariant (every component strictly positive and finite) is enforced
/// at construction, so downstream code can divide by components freely.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Lengthscales(Vec<f64>);

impl Lengthscales {
    /// Validates and wraps per-dimension lengthscales.
    pub fn new(theta: Vec<f64>) -> Result<Self> {
        if theta.is_empty() {
            return Err(Error::InvalidArgument(
                "lengthscales must have at least one dimension".into(),
            ));
        }
        for (i, &t) in theta.iter().enumerate() {
            if !t.is_finite() || t <= 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "lengthscale component {i} is {t}; it must be positive and finite"
                )));
            }
        }
        Ok(Self(theta))
    }

    /// Number of input dimensions.
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    /// Components as a slice.
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

impl TryFrom<Vec<f64>> for Lengthscales {
    type Error = Error;

    fn try_from(theta: Vec<f64>) -> Result<Self> {
        Lengthscales::new(theta)
    }
}

impl From<Lengthscales> for Vec<f64> {
    fn from(theta: Lengthscales) -> Vec<f64> {
        theta.0
    }
}

/// Matern-5/2 correlation of the scaled distance `t >= 0`.
pub(crate) fn matern52_scaled(t: f64) -> f64 {
    let u = 5.0_f64.sqrt() * t;
    (1.0 + u + (5.0 / 3.0) * t * t) * (-u).exp()
}

// The scaled norm accumulates per-dimension ratios before the square root;
// anisotropy requires scaling each coordinate difference separately.
fn scaled_dist(x1: &[f64], x2: &[f64], theta: &Lengthscales) -> f64 {
    let mut sum = 0.0;
    for ((a, b), t) in x1.iter().zip(x2).zip(theta.as_slice()) {
        let d = (a - b) / t;
        sum += d * d;
    }
    sum.sqrt()
}

fn check_point(name: &str, x: &[f64], dim: usize) -> Result<()> {
    if x.len() != dim {
        return Err(Error::InvalidArgument(format!(
            "{name} has dimension {}, expected {dim}",
            x.len()
        )));
    }
    if let Some(bad) = x.iter().find(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "{name} contains non-finite coordinate {bad}"
        )));
    }
    Ok(())
}

/// Matern-5/2 correlation between two points; symmetric in its arguments and
/// in `(0, 1]`, equal to 1 exactly when the scaled distance is 0.
pub fn matern52(x1: &[f64], x2: &[f64], theta: &Lengthscales) -> Result<f64> {
    check_point("x1", x1, theta.dim())?;
    check_point("x2", x2, theta.dim())?;
    Ok(matern52_scaled(scaled_dist(x1, x2, theta)))
}

fn scaled_dist_rows(x: &DMatrix<f64>, i: usize, k: usize, theta: &Lengthscales) -> f64 {
    let mut sum = 0.0;
    for (j, t) in theta.as_slice().iter().enumerate() {
        let d = (x[(i, j)] - x[(k, j)]) / t;
        sum += d * d;
    }
    sum.sqrt()
}

fn check_design(x: &DMatrix<f64>, theta: &Lengthscales) -> Result<()> {
    if x.nrows() == 0 {
        return Err(Error::InvalidArgument("design has no rows".into()));
    }
    if x.ncols() != theta.dim() {
        return Err(Error::InvalidArgument(format!(
            "design has {} columns but lengthscales have dimension {}",
            x.ncols(),
            theta.dim()
        )));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument(
            "design contains non-finite entries".into(),
        ));
    }
    Ok(())
}

/// Correlation matrix of a design (rows are points) with `nugget` added to
/// the diagonal. Assembled once per unordered pair, so the result is exactly
/// symmetric.
pub fn corr_matrix(x: &DMatrix<f64>, theta: &Lengthscales, nugget: f64) -> Result<DMatrix<f64>> {
    check_design(x, theta)?;
    if !nugget.is_finite() || nugget <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "nugget is {nugget}; it must be positive and finite"
        )));
    }
    let n = x.nrows();
    let mut m = DMatrix::zeros(n, n);
    for i in 0..n {
        m[(i, i)] = 1.0 + nugget;
        for k in (i + 1)..n {
            let v = matern52_scaled(scaled_dist_rows(x, i, k, theta));
            m[(i, k)] = v;
            m[(k, i)] = v;
        }
    }
    Ok(m)
}

/// Correlations between one query point and every design row.
///
/// The jitter is part of the correlation model: a design row at exactly zero
/// distance correlates as `1 + nugget`, matching the training diagonal, so
/// posterior means reproduce training data exactly at training inputs.
pub fn cross_corr(
    x: &DMatrix<f64>,
    point: &[f64],
    theta: &Lengthscales,
    nugget: f64,
) -> Result<DVector<f64>> {
    check_design(x, theta)?;
    check_point("query point", point, theta.dim())?;
    let mut v = DVector::zeros(x.nrows());
    for i in 0..x.nrows() {
        let mut sum = 0.0;
        for (j, t) in theta.as_slice().iter().enumerate() {
            let d = (x[(i, j)] - point[j]) / t;
            sum += d * d;
        }
        v[i] = matern52_scaled(sum.sqrt());
        if sum == 0.0 {
            v[i] += nugget;
        }
    }
    Ok(v)
}

/// Cached lower-triangular Cholesky factor of a correlation matrix, with the
/// log-determinant and the nugget the matrix was assembled with.
///
/// Immutable after construction; solves and quadratic forms are pure reads.
#[derive(Debug, Clone)]
pub struct CorrelationFactorization {
    dim: usize,
    lower: DMatrix<f64>,
    log_det: f64,
    nugget: f64,
}

/// Cholesky-factorizes a symmetric positive-definite matrix.
///
/// The nugget is assumed to be already applied; it is recorded on the result
/// for provenance. On breakdown the error carries the 0-based index and value
/// of the failing pivot.
pub fn factorize(m: &DMatrix<f64>, nugget: f64) -> Result<CorrelationFactorization> {
    let n = m.nrows();
    if n == 0 || m.ncols() != n {
        return Err(Error::InvalidArgument(format!(
            "factorize expects a square matrix, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    let mut l = m.lower_triangle();
    let mut log_det = 0.0;
    for j in 0..n {
        let mut d = l[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !d.is_finite() || d <= 0.0 {
            return Err(Error::NotPositiveDefinite { pivot: j, value: d });
        }
        let root = d.sqrt();
        l[(j, j)] = root;
        log_det += root.ln();
        for i in (j + 1)..n {
            let mut s = l[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / root;
        }
    }
    Ok(CorrelationFactorization {
        dim: n,
        lower: l,
        log_det: 2.0 * log_det,
        nugget,
    })
}

impl CorrelationFactorization {
    /// Matrix dimension n.
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// log det of the factorized matrix (twice the sum of log pivot roots).
    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    /// Nugget recorded at factorization time.
    pub fn nugget(&self) -> f64 {
        self.nugget
    }

    /// The lower-triangular factor L with M = L L^T.
    pub fn lower(&self) -> &DMatrix<f64> {
        &self.lower
    }

    fn forward_sub(&self, v: &DVector<f64>) -> DVector<f64> {
        let n = self.dim;
        let mut y = v.clone();
        for i in 0..n {
            for k in 0..i {
                let yk = y[k];
                y[i] -= self.lower[(i, k)] * yk;
            }
            y[i] /= self.lower[(i, i)];
        }
        y
    }

    fn back_sub(&self, y: &mut DVector<f64>) {
        let n = self.dim;
        for i in (0..n).rev() {
            for k in (i + 1)..n {
                let yk = y[k];
                y[i] -= self.lower[(k, i)] * yk;
            }
            y[i] /= self.lower[(i, i)];
        }
    }

    /// Solves M x = v.
    pub fn solve(&self, v: &DVector<f64>) -> DVector<f64> {
        assert_eq!(v.len(), self.dim, "solve: rhs length mismatch");
        let mut y = self.forward_sub(v);
        self.back_sub(&mut y);
        y
    }

    /// Solves M X = B column by column.
    pub fn solve_matrix(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        assert_eq!(b.nrows(), self.dim, "solve_matrix: rhs row mismatch");
        let mut out = DMatrix::zeros(b.nrows(), b.ncols());
        for j in 0..b.ncols() {
            let col = self.solve(&DVector::from_column_slice(b.column(j).as_slice()));
            out.set_column(j, &col);
        }
        out
    }

    /// Quadratic form v^T M^{-1} v, computed as the squared norm of the
    /// forward-substituted vector so it is nonnegative by construction.
    pub fn quad_form(&self, v: &DVector<f64>) -> f64 {
        assert_eq!(v.len(), self.dim, "quad_form: vector length mismatch");
        self.forward_sub(v).norm_squared()
    }
}
