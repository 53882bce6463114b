//! Single-output GP machinery: weighted profile negative log-likelihood,
//! derivative-free lengthscale optimization, the closed-form scale update,
//! and the conditional posterior mean/variance.
//!
//! All fitting here works on the profile form of the zero-mean GP marginal
//! likelihood: the scale tau^2 is maximized out analytically, leaving
//! `log|Phi_theta| + n log sum_j w_j b_j^T Phi_theta^{-1} b_j` to minimize
//! over the lengthscales theta. The weighted sum of quadratic forms equals
//! `trace(Phi^{-1} G)` with `G = sum_j w_j b_j b_j^T`, so the Gram matrix is
//! accumulated once and each objective evaluation costs O(n^3) regardless of
//! the number of output vectors.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::kernel::{self, CorrelationFactorization, Lengthscales};
use crate::{Error, Result};

/// Settings for the lengthscale search.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimizerConfig {
    /// Number of simplex restarts; the first always starts at the caller's
    /// initial point, the rest are drawn uniformly in log-bounds.
    pub multistarts: usize,
    /// Objective-evaluation budget per restart.
    pub max_evals: usize,
    /// Seed for the restart draws.
    pub seed: u64,
    /// Nugget added to correlation diagonals during objective evaluation.
    pub nugget: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            multistarts: 5,
            max_evals: 200,
            seed: 0,
            nugget: crate::DEFAULT_NUGGET,
        }
    }
}

/// A fitted single-output GP: lengthscales, scale, and the cached
/// factorization of its training correlation matrix. Immutable.
#[derive(Debug, Clone)]
pub struct GpFit {
    theta: Lengthscales,
    tau_sq: f64,
    fact: CorrelationFactorization,
    design: DMatrix<f64>,
}

impl GpFit {
    /// Builds the fit, assembling and factorizing the correlation matrix.
    pub fn new(
        design: DMatrix<f64>,
        theta: Lengthscales,
        tau_sq: f64,
        nugget: f64,
    ) -> Result<Self> {
        if !tau_sq.is_finite() || tau_sq <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "tau_sq is {tau_sq}; it must be positive and finite"
            )));
        }
        let phi = kernel::corr_matrix(&design, &theta, nugget)?;
        let fact = kernel::factorize(&phi, nugget)?;
        Ok(GpFit {
            theta,
            tau_sq,
            fact,
            design,
        })
    }

    pub fn theta(&self) -> &Lengthscales {
        &self.theta
    }

    pub fn tau_sq(&self) -> f64 {
        self.tau_sq
    }

    pub fn design(&self) -> &DMatrix<f64> {
        &self.design
    }

    pub fn factorization(&self) -> &CorrelationFactorization {
        &self.fact
    }
}

fn check_outputs(b_cols: &[DVector<f64>], weights: &[f64], n: usize) -> Result<()> {
    if b_cols.is_empty() {
        return Err(Error::InvalidArgument("no output vectors supplied".into()));
    }
    if weights.len() != b_cols.len() {
        return Err(Error::InvalidArgument(format!(
            "{} output vectors but {} weights",
            b_cols.len(),
            weights.len()
        )));
    }
    for (j, b) in b_cols.iter().enumerate() {
        if b.len() != n {
            return Err(Error::InvalidArgument(format!(
                "output vector {j} has length {}, expected {n}",
                b.len()
            )));
        }
    }
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(Error::InvalidArgument(
            "weights must be nonnegative and finite".into(),
        ));
    }
    Ok(())
}

/// Weighted Gram matrix G = sum_j w_j b_j b_j^T.
pub(crate) fn weighted_gram(b_cols: &[DVector<f64>], weights: &[f64], n: usize) -> DMatrix<f64> {
    let mut g = DMatrix::zeros(n, n);
    for (b, &w) in b_cols.iter().zip(weights) {
        if w > 0.0 {
            g.ger(w, b, b, 1.0);
        }
    }
    g
}

/// trace(M^{-1} G), clamped at 0 (it is a weighted sum of quadratic forms).
pub(crate) fn trace_solve(fact: &CorrelationFactorization, gram: &DMatrix<f64>) -> f64 {
    fact.solve_matrix(gram).trace().max(0.0)
}

/// The M-step objective `log|Phi_theta| + n log trace(Phi_theta^{-1} G)`
/// evaluated from a precomputed Gram matrix.
pub(crate) fn profile_nll_gram(
    theta: &Lengthscales,
    x: &DMatrix<f64>,
    gram: &DMatrix<f64>,
    nugget: f64,
) -> Result<f64> {
    let phi = kernel::corr_matrix(x, theta, nugget)?;
    let fact = kernel::factorize(&phi, nugget)?;
    let s = trace_solve(&fact, gram);
    if s <= 0.0 {
        return Err(Error::DegenerateCluster(
            "all weighted output vectors are zero; profile likelihood undefined".into(),
        ));
    }
    Ok(fact.log_det() + x.nrows() as f64 * s.ln())
}

/// Weighted profile negative log-likelihood
/// `log|Phi_theta| + n log sum_j w_j b_j^T Phi_theta^{-1} b_j`.
///
/// For a single vector with weight 1 this is the standard profile negative
/// log-likelihood up to an additive constant.
pub fn weighted_profile_nll(
    theta: &Lengthscales,
    x: &DMatrix<f64>,
    b_cols: &[DVector<f64>],
    weights: &[f64],
    nugget: f64,
) -> Result<f64> {
    check_outputs(b_cols, weights, x.nrows())?;
    if weights.iter().all(|&w| w == 0.0) {
        return Err(Error::DegenerateCluster("all weights are zero".into()));
    }
    let gram = weighted_gram(b_cols, weights, x.nrows());
    profile_nll_gram(theta, x, &gram, nugget)
}

/// Closed-form scale update
/// `(sum_j w_j b_j^T Phi_theta^{-1} b_j) / (n sum_j w_j)`.
///
/// Returns 0 when every weighted output vector is zero; callers flag that
/// cluster as degenerate.
pub fn tau_sq_closed_form(
    x: &DMatrix<f64>,
    theta: &Lengthscales,
    b_cols: &[DVector<f64>],
    weights: &[f64],
    nugget: f64,
) -> Result<f64> {
    check_outputs(b_cols, weights, x.nrows())?;
    let sum_w: f64 = weights.iter().sum();
    if sum_w <= 0.0 {
        return Err(Error::DegenerateCluster(
            "total weight is zero; scale update undefined".into(),
        ));
    }
    let gram = weighted_gram(b_cols, weights, x.nrows());
    let phi = kernel::corr_matrix(x, theta, nugget)?;
    let fact = kernel::factorize(&phi, nugget)?;
    Ok(trace_solve(&fact, &gram) / (x.nrows() as f64 * sum_w))
}

/// Per-dimension `[1e-2, 1e2] x design range` lengthscale bounds.
pub fn default_bounds(x: &DMatrix<f64>) -> Vec<(f64, f64)> {
    (0..x.ncols())
        .map(|j| {
            let col = x.column(j);
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for &v in col.iter() {
                lo = lo.min(v);
                hi = hi.max(v);
            }
            let range = if hi > lo { hi - lo } else { 1.0 };
            (1e-2 * range, 1e2 * range)
        })
        .collect()
}

/// Per-dimension median of pairwise absolute input differences; the standard
/// scale-matching initial guess. Dimensions with all-equal inputs fall back
/// to 1.
pub fn median_heuristic(x: &DMatrix<f64>) -> Lengthscales {
    let n = x.nrows();
    let mut theta = Vec::with_capacity(x.ncols());
    for j in 0..x.ncols() {
        let mut diffs: Vec<f64> = Vec::with_capacity(n * (n - 1) / 2);
        for i in 0..n {
            for k in (i + 1)..n {
                diffs.push((x[(i, j)] - x[(k, j)]).abs());
            }
        }
        diffs.sort_by(|a, b| a.total_cmp(b));
        let med = if diffs.is_empty() {
            1.0
        } else {
            diffs[diffs.len() / 2]
        };
        theta.push(if med > 0.0 { med } else { 1.0 });
    }
    Lengthscales::new(theta).expect("median heuristic components are positive by construction")
}

/// Clamps lengthscale components into per-dimension bounds.
pub fn clamp_to_bounds(theta: &Lengthscales, bounds: &[(f64, f64)]) -> Lengthscales {
    let clamped: Vec<f64> = theta
        .as_slice()
        .iter()
        .zip(bounds)
        .map(|(&t, &(lo, hi))| t.clamp(lo, hi))
        .collect();
    Lengthscales::new(clamped).expect("clamped components stay positive")
}

// Standard Nelder-Mead on an unconstrained objective; returns the best point
// and value seen across every evaluation, not just the final simplex.
fn nelder_mead(
    obj: &mut dyn FnMut(&[f64]) -> f64,
    start: &[f64],
    step: f64,
    max_evals: usize,
) -> (Vec<f64>, f64) {
    let p = start.len();
    let mut evals = 0usize;
    let mut best = (start.to_vec(), f64::INFINITY);
    let mut eval = |z: &[f64], evals: &mut usize, best: &mut (Vec<f64>, f64)| -> f64 {
        *evals += 1;
        let v = obj(z);
        if v < best.1 {
            *best = (z.to_vec(), v);
        }
        v
    };

    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(p + 1);
    let v0 = eval(start, &mut evals, &mut best);
    simplex.push((start.to_vec(), v0));
    for i in 0..p {
        let mut z = start.to_vec();
        z[i] += step;
        let v = eval(&z, &mut evals, &mut best);
        simplex.push((z, v));
    }

    let (alpha, gamma, rho, sigma) = (1.0, 2.0, 0.5, 0.5);
    while evals < max_evals {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let spread = simplex[p].1 - simplex[0].1;
        let diam: f64 = (0..p)
            .map(|i| (simplex[p].0[i] - simplex[0].0[i]).abs())
            .fold(0.0, f64::max);
        if spread.abs() < 1e-12 && diam < 1e-10 {
            break;
        }

        let mut centroid = vec![0.0; p];
        for v in simplex.iter().take(p) {
            for i in 0..p {
                centroid[i] += v.0[i] / p as f64;
            }
        }
        let worst = simplex[p].clone();
        let reflect: Vec<f64> = (0..p)
            .map(|i| centroid[i] + alpha * (centroid[i] - worst.0[i]))
            .collect();
        let fr = eval(&reflect, &mut evals, &mut best);

        if fr < simplex[0].1 {
            let expand: Vec<f64> = (0..p)
                .map(|i| centroid[i] + gamma * (reflect[i] - centroid[i]))
                .collect();
            let fe = eval(&expand, &mut evals, &mut best);
            simplex[p] = if fe < fr { (expand, fe) } else { (reflect, fr) };
        } else if fr < simplex[p - 1].1 {
            simplex[p] = (reflect, fr);
        } else {
            let contract: Vec<f64> = (0..p)
                .map(|i| centroid[i] + rho * (worst.0[i] - centroid[i]))
                .collect();
            let fc = eval(&contract, &mut evals, &mut best);
            if fc < worst.1 {
                simplex[p] = (contract, fc);
            } else {
                for k in 1..=p {
                    let shrunk: Vec<f64> = (0..p)
                        .map(|i| simplex[0].0[i] + sigma * (simplex[k].0[i] - simplex[0].0[i]))
                        .collect();
                    let fs = eval(&shrunk, &mut evals, &mut best);
                    simplex[k] = (shrunk, fs);
                }
            }
        }
    }
    best
}

pub(crate) fn optimize_theta_gram(
    x: &DMatrix<f64>,
    gram: &DMatrix<f64>,
    init: &Lengthscales,
    bounds: &[(f64, f64)],
    opt: &OptimizerConfig,
) -> Result<Lengthscales> {
    if bounds.len() != init.dim() {
        return Err(Error::InvalidArgument(format!(
            "{} bounds for {} lengthscale dimensions",
            bounds.len(),
            init.dim()
        )));
    }
    if bounds.iter().any(|&(lo, hi)| lo <= 0.0 || hi < lo) {
        return Err(Error::InvalidArgument(
            "lengthscale bounds must be positive and ordered".into(),
        ));
    }
    let log_bounds: Vec<(f64, f64)> = bounds.iter().map(|&(lo, hi)| (lo.ln(), hi.ln())).collect();
    let clamp = |z: &[f64]| -> Vec<f64> {
        z.iter()
            .zip(&log_bounds)
            .map(|(&zi, &(lo, hi))| zi.clamp(lo, hi))
            .collect()
    };

    // Search runs in log(theta) space; out-of-bounds proposals are evaluated
    // at their clamped projection so the returned point always satisfies the
    // bounds.
    let mut best_theta = clamp_to_bounds(init, bounds);
    let mut best_val = f64::INFINITY;
    let start0: Vec<f64> = best_theta.as_slice().iter().map(|t| t.ln()).collect();
    let mut objective = |z: &[f64]| -> f64 {
        let zc = clamp(z);
        let theta = Lengthscales::new(zc.iter().map(|v| v.exp()).collect())
            .expect("exp of a finite clamped value is positive");
        match profile_nll_gram(&theta, x, gram, opt.nugget) {
            Ok(v) if v.is_finite() => {
                if v < best_val {
                    best_val = v;
                    best_theta = theta;
                }
                v
            }
            _ => f64::INFINITY,
        }
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opt.seed);
    for s in 0..opt.multistarts.max(1) {
        let start = if s == 0 {
            start0.clone()
        } else {
            log_bounds
                .iter()
                .map(|&(lo, hi)| rng.gen_range(lo..=hi))
                .collect()
        };
        nelder_mead(&mut objective, &start, 0.25, opt.max_evals.max(2));
    }
    Ok(best_theta)
}

/// Minimizes the weighted profile negative log-likelihood over lengthscales.
///
/// Derivative-free simplex search in log(theta) space with seeded multistarts.
/// The value at `init` is always evaluated, so the result is never worse than
/// the initial point; optimizer stagnation falls back to the best evaluated
/// point rather than erroring.
pub fn optimize_theta(
    x: &DMatrix<f64>,
    b_cols: &[DVector<f64>],
    weights: &[f64],
    init: &Lengthscales,
    bounds: &[(f64, f64)],
    opt: &OptimizerConfig,
) -> Result<Lengthscales> {
    check_outputs(b_cols, weights, x.nrows())?;
    let gram = weighted_gram(b_cols, weights, x.nrows());
    optimize_theta_gram(x, &gram, init, bounds, opt)
}

/// Clamps a computed posterior variance at zero; values down to round-off
/// scale below zero are analytically zero.
pub(crate) fn clamp_variance(var: f64) -> f64 {
    var.max(0.0)
}

/// Posterior mean and variance of the GP at a new input.
///
/// Mean `phi(x)^T Phi^{-1} b`; variance `tau^2 (1 - phi(x)^T Phi^{-1} phi(x))`
/// clamped at zero from below.
pub fn gp_posterior(fit: &GpFit, b: &DVector<f64>, x_new: &[f64]) -> Result<(f64, f64)> {
    if b.len() != fit.design.nrows() {
        return Err(Error::InvalidArgument(format!(
            "output vector has length {}, design has {} rows",
            b.len(),
            fit.design.nrows()
        )));
    }
    let phi_x = kernel::cross_corr(&fit.design, x_new, &fit.theta, fit.fact.nugget())?;
    let alpha = fit.fact.solve(&phi_x);
    let mean = alpha.dot(b);
    let var = clamp_variance(fit.tau_sq * (1.0 - alpha.dot(&phi_x)));
    Ok((mean, var))
}
