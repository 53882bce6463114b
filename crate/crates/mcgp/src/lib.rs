//! Mesh-clustered Gaussian-process emulation of finite-element simulations.
//!
//! A finite-element solver maps a scalar input `x` to a solution field on a
//! fixed mesh; the field is determined by its coefficient at every mesh node.
//! This crate treats each node's coefficient as a function of `x` and fits all
//! of them jointly with a mixture of Gaussian processes: nodes are softly
//! clustered by a truncated stick-breaking Dirichlet-process prior whose
//! cluster assignments also depend on the node coordinates, so that nodes in
//! the same spatial regime share GP hyperparameters. Inference is mean-field
//! variational EM with a closed-form E-step and a profile-likelihood M-step.
//!
//! The crate provides:
//!
//! - [`kernel`]: anisotropic Matern-5/2 correlation, correlation matrices
//!   with a nugget, and Cholesky-based solves/log-determinants;
//! - [`gp`]: single-output GP machinery (weighted profile likelihood,
//!   lengthscale optimization, posterior mean/variance);
//! - [`mixture`]: the clustered-GP fitter (variational updates, ELBO, EM loop);
//! - [`emulator`]: prediction with uncertainty at nodes and at arbitrary field
//!   points, plus model (de)serialization;
//! - [`baselines`]: uGP / iGP / pcaGP comparison emulators;
//! - [`femgen`]: a quadratic-triangle FEM solver for a Poisson test problem on
//!   the unit square with a closed-form solution, used to generate datasets;
//! - [`metrics`]: RMSE, closed-form CRPS for Gaussian mixtures, timing, and
//!   the mesh-size/design-spacing convergence regression;
//! - [`tables`]: plain numeric CSV reading/writing shared by the above.

pub mod baselines;
pub mod emulator;
mod error;
pub mod femgen;
pub mod gp;
pub mod kernel;
pub mod metrics;
pub mod mixture;
pub mod tables;

pub use error::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Default nugget added to correlation-matrix diagonals.
pub const DEFAULT_NUGGET: f64 = 1.5e-8;

/// Reads the `MCGP_THREADS` environment variable: the cap on internal
/// parallelism. Unset, empty, or unparsable values mean 1 (fully serial).
pub fn thread_cap() -> usize {
    std::env::var("MCGP_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&v| v >= 1)
        .unwrap_or(1)
}

/// Runs `op` inside a rayon pool of [`thread_cap`] threads.
///
/// Every internal use of parallelism merges results by index, so outputs are
/// bit-identical regardless of the thread count.
pub(crate) fn with_thread_pool<T: Send>(op: impl FnOnce() -> T + Send) -> T {
    let threads = thread_cap();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .expect("thread pool construction cannot fail with a positive thread count");
    pool.install(op)
}
