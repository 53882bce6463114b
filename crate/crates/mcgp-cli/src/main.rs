//! Command-line front end for the mesh-clustered GP emulation toolkit.
//!
//! Subcommands cover the full workflow: `generate` builds a finite-element
//! dataset, `fit` trains an emulator (clustered mixture or one of the
//! baselines), `predict` evaluates it at new inputs, `evaluate` scores it
//! against freshly solved truth, `clusters` reports the spatial clustering,
//! and `convergence` runs the mesh/design refinement study.
//!
//! Exit codes: 0 on success, 2 for validation errors (bad arguments or
//! malformed files), 3 for numerical degeneracies. Parallelism is capped by
//! the `MCGP_THREADS` environment variable (default 1), which also keeps
//! runs reproducible.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::ModelType;

#[derive(Parser)]
#[command(
    name = "mcgp",
    version,
    about = "Mesh-clustered Gaussian-process emulation of finite-element simulations"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the reference PDE on a structured mesh and write a dataset.
    Generate(GenerateArgs),
    /// Fit an emulator to a dataset directory.
    Fit(FitArgs),
    /// Predict node coefficients (and optionally a field value) at new inputs.
    Predict(PredictArgs),
    /// Score a fitted model against freshly solved truth.
    Evaluate(EvaluateArgs),
    /// Report the spatial clustering of a fitted mixture model.
    Clusters(ClustersArgs),
    /// Run the mesh/design refinement study and fit its error model.
    Convergence(ConvergenceArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// Target mesh size; the lattice uses round(1/h) cells per side.
    #[arg(long)]
    h: f64,
    /// Number of training inputs on a midpoint-equispaced grid in [-1, 1].
    #[arg(long, conflicts_with = "inputs")]
    equispaced: Option<usize>,
    /// CSV of training inputs (header row, one column per dimension).
    #[arg(long)]
    inputs: Option<PathBuf>,
    /// Seed recorded in the manifest (generation itself is deterministic).
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
}

/// Fitting options shared by `fit` and `convergence`. Precedence is
/// command-line flag over config-file value over built-in default.
#[derive(Args, Clone, Default)]
struct FitOpts {
    /// JSON run-configuration file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for optimizer multistarts.
    #[arg(long)]
    seed: Option<u64>,
    /// Correlation-diagonal nugget.
    #[arg(long)]
    nugget: Option<f64>,
    /// Relative ELBO-change convergence tolerance.
    #[arg(long)]
    elbo_tol: Option<f64>,
    /// Cap on variational EM iterations.
    #[arg(long)]
    max_iter: Option<usize>,
    /// Optimizer restarts per cluster per M-step.
    #[arg(long)]
    multistarts: Option<usize>,
    /// Objective evaluations per optimizer restart.
    #[arg(long)]
    max_evals: Option<usize>,
    /// Truncation level K of the mixture.
    #[arg(long)]
    clusters: Option<usize>,
    /// Stick-breaking concentration parameter.
    #[arg(long)]
    alpha0: Option<f64>,
    /// Wishart degrees of freedom of the precision prior.
    #[arg(long)]
    kappa0: Option<f64>,
    /// Use the simplified scale-likelihood exponent instead of the exact one.
    #[arg(long)]
    literal_tau_exponent: bool,
    /// Which emulator to fit.
    #[arg(long, value_enum)]
    model_type: Option<ModelType>,
}

#[derive(Args)]
struct FitArgs {
    /// Dataset directory produced by `generate`.
    #[arg(long)]
    data: PathBuf,
    /// Output model directory.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    opts: FitOpts,
}

#[derive(Args)]
struct PredictArgs {
    /// Fitted model directory.
    #[arg(long)]
    model: PathBuf,
    /// CSV of test inputs (header row, one column per dimension).
    #[arg(long, conflicts_with = "grid")]
    inputs: Option<PathBuf>,
    /// Number of endpoint-equispaced test inputs in [-1, 1].
    #[arg(long)]
    grid: Option<usize>,
    /// Also print the predicted field at this spatial point, as "s1,s2".
    #[arg(long)]
    at: Option<String>,
    /// Output directory for pred_mean.csv and pred_var.csv.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Fitted model directory.
    #[arg(long)]
    model: PathBuf,
    /// Dataset directory supplying the mesh for fresh truth solves.
    #[arg(long)]
    truth: PathBuf,
    /// CSV of test inputs (header row, one column per dimension).
    #[arg(long, conflicts_with = "grid")]
    inputs: Option<PathBuf>,
    /// Number of endpoint-equispaced test inputs in [-1, 1].
    #[arg(long, default_value_t = 201)]
    grid: usize,
    /// Include per-node RMSE in the report.
    #[arg(long)]
    per_node: bool,
    /// Output JSON report path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ClustersArgs {
    /// Fitted mixture-model directory.
    #[arg(long)]
    model: PathBuf,
    /// Output directory for the summary and per-node assignment CSVs.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ConvergenceArgs {
    /// Output directory for the error grid and fitted rates.
    #[arg(long)]
    out: PathBuf,
    /// Training-design sizes (endpoint-equispaced in [-1, 1]).
    #[arg(long, value_delimiter = ',', default_values_t = vec![5, 10, 15, 20, 25])]
    n_grid: Vec<usize>,
    /// Target mesh sizes.
    #[arg(long, value_delimiter = ',', default_values_t = vec![0.4, 0.2, 0.1, 0.05, 0.025])]
    h_grid: Vec<f64>,
    /// Monte Carlo sample count for the joint L2 error.
    #[arg(long, default_value_t = 2000)]
    samples: usize,
    /// Skip the study and refit the error model to an existing grid CSV.
    #[arg(long)]
    from_grid: Option<PathBuf>,
    #[command(flatten)]
    opts: FitOpts,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate(args) => commands::generate(args),
        Command::Fit(args) => commands::fit(args),
        Command::Predict(args) => commands::predict(args),
        Command::Evaluate(args) => commands::evaluate(args),
        Command::Clusters(args) => commands::clusters(args),
        Command::Convergence(args) => commands::convergence(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            if err.is_degeneracy() {
                ExitCode::from(3)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
