//! Implementations of the six subcommands.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use mcgp::baselines::{self, AnyModel};
use mcgp::emulator::FittedEmulator;
use mcgp::femgen;
use mcgp::metrics::{self, ConvergencePoint, EvalReport};
use mcgp::mixture::{self, HyperPriors, REPORT_THRESHOLD};
use mcgp::tables;
use mcgp::{Error, Result};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{self, ModelType, Resolved};
use crate::{
    ClustersArgs, ConvergenceArgs, EvaluateArgs, FitArgs, GenerateArgs, PredictArgs,
};

pub const MANIFEST_JSON: &str = "manifest.json";
pub const FIT_JSON: &str = "fit.json";
pub const ELBO_TRACE_CSV: &str = "elbo_trace.csv";
pub const PRED_MEAN_CSV: &str = "pred_mean.csv";
pub const PRED_VAR_CSV: &str = "pred_var.csv";
pub const CLUSTER_SUMMARY_CSV: &str = "cluster_summary.csv";
pub const ASSIGNMENTS_CSV: &str = "assignments.csv";
pub const CONVERGENCE_GRID_CSV: &str = "convergence_grid.csv";
pub const CONVERGENCE_JSON: &str = "convergence.json";

/// Midpoint-equispaced training design: n cell centers of [-1, 1]. The
/// single division of exact integers yields the correctly rounded value of
/// each rational point (so e.g. n = 5 gives exactly -0.8, -0.4, 0, 0.4,
/// 0.8).
fn midpoint_design(n: usize) -> Result<DMatrix<f64>> {
    if n == 0 {
        return Err(Error::InvalidArgument(
            "--equispaced needs at least one input".into(),
        ));
    }
    Ok(DMatrix::from_fn(n, 1, |i, _| {
        (2 * i as i64 + 1 - n as i64) as f64 / n as f64
    }))
}

/// Endpoint-equispaced design: m points spanning [-1, 1] inclusive, again
/// as a single exact-integer division per point.
fn endpoint_design(m: usize) -> Result<DMatrix<f64>> {
    if m < 2 {
        return Err(Error::InvalidArgument(format!(
            "an endpoint-equispaced grid needs at least 2 points, got {m}"
        )));
    }
    Ok(DMatrix::from_fn(m, 1, |i, _| {
        (2 * i as i64 + 1 - m as i64) as f64 / (m as i64 - 1) as f64
    }))
}

fn write_json_pretty(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Format {
        file: path.display().to_string(),
        message: e.to_string(),
    })?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

#[derive(Serialize)]
struct Manifest {
    h: f64,
    n_inputs: usize,
    n_nodes: usize,
    seed: u64,
    generator_version: String,
}

pub fn generate(args: GenerateArgs) -> Result<()> {
    let design = match (&args.equispaced, &args.inputs) {
        (Some(n), None) => midpoint_design(*n)?,
        (None, Some(path)) => tables::read_f64_table(path)?,
        _ => {
            return Err(Error::InvalidArgument(
                "pass exactly one of --equispaced or --inputs".into(),
            ))
        }
    };
    let mesh = femgen::build_mesh(args.h)?;
    let solutions = femgen::generate_solutions(&mesh, &design)?;
    femgen::write_dataset(&args.out, &mesh, &design, &solutions)?;
    let manifest = Manifest {
        h: args.h,
        n_inputs: design.nrows(),
        n_nodes: mesh.n_nodes(),
        seed: args.seed,
        generator_version: env!("CARGO_PKG_VERSION").to_string(),
    };
    write_json_pretty(&args.out.join(MANIFEST_JSON), &manifest)?;
    println!(
        "wrote {} solves on a {}-node mesh to {}",
        design.nrows(),
        mesh.n_nodes(),
        args.out.display()
    );
    Ok(())
}

fn resolved_priors(cfg: &Resolved, nodes: &DMatrix<f64>) -> Result<HyperPriors> {
    let mut priors = mixture::default_priors(nodes, 2)?;
    if let Some(a) = cfg.alpha0 {
        priors.alpha0 = a;
    }
    if let Some(k) = cfg.kappa0 {
        priors.kappa0 = k;
    }
    if let Some(k) = cfg.clusters {
        priors.k = k;
    }
    Ok(priors)
}

#[derive(Serialize)]
struct FitSummary {
    model_type: &'static str,
    fit_seconds: f64,
    seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    converged: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    iterations: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    final_elbo: Option<f64>,
}

pub fn fit(args: FitArgs) -> Result<()> {
    let cfg = config::resolve(&args.opts)?;
    let data = femgen::load_dataset(&args.data)?;
    let started = Instant::now();
    let model = match cfg.model_type {
        ModelType::Mcgp => {
            let priors = resolved_priors(&cfg, data.mesh.nodes())?;
            AnyModel::Mcgp(Box::new(mixture::fit(
                &data.solutions,
                &data.design,
                data.mesh.nodes(),
                &priors,
                &cfg.mixture,
            )?))
        }
        ModelType::Ugp => AnyModel::Ugp(baselines::fit_ugp(
            &data.solutions,
            &data.design,
            data.mesh.nodes(),
            &cfg.optimizer(),
        )?),
        ModelType::Igp => AnyModel::Igp(baselines::fit_igp(
            &data.solutions,
            &data.design,
            data.mesh.nodes(),
            &cfg.optimizer(),
        )?),
        ModelType::Pcagp => AnyModel::Pcagp(baselines::fit_pcagp(
            &data.solutions,
            &data.design,
            data.mesh.nodes(),
            &cfg.optimizer(),
        )?),
    };
    let fit_seconds = started.elapsed().as_secs_f64();
    model.save(&args.out)?;

    let mut summary = FitSummary {
        model_type: model.model_type(),
        fit_seconds,
        seed: cfg.mixture.seed,
        converged: None,
        iterations: None,
        final_elbo: None,
    };
    if let AnyModel::Mcgp(emu) = &model {
        let info = emu.fit_info();
        summary.converged = Some(info.converged);
        summary.iterations = Some(info.iterations);
        summary.final_elbo = info.elbo_trace.last().copied();
        let trace =
            DMatrix::from_column_slice(info.elbo_trace.len(), 1, &info.elbo_trace);
        tables::write_f64_table(&args.out.join(ELBO_TRACE_CSV), Some(&["elbo"]), &trace)?;
    }
    write_json_pretty(&args.out.join(FIT_JSON), &summary)?;

    match &model {
        AnyModel::Mcgp(emu) => {
            let info = emu.fit_info();
            println!(
                "fitted mcgp in {:.3} s ({} after {} iterations, ELBO {:.6})",
                fit_seconds,
                if info.converged {
                    "converged"
                } else {
                    "stopped"
                },
                info.iterations,
                info.elbo_trace.last().copied().unwrap_or(f64::NAN)
            );
        }
        other => println!("fitted {} in {:.3} s", other.model_type(), fit_seconds),
    }
    Ok(())
}

fn parse_point(text: &str) -> Result<[f64; 2]> {
    let parts: Vec<&str> = text.split(',').collect();
    if parts.len() != 2 {
        return Err(Error::InvalidArgument(format!(
            "--at expects \"s1,s2\", got {text:?}"
        )));
    }
    let mut point = [0.0; 2];
    for (slot, part) in point.iter_mut().zip(&parts) {
        *slot = part.trim().parse::<f64>().map_err(|_| {
            Error::InvalidArgument(format!("--at component {part:?} is not a number"))
        })?;
    }
    Ok(point)
}

fn test_inputs(
    inputs: &Option<std::path::PathBuf>,
    grid: Option<usize>,
) -> Result<DMatrix<f64>> {
    match (inputs, grid) {
        (Some(path), _) => tables::read_f64_table(path),
        (None, Some(m)) => endpoint_design(m),
        (None, None) => Err(Error::InvalidArgument(
            "pass --inputs or --grid to choose test inputs".into(),
        )),
    }
}

pub fn predict(args: PredictArgs) -> Result<()> {
    let model = baselines::load_any(&args.model)?;
    let x_new = test_inputs(&args.inputs, args.grid)?;
    let (means, vars) = model.predict_all_nodes(&x_new)?;
    std::fs::create_dir_all(&args.out)?;
    tables::write_f64_table(&args.out.join(PRED_MEAN_CSV), None, &means)?;
    tables::write_f64_table(&args.out.join(PRED_VAR_CSV), None, &vars)?;
    println!(
        "predicted {} nodes at {} inputs into {}",
        means.ncols(),
        means.nrows(),
        args.out.display()
    );

    if let Some(text) = &args.at {
        let point = parse_point(text)?;
        let mesh = femgen::canonical_mesh(model.nodes())?;
        let located = mesh.locate(&point)?;
        let shape = femgen::shape_values(&located.barycentric);
        let element = mesh.elements()[located.element];
        let p = x_new.ncols();
        let mut header = String::new();
        for a in 0..p {
            write!(header, "x{},", a + 1).expect("string write");
        }
        println!("field at s = ({}, {}):", point[0], point[1]);
        println!("{header}mean,var");
        for i in 0..x_new.nrows() {
            let mut mean = 0.0;
            let mut var = 0.0;
            for (local, &node) in element.iter().enumerate() {
                mean += shape[local] * means[(i, node)];
                var += shape[local] * shape[local] * vars[(i, node)];
            }
            let mut line = String::new();
            for a in 0..p {
                write!(line, "{:.16e},", x_new[(i, a)]).expect("string write");
            }
            println!("{line}{mean:.16e},{var:.16e}");
        }
    }
    Ok(())
}

/// CRPS of the model's predictive distribution at every (input, node) pair,
/// averaged. The mixture model scores against its full cluster mixture; the
/// baselines score against their single Gaussian.
fn mean_crps(
    model: &AnyModel,
    x_new: &DMatrix<f64>,
    truth: &DMatrix<f64>,
    means: &DMatrix<f64>,
    vars: &DMatrix<f64>,
) -> Result<f64> {
    let m = x_new.nrows();
    let n_nodes = truth.ncols();
    let mut total = 0.0;
    match model {
        AnyModel::Mcgp(emu) => {
            let resp = &emu.state().responsibilities;
            let k = emu.n_clusters();
            let mut weights = vec![0.0; k];
            let mut mus = vec![0.0; k];
            for i in 0..m {
                let x_row: Vec<f64> = x_new.row(i).iter().copied().collect();
                let (cl_means, cl_vars) = emu.predict_components(&x_row)?;
                for j in 0..n_nodes {
                    for c in 0..k {
                        weights[c] = resp[(j, c)];
                        mus[c] = cl_means[(j, c)];
                    }
                    total += metrics::crps_mixture(&weights, &mus, &cl_vars, truth[(i, j)]);
                }
            }
        }
        _ => {
            for i in 0..m {
                for j in 0..n_nodes {
                    total +=
                        metrics::crps_normal(means[(i, j)], vars[(i, j)].sqrt(), truth[(i, j)]);
                }
            }
        }
    }
    Ok(total / (m * n_nodes) as f64)
}

pub fn evaluate(args: EvaluateArgs) -> Result<()> {
    let model = baselines::load_any(&args.model)?;
    let truth_data = femgen::load_dataset(&args.truth)?;
    if model.nodes().nrows() != truth_data.mesh.n_nodes() {
        return Err(Error::InvalidArgument(format!(
            "model was fitted on {} nodes but the truth mesh has {}",
            model.nodes().nrows(),
            truth_data.mesh.n_nodes()
        )));
    }
    let x_new = match &args.inputs {
        Some(path) => tables::read_f64_table(path)?,
        None => endpoint_design(args.grid)?,
    };
    let truth = femgen::generate_solutions(&truth_data.mesh, &x_new)?.transpose();
    let (means, vars) = model.predict_all_nodes(&x_new)?;
    let rmse = metrics::rmse(&truth, &means)?;
    let crps = mean_crps(&model, &x_new, &truth, &means, &vars)?;

    let fit_seconds = std::fs::read_to_string(args.model.join(FIT_JSON))
        .ok()
        .and_then(|text| serde_json::from_str::<serde_json::Value>(&text).ok())
        .and_then(|v| v.get("fit_seconds").and_then(serde_json::Value::as_f64))
        .unwrap_or(0.0);
    let predict_secs = metrics::median_secs_of_three(|| {
        model
            .predict_all_nodes(&x_new)
            .expect("prediction already succeeded on these inputs");
    });
    let predict_ms_per_run = predict_secs / x_new.nrows() as f64 * 1e3;

    let per_node_rmse = if args.per_node {
        let per_col: Vec<f64> = (0..truth.ncols())
            .map(|j| {
                let t = DMatrix::from_column_slice(truth.nrows(), 1, truth.column(j).as_slice());
                let p = DMatrix::from_column_slice(means.nrows(), 1, means.column(j).as_slice());
                metrics::rmse(&t, &p).expect("columns have equal shape")
            })
            .collect();
        Some(per_col)
    } else {
        None
    };

    let report = EvalReport {
        rmse,
        mean_crps: crps,
        fit_seconds,
        predict_ms_per_run,
        per_node_rmse,
    };
    if let Some(parent) = args.out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    write_json_pretty(&args.out, &report)?;
    println!(
        "{}: rmse = {rmse:.6e}, mean CRPS = {crps:.6e} (fit {fit_seconds:.3} s, predict {predict_ms_per_run:.3} ms/input)",
        model.model_type()
    );
    Ok(())
}

pub fn clusters(args: ClustersArgs) -> Result<()> {
    let model = baselines::load_any(&args.model)?;
    let AnyModel::Mcgp(emu) = &model else {
        return Err(Error::InvalidArgument(format!(
            "the clusters report needs a clustered mixture model, got {}",
            model.model_type()
        )));
    };
    std::fs::create_dir_all(&args.out)?;
    let resp = &emu.state().responsibilities;
    let n_nodes = resp.nrows();
    let k = emu.n_clusters();
    let p = emu.design().ncols();

    let counts: Vec<usize> = (0..k)
        .map(|c| (0..n_nodes).filter(|&j| resp[(j, c)] >= REPORT_THRESHOLD).count())
        .collect();

    let mut summary = String::from("cluster,nodes,tau_sq");
    for a in 0..p {
        write!(summary, ",theta{}", a + 1).expect("string write");
    }
    summary.push('\n');
    println!("cluster  nodes  tau_sq        theta");
    for (c, hyper) in emu.hypers().iter().enumerate() {
        let theta = hyper.theta.as_slice();
        write!(summary, "{c},{},{:.16e}", counts[c], hyper.tau_sq).expect("string write");
        for t in theta {
            write!(summary, ",{t:.16e}").expect("string write");
        }
        summary.push('\n');
        let theta_text: Vec<String> = theta.iter().map(|t| format!("{t:.6e}")).collect();
        println!(
            "{c:>7}  {:>5}  {:<12.6e}  {}",
            counts[c],
            hyper.tau_sq,
            theta_text.join(", ")
        );
    }
    std::fs::write(args.out.join(CLUSTER_SUMMARY_CSV), summary)?;

    let mut assignments = String::from("node,cluster,responsibility\n");
    for j in 0..n_nodes {
        let (mut best, mut best_q) = (0, resp[(j, 0)]);
        for c in 1..k {
            if resp[(j, c)] > best_q {
                best = c;
                best_q = resp[(j, c)];
            }
        }
        writeln!(assignments, "{j},{best},{best_q:.16e}").expect("string write");
    }
    std::fs::write(args.out.join(ASSIGNMENTS_CSV), assignments)?;

    let active = mixture::active_cluster_count(resp);
    println!("{active} of {k} clusters hold responsibility above {REPORT_THRESHOLD}");
    Ok(())
}

fn finish_convergence(out: &Path, points: &[ConvergencePoint]) -> Result<()> {
    metrics::write_convergence_csv(&out.join(CONVERGENCE_GRID_CSV), points)?;
    let fit = metrics::convergence_regression(
        points,
        &metrics::DEFAULT_NU_GRID,
        &metrics::DEFAULT_R_GRID,
    )?;
    write_json_pretty(&out.join(CONVERGENCE_JSON), &fit)?;
    println!(
        "error model: E = {:.6e} * h_X^{} + {:.6e} * h_T^{}  (R^2 = {:.8})",
        fit.a,
        fit.nu,
        fit.b,
        fit.r + 1,
        fit.r_squared
    );
    Ok(())
}

pub fn convergence(args: ConvergenceArgs) -> Result<()> {
    std::fs::create_dir_all(&args.out)?;
    if let Some(path) = &args.from_grid {
        let points = metrics::read_convergence_csv(path)?;
        return finish_convergence(&args.out, &points);
    }
    let cfg = config::resolve(&args.opts)?;
    if args.n_grid.is_empty() || args.h_grid.is_empty() {
        return Err(Error::InvalidArgument(
            "the refinement study needs nonempty --n-grid and --h-grid".into(),
        ));
    }
    if args.samples == 0 {
        return Err(Error::InvalidArgument(
            "--samples must be at least 1".into(),
        ));
    }

    // One shared set of Monte Carlo evaluation pairs (spatial point, input)
    // keeps the error estimates comparable across grid cells.
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.mixture.seed);
    let pairs: Vec<([f64; 2], f64)> = (0..args.samples)
        .map(|_| {
            let s1: f64 = rng.gen();
            let s2: f64 = rng.gen();
            let x: f64 = 2.0 * rng.gen::<f64>() - 1.0;
            ([s1, s2], x)
        })
        .collect();

    let mut points = Vec::with_capacity(args.n_grid.len() * args.h_grid.len());
    for &h in &args.h_grid {
        let mesh = femgen::build_mesh(h)?;
        for &n in &args.n_grid {
            let design = endpoint_design(n)?;
            let solutions = femgen::generate_solutions(&mesh, &design)?;
            let priors = resolved_priors(&cfg, mesh.nodes())?;
            let model = mixture::fit(
                &solutions,
                &design,
                mesh.nodes(),
                &priors,
                &cfg.mixture,
            )?;
            let error = field_l2_error(&model, &mesh, &pairs)?;
            let h_x = 2.0 / (n - 1) as f64;
            points.push(ConvergencePoint {
                h_x,
                h_t: mesh.pitch(),
                error,
            });
            println!(
                "n = {n:>3}  h_X = {h_x:.6}  h_T = {:.6}  error = {error:.6e}",
                mesh.pitch()
            );
        }
    }
    finish_convergence(&args.out, &points)
}

/// Root mean squared gap between the emulated field and the closed-form
/// solution over the sampled (spatial point, input) pairs.
fn field_l2_error(
    model: &FittedEmulator,
    mesh: &femgen::TriMesh,
    pairs: &[([f64; 2], f64)],
) -> Result<f64> {
    let mut acc = 0.0;
    for (s, x) in pairs {
        let (mean, _) = model.predict_field(mesh, s, std::slice::from_ref(x))?;
        let diff = mean - femgen::analytic_solution(s[0], s[1], *x);
        acc += diff * diff;
    }
    Ok((acc / pairs.len() as f64).sqrt())
}
