//! Comparison emulators fit to the same per-node solution series: a
//! shared-lengthscale GP (`ugp`), fully independent per-node GPs (`igp`),
//! and principal-component GPs on score series (`pcagp`) — plus [`AnyModel`],
//! a handle that loads any saved model directory by its type tag.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::emulator::{self, FittedEmulator, MODEL_JSON, SOLUTIONS_CSV};
use crate::{Error, Result};
use crate::gp::{self, OptimizerConfig};
use crate::kernel::{self, CorrelationFactorization, Lengthscales};
use crate::tables;

/// Sidecar holding the principal-component matrix (one row per node, one
/// column per kept component). Absent when no component is kept.
pub const COMPONENTS_CSV: &str = "components.csv";

fn check_shapes(
    solutions: &DMatrix<f64>,
    design: &DMatrix<f64>,
    nodes: &DMatrix<f64>,
) -> Result<()> {
    if design.nrows() == 0 || design.ncols() == 0 {
        return Err(Error::InvalidArgument(
            "design matrix must be non-empty".into(),
        ));
    }
    if solutions.nrows() == 0 {
        return Err(Error::InvalidArgument(
            "solution matrix has no node rows".into(),
        ));
    }
    if solutions.ncols() != design.nrows() {
        return Err(Error::InvalidArgument(format!(
            "solution matrix has {} columns but the design has {} rows",
            solutions.ncols(),
            design.nrows()
        )));
    }
    if nodes.nrows() != solutions.nrows() {
        return Err(Error::InvalidArgument(format!(
            "{} node coordinate rows for {} solution rows",
            nodes.nrows(),
            solutions.nrows()
        )));
    }
    Ok(())
}

fn check_new_inputs(design: &DMatrix<f64>, x_new: &DMatrix<f64>) -> Result<()> {
    if x_new.ncols() != design.ncols() {
        return Err(Error::InvalidArgument(format!(
            "prediction inputs have {} columns, the design has {}",
            x_new.ncols(),
            design.ncols()
        )));
    }
    Ok(())
}

/// Lengthscale search initial point: median-distance heuristic clamped into
/// the default box. Shared by every per-series fit in this module.
fn series_init(x: &DMatrix<f64>) -> (Lengthscales, Vec<(f64, f64)>) {
    let bounds = gp::default_bounds(x);
    let init = gp::clamp_to_bounds(&gp::median_heuristic(x), &bounds);
    (init, bounds)
}

/// Profile fit of one output series: lengthscales by likelihood search,
/// scale by its closed form.
fn fit_series(
    x: &DMatrix<f64>,
    series: &DVector<f64>,
    config: &OptimizerConfig,
) -> Result<(Lengthscales, f64)> {
    let (init, bounds) = series_init(x);
    let cols = [series.clone()];
    let weights = [1.0];
    let theta = gp::optimize_theta(x, &cols, &weights, &init, &bounds, config)?;
    let tau_sq = gp::tau_sq_closed_form(x, &theta, &cols, &weights, config.nugget)?;
    Ok((theta, tau_sq))
}

fn corr_fact(design: &DMatrix<f64>, theta: &Lengthscales, nugget: f64) -> Result<CorrelationFactorization> {
    let phi = kernel::corr_matrix(design, theta, nugget)?;
    kernel::factorize(&phi, nugget)
}

// ---------------------------------------------------------------------------
// ugp: one lengthscale shared by every node, per-node scales
// ---------------------------------------------------------------------------

/// Shared-lengthscale baseline: a single correlation structure over the
/// design, with per-node scale factors.
#[derive(Debug, Clone)]
pub struct UgpModel {
    design: DMatrix<f64>,
    solutions: DMatrix<f64>,
    nodes: DMatrix<f64>,
    config: OptimizerConfig,
    theta: Lengthscales,
    tau_sqs: Vec<f64>,
    fact: CorrelationFactorization,
    alphas: DMatrix<f64>,
}

impl UgpModel {
    fn from_hypers(
        design: DMatrix<f64>,
        solutions: DMatrix<f64>,
        nodes: DMatrix<f64>,
        config: OptimizerConfig,
        theta: Lengthscales,
        tau_sqs: Vec<f64>,
    ) -> Result<Self> {
        let fact = corr_fact(&design, &theta, config.nugget)?;
        let alphas = fact.solve_matrix(&solutions.transpose());
        Ok(UgpModel {
            design,
            solutions,
            nodes,
            config,
            theta,
            tau_sqs,
            fact,
            alphas,
        })
    }

    pub fn theta(&self) -> &Lengthscales {
        &self.theta
    }

    pub fn tau_sqs(&self) -> &[f64] {
        &self.tau_sqs
    }

    /// Per-node posterior means and variances at each row of `x_new`;
    /// both returned matrices are (test points) x (nodes).
    pub fn predict_all_nodes(&self, x_new: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        check_new_inputs(&self.design, x_new)?;
        let n_nodes = self.solutions.nrows();
        let rows: Vec<(DVector<f64>, f64)> = crate::with_thread_pool(|| {
            (0..x_new.nrows())
                .into_par_iter()
                .map(|i| -> Result<(DVector<f64>, f64)> {
                    let x: Vec<f64> = (0..x_new.ncols()).map(|c| x_new[(i, c)]).collect();
                    let phi =
                        kernel::cross_corr(&self.design, &x, &self.theta, self.fact.nugget())?;
                    let krig = gp::clamp_variance(1.0 - phi.dot(&self.fact.solve(&phi)));
                    Ok((self.alphas.tr_mul(&phi), krig))
                })
                .collect::<Result<Vec<_>>>()
        })?;
        let mut means = DMatrix::zeros(x_new.nrows(), n_nodes);
        let mut vars = DMatrix::zeros(x_new.nrows(), n_nodes);
        for (i, (mean_row, krig)) in rows.into_iter().enumerate() {
            for j in 0..n_nodes {
                means[(i, j)] = mean_row[j];
                vars[(i, j)] = self.tau_sqs[j] * krig;
            }
        }
        Ok((means, vars))
    }
}

/// Fits the shared-lengthscale baseline: one lengthscale vector from the
/// pooled likelihood over all node series with unit weights, then per-node
/// scales `b_j^T Phi^{-1} b_j / n`.
pub fn fit_ugp(
    solutions: &DMatrix<f64>,
    design: &DMatrix<f64>,
    nodes: &DMatrix<f64>,
    config: &OptimizerConfig,
) -> Result<UgpModel> {
    check_shapes(solutions, design, nodes)?;
    let b_rows = crate::mixture::extract_rows(solutions);
    let weights = vec![1.0; b_rows.len()];
    let (init, bounds) = series_init(design);
    let theta = crate::with_thread_pool(|| {
        gp::optimize_theta(design, &b_rows, &weights, &init, &bounds, config)
    })?;
    let tau_sqs: Vec<f64> = b_rows
        .iter()
        .map(|b| gp::tau_sq_closed_form(design, &theta, &[b.clone()], &[1.0], config.nugget))
        .collect::<Result<_>>()?;
    UgpModel::from_hypers(
        design.clone(),
        solutions.clone(),
        nodes.clone(),
        config.clone(),
        theta,
        tau_sqs,
    )
}

// ---------------------------------------------------------------------------
// igp: fully independent per-node fits
// ---------------------------------------------------------------------------

/// Hyperparameters of one independently fitted node series.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NodeFit {
    pub theta: Lengthscales,
    pub tau_sq: f64,
    /// Set when the node's series is identically zero; such a node predicts
    /// zero with zero variance and carries no correlation factorization.
    pub degenerate: bool,
}

/// Independent-GP baseline: every node series gets its own lengthscales
/// and scale.
#[derive(Debug, Clone)]
pub struct IgpModel {
    design: DMatrix<f64>,
    solutions: DMatrix<f64>,
    nodes: DMatrix<f64>,
    config: OptimizerConfig,
    fits: Vec<NodeFit>,
    facts: Vec<Option<CorrelationFactorization>>,
    alphas: Vec<Option<DVector<f64>>>,
}

impl IgpModel {
    fn from_fits(
        design: DMatrix<f64>,
        solutions: DMatrix<f64>,
        nodes: DMatrix<f64>,
        config: OptimizerConfig,
        fits: Vec<NodeFit>,
    ) -> Result<Self> {
        let b_rows = crate::mixture::extract_rows(&solutions);
        let built: Vec<Option<(CorrelationFactorization, DVector<f64>)>> =
            crate::with_thread_pool(|| {
                fits.par_iter()
                    .zip(b_rows.par_iter())
                    .map(|(fit, b)| -> Result<Option<_>> {
                        if fit.degenerate {
                            return Ok(None);
                        }
                        let fact = corr_fact(&design, &fit.theta, config.nugget)?;
                        let alpha = fact.solve(b);
                        Ok(Some((fact, alpha)))
                    })
                    .collect::<Result<Vec<_>>>()
            })?;
        let mut facts = Vec::with_capacity(fits.len());
        let mut alphas = Vec::with_capacity(fits.len());
        for entry in built {
            match entry {
                Some((f, a)) => {
                    facts.push(Some(f));
                    alphas.push(Some(a));
                }
                None => {
                    facts.push(None);
                    alphas.push(None);
                }
            }
        }
        Ok(IgpModel {
            design,
            solutions,
            nodes,
            config,
            fits,
            facts,
            alphas,
        })
    }

    pub fn fits(&self) -> &[NodeFit] {
        &self.fits
    }

    /// Per-node posterior means and variances at each row of `x_new`;
    /// both returned matrices are (test points) x (nodes).
    pub fn predict_all_nodes(&self, x_new: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        check_new_inputs(&self.design, x_new)?;
        let n_nodes = self.solutions.nrows();
        let rows: Vec<(Vec<f64>, Vec<f64>)> = crate::with_thread_pool(|| {
            (0..x_new.nrows())
                .into_par_iter()
                .map(|i| -> Result<(Vec<f64>, Vec<f64>)> {
                    let x: Vec<f64> = (0..x_new.ncols()).map(|c| x_new[(i, c)]).collect();
                    let mut mean_row = vec![0.0; n_nodes];
                    let mut var_row = vec![0.0; n_nodes];
                    for j in 0..n_nodes {
                        let (Some(fact), Some(alpha)) = (&self.facts[j], &self.alphas[j]) else {
                            continue; // degenerate node: zero mean, zero variance
                        };
                        let fit = &self.fits[j];
                        let phi =
                            kernel::cross_corr(&self.design, &x, &fit.theta, fact.nugget())?;
                        mean_row[j] = phi.dot(alpha);
                        var_row[j] =
                            gp::clamp_variance(fit.tau_sq * (1.0 - phi.dot(&fact.solve(&phi))));
                    }
                    Ok((mean_row, var_row))
                })
                .collect::<Result<Vec<_>>>()
        })?;
        let mut means = DMatrix::zeros(x_new.nrows(), n_nodes);
        let mut vars = DMatrix::zeros(x_new.nrows(), n_nodes);
        for (i, (mr, vr)) in rows.into_iter().enumerate() {
            for j in 0..n_nodes {
                means[(i, j)] = mr[j];
                vars[(i, j)] = vr[j];
            }
        }
        Ok((means, vars))
    }
}

/// Fits one GP per node series, independently and in parallel. A series that
/// is identically zero is flagged degenerate rather than fitted.
pub fn fit_igp(
    solutions: &DMatrix<f64>,
    design: &DMatrix<f64>,
    nodes: &DMatrix<f64>,
    config: &OptimizerConfig,
) -> Result<IgpModel> {
    check_shapes(solutions, design, nodes)?;
    let b_rows = crate::mixture::extract_rows(solutions);
    let (init, _) = series_init(design);
    let fits: Vec<NodeFit> = crate::with_thread_pool(|| {
        b_rows
            .par_iter()
            .map(|b| -> Result<NodeFit> {
                if b.iter().all(|v| *v == 0.0) {
                    return Ok(NodeFit {
                        theta: init.clone(),
                        tau_sq: 0.0,
                        degenerate: true,
                    });
                }
                let (theta, tau_sq) = fit_series(design, b, config)?;
                Ok(NodeFit {
                    theta,
                    tau_sq,
                    degenerate: false,
                })
            })
            .collect::<Result<Vec<_>>>()
    })?;
    IgpModel::from_fits(
        design.clone(),
        solutions.clone(),
        nodes.clone(),
        config.clone(),
        fits,
    )
}

// ---------------------------------------------------------------------------
// pcagp: truncated principal components + independent GPs on score series
// ---------------------------------------------------------------------------

/// Discrete principal-component expansion of a node-by-input solution matrix:
/// `B ~= mean_field * 1^T + components * scores^T`, keeping the smallest
/// number of components whose cumulative squared singular values reach 99%
/// of the total.
#[derive(Debug, Clone)]
pub struct PcaBasis {
    /// Per-node mean over the training inputs (length N).
    pub mean_field: DVector<f64>,
    /// Orthonormal spatial components, one column per kept component (N x M).
    pub components: DMatrix<f64>,
    /// Score series, one column per kept component (n x M).
    pub scores: DMatrix<f64>,
    /// Fraction of total variance carried by each kept component.
    pub explained_variance_ratios: Vec<f64>,
}

/// Centers each node row by its mean over the training inputs and expands
/// the centered matrix by singular value decomposition, keeping the minimal
/// component count that explains at least 99% of the variance. A centered
/// matrix that is exactly zero keeps no components.
pub fn pca_basis(solutions: &DMatrix<f64>) -> Result<PcaBasis> {
    let n_inputs = solutions.ncols();
    if n_inputs < 2 {
        return Err(Error::InvalidArgument(format!(
            "principal-component fit needs at least 2 training inputs, got {n_inputs}"
        )));
    }
    let n_nodes = solutions.nrows();
    let mean_field = DVector::from_fn(n_nodes, |j, _| {
        solutions.row(j).iter().sum::<f64>() / n_inputs as f64
    });
    let mut centered = solutions.clone();
    for j in 0..n_nodes {
        for i in 0..n_inputs {
            centered[(j, i)] -= mean_field[j];
        }
    }
    let svd = centered.svd(true, true);
    let sigma = &svd.singular_values;
    let total: f64 = sigma.iter().map(|s| s * s).sum();
    let mut kept = 0;
    if total > 0.0 {
        let mut cumulative = 0.0;
        for (l, s) in sigma.iter().enumerate() {
            cumulative += s * s;
            kept = l + 1;
            if cumulative >= 0.99 * total {
                break;
            }
        }
    }
    let u = svd.u.as_ref().expect("left singular vectors requested");
    let v_t = svd.v_t.as_ref().expect("right singular vectors requested");
    let components = DMatrix::from_fn(n_nodes, kept, |j, l| u[(j, l)]);
    let scores = DMatrix::from_fn(n_inputs, kept, |i, l| sigma[l] * v_t[(l, i)]);
    let explained_variance_ratios = (0..kept).map(|l| sigma[l] * sigma[l] / total).collect();
    Ok(PcaBasis {
        mean_field,
        components,
        scores,
        explained_variance_ratios,
    })
}

/// Hyperparameters of one fitted score series.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoreFit {
    pub theta: Lengthscales,
    pub tau_sq: f64,
}

/// Principal-component baseline: independent GPs on the kept score series,
/// predictions reconstructed through the spatial components.
#[derive(Debug, Clone)]
pub struct PcagpModel {
    design: DMatrix<f64>,
    solutions: DMatrix<f64>,
    nodes: DMatrix<f64>,
    config: OptimizerConfig,
    basis: PcaBasis,
    fits: Vec<ScoreFit>,
    facts: Vec<CorrelationFactorization>,
    alphas: Vec<DVector<f64>>,
    components_sq: DMatrix<f64>,
}

impl PcagpModel {
    fn from_fits(
        design: DMatrix<f64>,
        solutions: DMatrix<f64>,
        nodes: DMatrix<f64>,
        config: OptimizerConfig,
        basis: PcaBasis,
        fits: Vec<ScoreFit>,
    ) -> Result<Self> {
        let mut facts = Vec::with_capacity(fits.len());
        let mut alphas = Vec::with_capacity(fits.len());
        for (l, fit) in fits.iter().enumerate() {
            let fact = corr_fact(&design, &fit.theta, config.nugget)?;
            let alpha = fact.solve(&DVector::from_iterator(
                design.nrows(),
                basis.scores.column(l).iter().copied(),
            ));
            facts.push(fact);
            alphas.push(alpha);
        }
        let components_sq = basis.components.map(|v| v * v);
        Ok(PcagpModel {
            design,
            solutions,
            nodes,
            config,
            basis,
            fits,
            facts,
            alphas,
            components_sq,
        })
    }

    pub fn basis(&self) -> &PcaBasis {
        &self.basis
    }

    pub fn fits(&self) -> &[ScoreFit] {
        &self.fits
    }

    /// Number of kept components.
    pub fn n_components(&self) -> usize {
        self.fits.len()
    }

    /// Per-node posterior means and variances at each row of `x_new`;
    /// both returned matrices are (test points) x (nodes). With no kept
    /// components the mean field is returned with zero variance.
    pub fn predict_all_nodes(&self, x_new: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        check_new_inputs(&self.design, x_new)?;
        let n_nodes = self.solutions.nrows();
        let kept = self.fits.len();
        let rows: Vec<(DVector<f64>, DVector<f64>)> = crate::with_thread_pool(|| {
            (0..x_new.nrows())
                .into_par_iter()
                .map(|i| -> Result<(DVector<f64>, DVector<f64>)> {
                    let x: Vec<f64> = (0..x_new.ncols()).map(|c| x_new[(i, c)]).collect();
                    let mut score_means = DVector::zeros(kept);
                    let mut score_vars = DVector::zeros(kept);
                    for l in 0..kept {
                        let fit = &self.fits[l];
                        let phi = kernel::cross_corr(
                            &self.design,
                            &x,
                            &fit.theta,
                            self.facts[l].nugget(),
                        )?;
                        score_means[l] = phi.dot(&self.alphas[l]);
                        score_vars[l] = gp::clamp_variance(
                            fit.tau_sq * (1.0 - phi.dot(&self.facts[l].solve(&phi))),
                        );
                    }
                    let means = &self.basis.mean_field + &self.basis.components * score_means;
                    let vars = &self.components_sq * score_vars;
                    Ok((means, vars))
                })
                .collect::<Result<Vec<_>>>()
        })?;
        let mut means = DMatrix::zeros(x_new.nrows(), n_nodes);
        let mut vars = DMatrix::zeros(x_new.nrows(), n_nodes);
        for (i, (mr, vr)) in rows.into_iter().enumerate() {
            for j in 0..n_nodes {
                means[(i, j)] = mr[j];
                vars[(i, j)] = vr[j];
            }
        }
        Ok((means, vars))
    }
}

/// Fits the principal-component baseline: expand, keep the minimal 99%
/// component set, then fit one GP per kept score series.
pub fn fit_pcagp(
    solutions: &DMatrix<f64>,
    design: &DMatrix<f64>,
    nodes: &DMatrix<f64>,
    config: &OptimizerConfig,
) -> Result<PcagpModel> {
    check_shapes(solutions, design, nodes)?;
    let basis = pca_basis(solutions)?;
    let fits: Vec<ScoreFit> = crate::with_thread_pool(|| {
        (0..basis.scores.ncols())
            .into_par_iter()
            .map(|l| -> Result<ScoreFit> {
                let series = DVector::from_iterator(
                    design.nrows(),
                    basis.scores.column(l).iter().copied(),
                );
                let (theta, tau_sq) = fit_series(design, &series, config)?;
                Ok(ScoreFit { theta, tau_sq })
            })
            .collect::<Result<Vec<_>>>()
    })?;
    PcagpModel::from_fits(
        design.clone(),
        solutions.clone(),
        nodes.clone(),
        config.clone(),
        basis,
        fits,
    )
}

// ---------------------------------------------------------------------------
// model files
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct UgpFile {
    format_version: u32,
    model_type: String,
    config: OptimizerConfig,
    theta: Lengthscales,
    tau_sqs: Vec<f64>,
    design: Vec<Vec<f64>>,
    nodes: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct IgpFile {
    format_version: u32,
    model_type: String,
    config: OptimizerConfig,
    fits: Vec<NodeFit>,
    design: Vec<Vec<f64>>,
    nodes: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct PcagpFile {
    format_version: u32,
    model_type: String,
    config: OptimizerConfig,
    mean_field: Vec<f64>,
    scores: Vec<Vec<f64>>,
    explained_variance_ratios: Vec<f64>,
    fits: Vec<ScoreFit>,
    design: Vec<Vec<f64>>,
    nodes: Vec<Vec<f64>>,
}

fn write_model_json<T: Serialize>(dir: &Path, file: &T) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let json = serde_json::to_string_pretty(file)
        .map_err(|e| Error::format(MODEL_JSON, &e.to_string()))?;
    std::fs::write(dir.join(MODEL_JSON), json + "\n")?;
    Ok(())
}

fn read_model_json<T: for<'de> Deserialize<'de>>(dir: &Path, expect_type: &str) -> Result<T> {
    let path = dir.join(MODEL_JSON);
    let text = std::fs::read_to_string(&path)?;
    let value: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| Error::format(&path.display().to_string(), &e.to_string()))?;
    match value.get("model_type").and_then(|v| v.as_str()) {
        Some(t) if t == expect_type => {}
        Some(t) => {
            return Err(Error::format(
                &path.display().to_string(),
                &format!("model type '{t}' is not '{expect_type}'"),
            ))
        }
        None => {
            return Err(Error::format(
                &path.display().to_string(),
                "missing model_type field",
            ))
        }
    }
    match value.get("format_version").and_then(|v| v.as_u64()) {
        Some(1) => {}
        Some(v) => {
            return Err(Error::format(
                &path.display().to_string(),
                &format!("unsupported format version {v}"),
            ))
        }
        None => {
            return Err(Error::format(
                &path.display().to_string(),
                "missing format_version field",
            ))
        }
    }
    serde_json::from_value(value).map_err(|e| Error::format(&path.display().to_string(), &e.to_string()))
}

/// Writes a shared-lengthscale model directory: `model.json` and the
/// training `solutions.csv`.
pub fn save_ugp(model: &UgpModel, dir: &Path) -> Result<()> {
    write_model_json(
        dir,
        &UgpFile {
            format_version: 1,
            model_type: "ugp".into(),
            config: model.config.clone(),
            theta: model.theta.clone(),
            tau_sqs: model.tau_sqs.clone(),
            design: emulator::matrix_to_rows(&model.design),
            nodes: emulator::matrix_to_rows(&model.nodes),
        },
    )?;
    tables::write_f64_table(&dir.join(SOLUTIONS_CSV), None, &model.solutions)
}

pub fn load_ugp(dir: &Path) -> Result<UgpModel> {
    let file: UgpFile = read_model_json(dir, "ugp")?;
    let solutions = tables::read_f64_table(&dir.join(SOLUTIONS_CSV))?;
    UgpModel::from_hypers(
        emulator::matrix_from_rows(&file.design, "design")?,
        solutions,
        emulator::matrix_from_rows(&file.nodes, "nodes")?,
        file.config,
        file.theta,
        file.tau_sqs,
    )
}

/// Writes an independent-GP model directory: `model.json` and the training
/// `solutions.csv`.
pub fn save_igp(model: &IgpModel, dir: &Path) -> Result<()> {
    write_model_json(
        dir,
        &IgpFile {
            format_version: 1,
            model_type: "igp".into(),
            config: model.config.clone(),
            fits: model.fits.clone(),
            design: emulator::matrix_to_rows(&model.design),
            nodes: emulator::matrix_to_rows(&model.nodes),
        },
    )?;
    tables::write_f64_table(&dir.join(SOLUTIONS_CSV), None, &model.solutions)
}

pub fn load_igp(dir: &Path) -> Result<IgpModel> {
    let file: IgpFile = read_model_json(dir, "igp")?;
    let solutions = tables::read_f64_table(&dir.join(SOLUTIONS_CSV))?;
    IgpModel::from_fits(
        emulator::matrix_from_rows(&file.design, "design")?,
        solutions,
        emulator::matrix_from_rows(&file.nodes, "nodes")?,
        file.config,
        file.fits,
    )
}

/// Writes a principal-component model directory: `model.json`, the training
/// `solutions.csv`, and `components.csv` when any component is kept.
pub fn save_pcagp(model: &PcagpModel, dir: &Path) -> Result<()> {
    write_model_json(
        dir,
        &PcagpFile {
            format_version: 1,
            model_type: "pcagp".into(),
            config: model.config.clone(),
            mean_field: model.basis.mean_field.iter().copied().collect(),
            scores: emulator::matrix_to_rows(&model.basis.scores),
            explained_variance_ratios: model.basis.explained_variance_ratios.clone(),
            fits: model.fits.clone(),
            design: emulator::matrix_to_rows(&model.design),
            nodes: emulator::matrix_to_rows(&model.nodes),
        },
    )?;
    tables::write_f64_table(&dir.join(SOLUTIONS_CSV), None, &model.solutions)?;
    if model.n_components() > 0 {
        tables::write_f64_table(&dir.join(COMPONENTS_CSV), None, &model.basis.components)?;
    }
    Ok(())
}

pub fn load_pcagp(dir: &Path) -> Result<PcagpModel> {
    let file: PcagpFile = read_model_json(dir, "pcagp")?;
    let solutions = tables::read_f64_table(&dir.join(SOLUTIONS_CSV))?;
    let kept = file.fits.len();
    let components = if kept > 0 {
        let c = tables::read_f64_table(&dir.join(COMPONENTS_CSV))?;
        if c.nrows() != solutions.nrows() || c.ncols() != kept {
            return Err(Error::format(
                COMPONENTS_CSV,
                &format!(
                    "component matrix is {}x{}, expected {}x{kept}",
                    c.nrows(),
                    c.ncols(),
                    solutions.nrows()
                ),
            ));
        }
        c
    } else {
        DMatrix::zeros(solutions.nrows(), 0)
    };
    let basis = PcaBasis {
        mean_field: DVector::from_vec(file.mean_field),
        components,
        scores: emulator::matrix_from_rows(&file.scores, "scores")?,
        explained_variance_ratios: file.explained_variance_ratios,
    };
    PcagpModel::from_fits(
        emulator::matrix_from_rows(&file.design, "design")?,
        solutions,
        emulator::matrix_from_rows(&file.nodes, "nodes")?,
        file.config,
        basis,
        file.fits,
    )
}

// ---------------------------------------------------------------------------
// unified handle
// ---------------------------------------------------------------------------

/// Any fitted model this crate can save or load, tagged by type.
#[derive(Debug, Clone)]
pub enum AnyModel {
    Mcgp(Box<FittedEmulator>),
    Ugp(UgpModel),
    Igp(IgpModel),
    Pcagp(PcagpModel),
}

impl AnyModel {
    pub fn model_type(&self) -> &'static str {
        match self {
            AnyModel::Mcgp(_) => "mcgp",
            AnyModel::Ugp(_) => "ugp",
            AnyModel::Igp(_) => "igp",
            AnyModel::Pcagp(_) => "pcagp",
        }
    }

    pub fn design(&self) -> &DMatrix<f64> {
        match self {
            AnyModel::Mcgp(m) => m.design(),
            AnyModel::Ugp(m) => &m.design,
            AnyModel::Igp(m) => &m.design,
            AnyModel::Pcagp(m) => &m.design,
        }
    }

    pub fn nodes(&self) -> &DMatrix<f64> {
        match self {
            AnyModel::Mcgp(m) => m.nodes(),
            AnyModel::Ugp(m) => &m.nodes,
            AnyModel::Igp(m) => &m.nodes,
            AnyModel::Pcagp(m) => &m.nodes,
        }
    }

    pub fn solutions(&self) -> &DMatrix<f64> {
        match self {
            AnyModel::Mcgp(m) => m.solutions(),
            AnyModel::Ugp(m) => &m.solutions,
            AnyModel::Igp(m) => &m.solutions,
            AnyModel::Pcagp(m) => &m.solutions,
        }
    }

    /// Per-node posterior means and variances at each row of `x_new`;
    /// both returned matrices are (test points) x (nodes).
    pub fn predict_all_nodes(&self, x_new: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        match self {
            AnyModel::Mcgp(m) => m.predict_all_nodes(x_new),
            AnyModel::Ugp(m) => m.predict_all_nodes(x_new),
            AnyModel::Igp(m) => m.predict_all_nodes(x_new),
            AnyModel::Pcagp(m) => m.predict_all_nodes(x_new),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        match self {
            AnyModel::Mcgp(m) => emulator::save_model(m, dir),
            AnyModel::Ugp(m) => save_ugp(m, dir),
            AnyModel::Igp(m) => save_igp(m, dir),
            AnyModel::Pcagp(m) => save_pcagp(m, dir),
        }
    }
}

/// Loads any saved model directory, dispatching on its `model_type` tag.
pub fn load_any(dir: &Path) -> Result<AnyModel> {
    let path = dir.join(MODEL_JSON);
    let text = std::fs::read_to_string(&path)?;
    #[derive(Deserialize)]
    struct TypeProbe {
        model_type: String,
    }
    let probe: TypeProbe = serde_json::from_str(&text)
        .map_err(|e| Error::format(&path.display().to_string(), &e.to_string()))?;
    match probe.model_type.as_str() {
        "mcgp" => Ok(AnyModel::Mcgp(Box::new(emulator::load_model(dir)?))),
        "ugp" => Ok(AnyModel::Ugp(load_ugp(dir)?)),
        "igp" => Ok(AnyModel::Igp(load_igp(dir)?)),
        "pcagp" => Ok(AnyModel::Pcagp(load_pcagp(dir)?)),
        other => Err(Error::format(
            &path.display().to_string(),
            &format!("unknown model type '{other}'"),
        )),
    }
}
