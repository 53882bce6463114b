//! Fitted-model container: mixture predictions at new inputs for every mesh
//! node, full spatial fields through element shape functions, and a
//! deterministic on-disk format (`model.json` plus numeric sidecars) that
//! round-trips bit-exactly.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::kernel::{self, CorrelationFactorization};
use crate::mixture::{ClusterHyper, HyperPriors, MixtureConfig, VariationalState};
use crate::tables;
use crate::{Error, Result};

/// Convergence record of a fit; deliberately excludes wall-clock time so the
/// saved model is a pure function of data, configuration, and seed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitInfo {
    pub converged: bool,
    pub iterations: usize,
    pub elbo_trace: Vec<f64>,
    pub seed: u64,
}

/// Prediction of one node's output at one input, with the per-cluster
/// components behind the mixture moments.
#[derive(Debug, Clone)]
pub struct NodePrediction {
    pub mean: f64,
    pub variance: f64,
    /// Per-cluster conditional means m_jk(x).
    pub cluster_means: Vec<f64>,
    /// Per-cluster kriging variances (node-independent).
    pub cluster_vars: Vec<f64>,
    /// The node's responsibilities, the mixture weights.
    pub weights: Vec<f64>,
}

/// A fitted clustered-GP emulator with its prediction caches.
#[derive(Debug, Clone)]
pub struct FittedEmulator {
    design: DMatrix<f64>,
    solutions: DMatrix<f64>,
    nodes: DMatrix<f64>,
    state: VariationalState,
    hypers: Vec<ClusterHyper>,
    priors: HyperPriors,
    config: MixtureConfig,
    fit_info: FitInfo,
    facts: Vec<CorrelationFactorization>,
    // per cluster: n x N, column j holds Phi_k^{-1} b_j
    alphas: Vec<DMatrix<f64>>,
}

impl FittedEmulator {
    /// Assemble an emulator from fitted factors and rebuild the per-cluster
    /// solve caches.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        design: DMatrix<f64>,
        solutions: DMatrix<f64>,
        nodes: DMatrix<f64>,
        state: VariationalState,
        hypers: Vec<ClusterHyper>,
        priors: HyperPriors,
        config: MixtureConfig,
        fit_info: FitInfo,
    ) -> Result<Self> {
        let n = design.nrows();
        let n_nodes = nodes.nrows();
        if solutions.nrows() != n_nodes || solutions.ncols() != n {
            return Err(Error::InvalidArgument(format!(
                "solutions are {}x{}, expected {}x{}",
                solutions.nrows(),
                solutions.ncols(),
                n_nodes,
                n
            )));
        }
        if state.responsibilities.nrows() != n_nodes
            || state.responsibilities.ncols() != hypers.len()
            || state.n_clusters() != hypers.len()
        {
            return Err(Error::InvalidArgument(
                "variational state, responsibilities, and hyperparameters disagree on sizes"
                    .into(),
            ));
        }
        let b_t = solutions.transpose();
        let mut facts = Vec::with_capacity(hypers.len());
        let mut alphas = Vec::with_capacity(hypers.len());
        for h in &hypers {
            let phi = kernel::corr_matrix(&design, &h.theta, config.nugget)?;
            let fact = kernel::factorize(&phi, config.nugget)?;
            alphas.push(fact.solve_matrix(&b_t));
            facts.push(fact);
        }
        Ok(FittedEmulator {
            design,
            solutions,
            nodes,
            state,
            hypers,
            priors,
            config,
            fit_info,
            facts,
            alphas,
        })
    }

    pub fn design(&self) -> &DMatrix<f64> {
        &self.design
    }

    pub fn solutions(&self) -> &DMatrix<f64> {
        &self.solutions
    }

    pub fn nodes(&self) -> &DMatrix<f64> {
        &self.nodes
    }

    pub fn state(&self) -> &VariationalState {
        &self.state
    }

    pub fn hypers(&self) -> &[ClusterHyper] {
        &self.hypers
    }

    pub fn priors(&self) -> &HyperPriors {
        &self.priors
    }

    pub fn config(&self) -> &MixtureConfig {
        &self.config
    }

    pub fn fit_info(&self) -> &FitInfo {
        &self.fit_info
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.nrows()
    }

    pub fn n_clusters(&self) -> usize {
        self.hypers.len()
    }

    /// Per-cluster prediction pieces at one input: the N x K matrix of
    /// conditional means m_jk(x) and the K kriging variances
    /// tau_k^2 (1 - phi_k(x)^T Phi_k^{-1} phi_k(x)), clamped at zero.
    pub fn predict_components(&self, x: &[f64]) -> Result<(DMatrix<f64>, Vec<f64>)> {
        let k = self.n_clusters();
        let n_nodes = self.n_nodes();
        let mut means = DMatrix::zeros(n_nodes, k);
        let mut vars = vec![0.0; k];
        for c in 0..k {
            let phi_x =
                kernel::cross_corr(&self.design, x, &self.hypers[c].theta, self.facts[c].nugget())?;
            let sol = self.facts[c].solve(&phi_x);
            vars[c] = (self.hypers[c].tau_sq * (1.0 - phi_x.dot(&sol))).max(0.0);
            let m = self.alphas[c].tr_mul(&phi_x);
            means.set_column(c, &m);
        }
        Ok((means, vars))
    }

    /// Mixture prediction for one node: mean and variance of the
    /// responsibility-weighted cluster posteriors,
    /// `var = sum_k q_jk (v_k + m_jk^2) - mean^2`.
    pub fn predict_node(&self, node: usize, x: &[f64]) -> Result<NodePrediction> {
        if node >= self.n_nodes() {
            return Err(Error::InvalidArgument(format!(
                "node index {node} out of range (N = {})",
                self.n_nodes()
            )));
        }
        let (means, vars) = self.predict_components(x)?;
        Ok(self.combine_node(node, &means, &vars))
    }

    fn combine_node(&self, node: usize, means: &DMatrix<f64>, vars: &[f64]) -> NodePrediction {
        let k = self.n_clusters();
        let mut mean = 0.0;
        let mut second = 0.0;
        let mut cluster_means = Vec::with_capacity(k);
        let mut weights = Vec::with_capacity(k);
        for c in 0..k {
            let q = self.state.responsibilities[(node, c)];
            let m = means[(node, c)];
            mean += q * m;
            second += q * (vars[c] + m * m);
            cluster_means.push(m);
            weights.push(q);
        }
        NodePrediction {
            mean,
            variance: (second - mean * mean).max(0.0),
            cluster_means,
            cluster_vars: vars.to_vec(),
            weights,
        }
    }

    /// Mixture predictions for every node at every row of `x_new`
    /// (m x p). Returns (means, variances), both m x N.
    pub fn predict_all_nodes(&self, x_new: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let m = x_new.nrows();
        let n_nodes = self.n_nodes();
        let rows: Vec<(Vec<f64>, Vec<f64>)> = crate::with_thread_pool(|| {
            (0..m)
                .into_par_iter()
                .map(|i| -> Result<(Vec<f64>, Vec<f64>)> {
                    let x: Vec<f64> = (0..x_new.ncols()).map(|j| x_new[(i, j)]).collect();
                    let (cl_means, cl_vars) = self.predict_components(&x)?;
                    let mut mean_row = vec![0.0; n_nodes];
                    let mut var_row = vec![0.0; n_nodes];
                    for node in 0..n_nodes {
                        let p = self.combine_node(node, &cl_means, &cl_vars);
                        mean_row[node] = p.mean;
                        var_row[node] = p.variance;
                    }
                    Ok((mean_row, var_row))
                })
                .collect::<Result<Vec<_>>>()
        })?;
        let mut means = DMatrix::zeros(m, n_nodes);
        let mut vars = DMatrix::zeros(m, n_nodes);
        for (i, (mr, vr)) in rows.into_iter().enumerate() {
            for node in 0..n_nodes {
                means[(i, node)] = mr[node];
                vars[(i, node)] = vr[node];
            }
        }
        Ok((means, vars))
    }

    /// Field prediction at spatial point `s` and input `x`: interpolate node
    /// predictions through the quadratic shape functions of the element
    /// containing `s`; the field variance treats node posteriors as
    /// independent, `sum_i v_i(s)^2 var_i(x)`.
    pub fn predict_field(
        &self,
        mesh: &crate::femgen::TriMesh,
        s: &[f64],
        x: &[f64],
    ) -> Result<(f64, f64)> {
        let located = mesh.locate(s)?;
        let shape = crate::femgen::shape_values(&located.barycentric);
        let element = &mesh.elements()[located.element];
        let (cl_means, cl_vars) = self.predict_components(x)?;
        let mut mean = 0.0;
        let mut var = 0.0;
        for (local, &node) in element.iter().enumerate() {
            let p = self.combine_node(node, &cl_means, &cl_vars);
            mean += shape[local] * p.mean;
            var += shape[local] * shape[local] * p.variance;
        }
        Ok((mean, var))
    }
}

// Serialized mirror of the model; plain nested arrays keep the JSON
// inspectable and independent of linear-algebra library versions.
#[derive(Serialize, Deserialize)]
struct PriorsFile {
    alpha0: f64,
    mu0: Vec<f64>,
    sigma0: Vec<Vec<f64>>,
    w0: Vec<Vec<f64>>,
    kappa0: f64,
    k: usize,
    covariance_regularized: bool,
}

#[derive(Serialize, Deserialize)]
struct StateFile {
    beta_a: Vec<f64>,
    beta_b: Vec<f64>,
    gauss_means: Vec<Vec<f64>>,
    gauss_precisions: Vec<Vec<Vec<f64>>>,
    wishart_scales: Vec<Vec<Vec<f64>>>,
    wishart_dofs: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format_version: u32,
    model_type: String,
    config: MixtureConfig,
    priors: PriorsFile,
    state: StateFile,
    hypers: Vec<ClusterHyper>,
    fit_info: FitInfo,
    design: Vec<Vec<f64>>,
    nodes: Vec<Vec<f64>>,
}

pub(crate) fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

pub(crate) fn matrix_from_rows(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>> {
    if rows.is_empty() {
        return Err(Error::InvalidArgument(format!("{what} has no rows")));
    }
    let ncols = rows[0].len();
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::InvalidArgument(format!("{what} rows have uneven lengths")));
    }
    let data: Vec<f64> = rows.iter().flatten().copied().collect();
    Ok(DMatrix::from_row_slice(rows.len(), ncols, &data))
}

fn square_from_rows(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>> {
    let m = matrix_from_rows(rows, what)?;
    if m.nrows() != m.ncols() {
        return Err(Error::InvalidArgument(format!("{what} must be square")));
    }
    Ok(m)
}

/// Model filenames inside a model directory.
pub const MODEL_JSON: &str = "model.json";
pub const RESPONSIBILITIES_CSV: &str = "responsibilities.csv";
pub const SOLUTIONS_CSV: &str = "solutions.csv";

/// Write the model directory: `model.json` with every scalar factor, plus
/// `responsibilities.csv` (N x K) and `solutions.csv` (N x n) sidecars.
/// Output bytes depend only on the fitted values.
pub fn save_model(model: &FittedEmulator, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let file = ModelFile {
        format_version: 1,
        model_type: "mcgp".into(),
        config: model.config.clone(),
        priors: PriorsFile {
            alpha0: model.priors.alpha0,
            mu0: model.priors.mu0.iter().copied().collect(),
            sigma0: matrix_to_rows(&model.priors.sigma0),
            w0: matrix_to_rows(&model.priors.w0),
            kappa0: model.priors.kappa0,
            k: model.priors.k,
            covariance_regularized: model.priors.covariance_regularized,
        },
        state: StateFile {
            beta_a: model.state.beta_a.clone(),
            beta_b: model.state.beta_b.clone(),
            gauss_means: model.state.gauss_means.iter().map(|v| v.iter().copied().collect()).collect(),
            gauss_precisions: model.state.gauss_precisions.iter().map(matrix_to_rows).collect(),
            wishart_scales: model.state.wishart_scales.iter().map(matrix_to_rows).collect(),
            wishart_dofs: model.state.wishart_dofs.clone(),
        },
        hypers: model.hypers.clone(),
        fit_info: model.fit_info.clone(),
        design: matrix_to_rows(&model.design),
        nodes: matrix_to_rows(&model.nodes),
    };
    let json = serde_json::to_string_pretty(&file)
        .map_err(|e| Error::format(MODEL_JSON, &e.to_string()))?;
    std::fs::write(dir.join(MODEL_JSON), json + "\n")?;
    tables::write_f64_table(&dir.join(RESPONSIBILITIES_CSV), None, &model.state.responsibilities)?;
    tables::write_f64_table(&dir.join(SOLUTIONS_CSV), None, &model.solutions)?;
    Ok(())
}

/// Load a model directory written by [`save_model`] and rebuild the
/// prediction caches. Predictions from the loaded model are bit-identical
/// to the original's.
pub fn load_model(dir: &Path) -> Result<FittedEmulator> {
    let json_path = dir.join(MODEL_JSON);
    let text = std::fs::read_to_string(&json_path)?;
    let file: ModelFile = serde_json::from_str(&text)
        .map_err(|e| Error::format(&json_path.display().to_string(), &e.to_string()))?;
    if file.model_type != "mcgp" {
        return Err(Error::format(
            &json_path.display().to_string(),
            &format!("model type '{}' is not 'mcgp'", file.model_type),
        ));
    }
    if file.format_version != 1 {
        return Err(Error::format(
            &json_path.display().to_string(),
            &format!("unsupported format version {}", file.format_version),
        ));
    }
    let responsibilities = tables::read_f64_table(&dir.join(RESPONSIBILITIES_CSV))?;
    let solutions = tables::read_f64_table(&dir.join(SOLUTIONS_CSV))?;

    let priors = HyperPriors {
        alpha0: file.priors.alpha0,
        mu0: DVector::from_vec(file.priors.mu0.clone()),
        sigma0: square_from_rows(&file.priors.sigma0, "sigma0")?,
        w0: square_from_rows(&file.priors.w0, "w0")?,
        kappa0: file.priors.kappa0,
        k: file.priors.k,
        covariance_regularized: file.priors.covariance_regularized,
    };
    let d = priors.dim();
    let precisions: Vec<DMatrix<f64>> = file
        .state
        .gauss_precisions
        .iter()
        .map(|m| square_from_rows(m, "center precision"))
        .collect::<Result<_>>()?;
    // rebuild the cached inverses exactly as the update step computes them
    let covs: Vec<DMatrix<f64>> = precisions
        .iter()
        .map(|p| {
            let fact = kernel::factorize(p, 0.0).map_err(|_| {
                Error::format(
                    &json_path.display().to_string(),
                    "a stored center precision is not positive definite",
                )
            })?;
            let inv = fact.solve_matrix(&DMatrix::identity(d, d));
            Ok((&inv + inv.transpose()) * 0.5)
        })
        .collect::<Result<_>>()?;
    let state = VariationalState {
        beta_a: file.state.beta_a.clone(),
        beta_b: file.state.beta_b.clone(),
        gauss_means: file
            .state
            .gauss_means
            .iter()
            .map(|v| DVector::from_vec(v.clone()))
            .collect(),
        gauss_precisions: precisions,
        gauss_covs: covs,
        wishart_scales: file
            .state
            .wishart_scales
            .iter()
            .map(|m| square_from_rows(m, "Wishart scale"))
            .collect::<Result<_>>()?,
        wishart_dofs: file.state.wishart_dofs.clone(),
        responsibilities,
    };
    FittedEmulator::from_parts(
        matrix_from_rows(&file.design, "design")?,
        solutions,
        matrix_from_rows(&file.nodes, "nodes")?,
        state,
        file.hypers,
        priors,
        file.config,
        file.fit_info,
    )
}
