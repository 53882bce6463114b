//! Run configuration: JSON file schema and flag/file/default precedence.

use std::path::Path;

use mcgp::gp::OptimizerConfig;
use mcgp::mixture::MixtureConfig;
use mcgp::{Error, Result};
use serde::Deserialize;

use crate::FitOpts;

/// Emulator family selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum ModelType {
    Mcgp,
    Ugp,
    Igp,
    Pcagp,
}

impl ModelType {
    fn from_tag(tag: &str, file: &Path) -> Result<Self> {
        match tag {
            "mcgp" => Ok(ModelType::Mcgp),
            "ugp" => Ok(ModelType::Ugp),
            "igp" => Ok(ModelType::Igp),
            "pcagp" => Ok(ModelType::Pcagp),
            other => Err(Error::Format {
                file: file.display().to_string(),
                message: format!(
                    "unknown model_type {other:?}; expected mcgp, ugp, igp, or pcagp"
                ),
            }),
        }
    }
}

/// JSON run-configuration file. Every field is optional; unknown keys are
/// rejected so typos fail loudly instead of silently falling back to
/// defaults.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RunConfigFile {
    seed: Option<u64>,
    nugget: Option<f64>,
    elbo_tol: Option<f64>,
    max_iter: Option<usize>,
    multistarts: Option<usize>,
    max_evals: Option<usize>,
    literal_tau_exponent: Option<bool>,
    model_type: Option<String>,
    priors: Option<PriorOverridesFile>,
}

/// Scalar prior overrides; the data-driven priors (center mean, center
/// precision, Wishart scale) always come from the node coordinates.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct PriorOverridesFile {
    alpha0: Option<f64>,
    kappa0: Option<f64>,
    clusters: Option<usize>,
}

/// Fully resolved fitting configuration after applying flag over file over
/// default precedence.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub model_type: ModelType,
    pub mixture: MixtureConfig,
    pub alpha0: Option<f64>,
    pub kappa0: Option<f64>,
    pub clusters: Option<usize>,
}

impl Resolved {
    /// Optimizer settings for the baseline fits, drawn from the same knobs.
    pub fn optimizer(&self) -> OptimizerConfig {
        OptimizerConfig {
            multistarts: self.mixture.multistarts,
            max_evals: self.mixture.max_evals,
            seed: self.mixture.seed,
            nugget: self.mixture.nugget,
        }
    }
}

fn read_config_file(path: &Path) -> Result<RunConfigFile> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        file: path.display().to_string(),
        message: e.to_string(),
    })
}

/// Merge command-line flags over the optional config file over defaults.
pub fn resolve(opts: &FitOpts) -> Result<Resolved> {
    let file = match &opts.config {
        Some(path) => read_config_file(path)?,
        None => RunConfigFile::default(),
    };
    let defaults = MixtureConfig::default();
    let mixture = MixtureConfig {
        seed: opts.seed.or(file.seed).unwrap_or(defaults.seed),
        nugget: opts.nugget.or(file.nugget).unwrap_or(defaults.nugget),
        elbo_tol: opts.elbo_tol.or(file.elbo_tol).unwrap_or(defaults.elbo_tol),
        max_iter: opts.max_iter.or(file.max_iter).unwrap_or(defaults.max_iter),
        multistarts: opts
            .multistarts
            .or(file.multistarts)
            .unwrap_or(defaults.multistarts),
        max_evals: opts
            .max_evals
            .or(file.max_evals)
            .unwrap_or(defaults.max_evals),
        literal_tau_exponent: opts.literal_tau_exponent
            || file.literal_tau_exponent.unwrap_or(false),
    };
    let file_model_type = match (&file.model_type, &opts.config) {
        (Some(tag), Some(path)) => Some(ModelType::from_tag(tag, path)?),
        _ => None,
    };
    let model_type = opts
        .model_type
        .or(file_model_type)
        .unwrap_or(ModelType::Mcgp);
    let priors = file.priors.unwrap_or_default();
    Ok(Resolved {
        model_type,
        mixture,
        alpha0: opts.alpha0.or(priors.alpha0),
        kappa0: opts.kappa0.or(priors.kappa0),
        clusters: opts.clusters.or(priors.clusters),
    })
}
