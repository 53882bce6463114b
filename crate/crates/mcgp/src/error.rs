use thiserror::Error;

/// Errors produced by the emulation toolkit.
///
/// The variants split into validation failures (bad arguments, malformed
/// files, shape mismatches) and numerical degeneracies (failed factorizations,
/// clusters with no effective data, non-finite intermediates). The CLI maps
/// the former to exit code 2 and the latter to exit code 3.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument violates a documented precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A matrix that must be symmetric positive-definite failed its Cholesky
    /// factorization; `pivot` is the 0-based index of the failing pivot.
    #[error("matrix not positive definite: pivot {pivot} is {value:e}")]
    NotPositiveDefinite { pivot: usize, value: f64 },

    /// A cluster (or weighted fit) has no effective data to estimate from.
    #[error("degenerate cluster: {0}")]
    DegenerateCluster(String),

    /// A numeric intermediate became non-finite.
    #[error("numerical degeneracy: {0}")]
    NumericalDegeneracy(String),

    /// A spatial query point lies outside the mesh; `nearest_element` is the
    /// index of the element whose centroid is closest to the point.
    #[error("point ({0}, {1}) is outside the mesh; nearest element: {2}")]
    OutOfDomain(f64, f64, usize),

    /// A mesh failed a structural validity check.
    #[error("invalid mesh: {0}")]
    MeshValidity(String),

    /// A dataset, model, or config file could not be parsed.
    #[error("{file}: {message}")]
    Format { file: String, message: String },

    /// Underlying I/O failure.
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for errors that indicate numerical degeneracy rather than bad
    /// input (drives the CLI's exit-code split).
    pub fn is_degeneracy(&self) -> bool {
        matches!(
            self,
            Error::NotPositiveDefinite { .. }
                | Error::DegenerateCluster(_)
                | Error::NumericalDegeneracy(_)
        )
    }

    pub(crate) fn format(file: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Format {
            file: file.into(),
            message: message.into(),
        }
    }
}
