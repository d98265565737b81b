use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across model construction, solving and simulation.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {block}: expected {expected}, found {found}")]
    DimensionMismatch {
        block: String,
        expected: String,
        found: String,
    },

    #[error("invalid time grid: {0}")]
    InvalidTimeGrid(String),

    #[error("invalid coefficient trajectory {name}: {reason}")]
    InvalidTrajectory { name: String, reason: String },

    #[error("invalid control set for agent {agent}: {reason}")]
    InvalidControlSet { agent: usize, reason: String },

    #[error("D(t)D(t)^T not positive definite at t = {t}: min eigenvalue {min_eigenvalue:e}")]
    DegenerateDiffusion { t: f64, min_eigenvalue: f64 },

    #[error("R(t) of agent {agent} not positive definite at t = {t}: min eigenvalue {min_eigenvalue:e}")]
    IndefiniteControlWeight {
        agent: usize,
        t: f64,
        min_eigenvalue: f64,
    },

    #[error("best response did not converge for agent {agent} after {iterations} iterations (KKT residual {residual:e})")]
    BestResponseNotConverged {
        agent: usize,
        iterations: usize,
        residual: f64,
    },

    #[error("unconstrained feedback of agent {agent} leaves its box at t = {t}")]
    InteriorViolation { agent: usize, t: f64 },

    #[error("Riccati solution blew up at t = {t} (|P| = {norm:e})")]
    RiccatiBlowUp { t: f64, norm: f64 },

    #[error("explicit scheme needs {required} substeps per step, cap is {cap}")]
    CflInfeasible { required: usize, cap: usize },

    #[error("grid solver supports state dimension <= 3, got {0}")]
    GridDimension(usize),

    #[error("non-finite state on path {path} at step {step}")]
    NonFiniteState { path: usize, step: usize },

    #[error("empty path bundle")]
    EmptyBundle,

    #[error("path does not match the time grid: {0}")]
    PathGridMismatch(String),

    #[error("unsupported scenario: {0}")]
    Scenario(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn dims(block: impl Into<String>, expected: impl ToString, found: impl ToString) -> Self {
        Error::DimensionMismatch {
            block: block.into(),
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
