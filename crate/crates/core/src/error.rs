use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid geometry: {0}")]
    Geometry(String),

    #[error("electrode placement infeasible on side {side}: {reason}")]
    Infeasible { side: usize, reason: String },

    #[error("mesh generation failed: {0}")]
    Mesh(String),

    #[error("interpolation point ({x}, {y}) lies {distance:.3e} outside the source mesh")]
    OutsideMesh { x: f64, y: f64, distance: f64 },

    #[error("non-positive conductivity {value} at node {node}")]
    NonPositiveConductivity { node: usize, value: f64 },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("factorization failed: {0}")]
    Factorization(String),

    #[error("training diverged: {0}")]
    Training(String),

    #[error("reconstruction failed: {0}")]
    Reconstruction(String),

    #[error("configuration error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("parse error in {file}:{line}: {message}")]
    Parse {
        file: String,
        line: usize,
        message: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            message: message.into(),
        }
    }
}
