use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("points outside the mesh hull: {indices:?}")]
    OutsideHull { indices: Vec<usize> },

    #[error("matrix is not positive definite (pivot {pivot} at column {column})")]
    NotPositiveDefinite { column: usize, pivot: f64 },

    #[error("resource limit exceeded: {0}")]
    Resource(String),

    #[error("optimizer did not converge after {evaluations} evaluations (gradient norm {grad_norm:.3e}); best point {best:?}")]
    NonConvergence {
        best: Vec<f64>,
        grad_norm: f64,
        evaluations: usize,
    },

    #[error("Newton iterations diverged: {trace}")]
    NewtonDivergence { trace: String },

    #[error("degenerate data: {0}")]
    Degenerate(String),

    #[error("blocks outside the grid: {0:?}")]
    BlocksOutsideGrid(Vec<String>),

    #[error("blocks without interior grid centroids: {0:?}")]
    EmptyBlocks(Vec<String>),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
