use std::path::PathBuf;

/// Errors produced by the estimation and simulation pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error("test column `{0}` has zero variance")]
    DegenerateColumn(String),

    #[error("rank-deficient design; collinear columns: {}", .0.join(", "))]
    RankDeficient(Vec<String>),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("matrix is not positive definite ({0})")]
    NotPositiveDefinite(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("oracle dimension cap exceeded: {requested} > {cap}")]
    OracleTooLarge { requested: usize, cap: usize },

    #[error("sampler failed at iteration {iteration}: {source}")]
    Sampler {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("chain diverged at iteration {iteration}: {parameter} = {value}")]
    Diverged {
        iteration: usize,
        parameter: String,
        value: f64,
    },

    #[error("complete separation detected on term `{0}`")]
    Separation(String),

    #[error("outcome has a single class; both events and non-events are required")]
    SingleClass,

    #[error("no events among analyzable records")]
    NoEvents,

    #[error("selection pool `{0}` is empty")]
    EmptySubset(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn at_iteration(self, iteration: usize) -> Self {
        match self {
            e @ Error::Diverged { .. } => e,
            e => Error::Sampler {
                iteration,
                source: Box::new(e),
            },
        }
    }
}
