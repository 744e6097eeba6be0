use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite value in backward pass at node {node} ({kind})")]
    NonFiniteGradient { node: usize, kind: &'static str },

    #[error("objective must be a 1x1 scalar node, got {rows}x{cols}")]
    NonScalarObjective { rows: usize, cols: usize },

    #[error("objective value is not finite: {0}")]
    NonFiniteObjective(f64),

    #[error("node {0} is not a differentiable leaf")]
    NotDifferentiableLeaf(usize),

    #[error("jet primitive {op} expects {expected} input(s), got {got}")]
    JetArity {
        op: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("primitive {0} has no spatial-jet rule")]
    UnsupportedJet(&'static str),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("kernel width must be positive, got {0}")]
    KernelWidth(f64),

    #[error("covariance factorization failed even with jitter {jitter:e}")]
    Factorization { jitter: f64 },

    #[error("elliptic solve failed: {0}")]
    Solver(String),

    #[error("snapshot {index}: {source}")]
    Snapshot {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("non-finite gradient entry at parameter index {0}")]
    NonFiniteParameterGradient(usize),

    #[error("non-finite {objective} objective at epoch {epoch}, batch {batch}")]
    Diverged {
        objective: &'static str,
        epoch: usize,
        batch: usize,
    },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("reference norm is zero")]
    ZeroReference,

    #[error("missing reference block for field {0}")]
    MissingReference(&'static str),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }
}
