use thiserror::Error;

pub type Result<T> = std::result::Result<T, DdnmError>;

/// Failure category, used by the command-line driver to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numerical,
}

impl ErrorKind {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorKind::Config => 2,
            ErrorKind::Data => 3,
            ErrorKind::Numerical => 4,
        }
    }
}

#[derive(Debug, Error)]
pub enum DdnmError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("degenerate forecast scale q = {q:e} (s = {s:e})")]
    DegenerateScale { q: f64, s: f64 },

    #[error("forecast variance requires degrees of freedom > 2, got {dof} for series {series}")]
    MomentExistence { series: usize, dof: f64 },

    #[error("precision recursion lost positivity at series {series}: 1/k = {value:e}")]
    Conditioning { series: usize, value: f64 },

    #[error("insufficient history for series {series}: need {needed} lagged values, have {available}")]
    WarmUp {
        series: usize,
        needed: usize,
        available: usize,
    },

    #[error("model space too large: {0}")]
    Capacity(String),

    #[error("model probabilities underflowed for series {series}")]
    Underflow { series: usize },

    #[error("unknown or invalid feature: {0}")]
    Feature(String),

    #[error("target return {target} is degenerate: expected returns are proportional to the unit vector")]
    DegenerateTarget { target: f64 },

    #[error("target return {target} infeasible under nonnegative weights; attainable interval is [{lo}, {hi}]")]
    Infeasible { target: f64, lo: f64, hi: f64 },

    #[error("constraint set is rank deficient: {0}")]
    RankDeficient(String),

    #[error("projected risk is zero with nonzero target")]
    DegenerateRisk,

    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("need at least 2 Monte Carlo samples, got {0}")]
    InsufficientSamples(usize),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<DdnmError>,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("state snapshot error: {0}")]
    Snapshot(String),
}

impl DdnmError {
    pub fn kind(&self) -> ErrorKind {
        match self {
            DdnmError::Config(_) | DdnmError::Capacity(_) | DdnmError::Feature(_) => {
                ErrorKind::Config
            }
            DdnmError::Data(_)
            | DdnmError::WarmUp { .. }
            | DdnmError::Io { .. }
            | DdnmError::Snapshot(_) => ErrorKind::Data,
            DdnmError::Context { source, .. } => source.kind(),
            _ => ErrorKind::Numerical,
        }
    }

    /// Wraps the error with a location such as a series name or a date.
    pub fn context(self, context: impl Into<String>) -> Self {
        DdnmError::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        DdnmError::Io {
            path: path.into(),
            source,
        }
    }
}
