use thiserror::Error;

/// Errors raised anywhere in the lab.
///
/// Variants split into two families: input validation (bad shapes, bad
/// sparsity, malformed files) and numerical failure (non-convergence,
/// undefined quantities). The CLI maps the two families onto distinct
/// exit codes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: left is {left_rows}x{left_cols}, right is {right_rows}x{right_cols}")]
    ShapeMismatch {
        op: &'static str,
        left_rows: usize,
        left_cols: usize,
        right_rows: usize,
        right_cols: usize,
    },

    #[error("invalid matrix: {0}")]
    InvalidMatrix(String),

    #[error("invalid model config: {0}")]
    InvalidConfig(String),

    #[error("token id {id} at position {position} is out of range for vocabulary of size {vocab_size}")]
    TokenOutOfRange {
        position: usize,
        id: usize,
        vocab_size: usize,
    },

    #[error("sequence of length {len} is not allowed (must be between {min} and {max})")]
    SequenceLength { len: usize, min: usize, max: usize },

    #[error("sparsity {s} is not admissible for d={d}: (1-s)d = {kept} is not a positive integer; nearest admissible values are s={lower} and s={upper}")]
    InadmissibleSparsity {
        d: usize,
        s: f64,
        kept: f64,
        lower: f64,
        upper: f64,
    },

    #[error("sparsity {0} is outside [0, 1)")]
    SparsityOutOfRange(f64),

    #[error("model norm weights are not folded; call fold_norm_weights first")]
    NormsNotFolded,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unknown registry key ({key}); available keys: {available}")]
    UnknownKey { key: String, available: String },

    #[error("file format error: {0}")]
    Format(String),

    #[error("eigensolver did not converge after {sweeps} sweeps (off-diagonal norm {residual:e})")]
    NoConvergence { sweeps: usize, residual: f64 },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for failures of the arithmetic itself rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::NoConvergence { .. } | Error::Numerical(_))
    }

    pub(crate) fn shape(op: &'static str, left: (usize, usize), right: (usize, usize)) -> Self {
        Error::ShapeMismatch {
            op,
            left_rows: left.0,
            left_cols: left.1,
            right_rows: right.0,
            right_cols: right.1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
