use alloc::string::String;
use alloc::vec::Vec;

/// Everything that can go wrong inside the numeric core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("loss term `{term}` is not finite")]
    Divergence { term: String },
    #[error("training diverged at epoch {epoch}, batch {batch}: {cause}")]
    Diverged { epoch: usize, batch: usize, cause: String },
    #[error("degenerate batch for batchnorm: {0} values per channel (need at least 2)")]
    DegenerateBatch(usize),
    #[error("loss must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("loss is detached from every differentiable leaf")]
    Detached,
    #[error("parameter `{0}` has no gradient")]
    MissingGrad(String),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("duplicate parameter `{0}`")]
    DuplicateParam(String),
    #[error("graph needs at least two nodes, got {0}")]
    DegenerateGraph(usize),
    #[error("alpha {0} outside [0, 1]")]
    Alpha(f64),
    #[error("unknown attribute index {0}")]
    UnknownAttribute(usize),
    #[error("unknown group `{0}`")]
    UnknownGroup(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("parse error at line {line}: {detail}")]
    Parse { line: usize, detail: String },
}

pub type Result<T> = core::result::Result<T, Error>;

pub(crate) fn dim_err(op: &'static str, detail: String) -> Error {
    Error::Dimension { op, detail }
}
