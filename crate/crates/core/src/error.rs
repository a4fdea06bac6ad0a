use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed file: {0}")]
    MalformedFile(String),
    #[error("duplicate tensor name `{0}`")]
    DuplicateTensorName(String),
    #[error("edge references unknown layer `{0}`")]
    DanglingEdge(String),
    #[error("invalid graph: {0}")]
    InvalidGraph(String),
    #[error("missing tensor `{0}`")]
    MissingTensor(String),
    #[error("i/o failure: {0}")]
    IoFailure(#[from] io::Error),
    #[error("block size {d} incompatible with {rows} rows (block {block})")]
    IndivisibleBlockSize { rows: usize, d: usize, block: usize },
    #[error("need at least two subvectors, got {0}")]
    TooFewSubvectors(usize),
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("children disagree on channel count: {0} vs {1}")]
    MismatchedChannelCounts(usize, usize),
    #[error("unknown layer kind `{0}`")]
    UnknownLayerKind(String),
    #[error("unsupported layer `{0}`")]
    UnsupportedLayerKind(String),
    #[error("inconsistent channel counts at `{layer}`: {expected} vs {actual}")]
    InconsistentChannelCounts {
        layer: String,
        expected: usize,
        actual: usize,
    },
    #[error("permutation moves channel {0} out of its block")]
    BlockViolation(usize),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("loss diverged at epoch {epoch}: {loss}")]
    DivergedLoss { epoch: usize, loss: f64 },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

impl Error {
    /// Stable machine-readable tag used by the CLI diagnostics.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::MalformedFile(_) => "MalformedFile",
            Error::DuplicateTensorName(_) => "DuplicateTensorName",
            Error::DanglingEdge(_) => "DanglingEdge",
            Error::InvalidGraph(_) => "InvalidGraph",
            Error::MissingTensor(_) => "MissingTensor",
            Error::IoFailure(_) => "IoFailure",
            Error::IndivisibleBlockSize { .. } => "IndivisibleBlockSize",
            Error::TooFewSubvectors(_) => "TooFewSubvectors",
            Error::DimensionMismatch { .. } => "DimensionMismatch",
            Error::MismatchedChannelCounts(..) => "MismatchedChannelCounts",
            Error::UnknownLayerKind(_) => "UnknownLayerKind",
            Error::UnsupportedLayerKind(_) => "UnsupportedLayerKind",
            Error::InconsistentChannelCounts { .. } => "InconsistentChannelCounts",
            Error::BlockViolation(_) => "BlockViolation",
            Error::ShapeMismatch(_) => "ShapeMismatch",
            Error::DivergedLoss { .. } => "DivergedLoss",
            Error::InvalidArgument(_) => "InvalidArgument",
        }
    }
}
