use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: element count {got} does not match shape {shape:?}")]
    ElementCount {
        op: &'static str,
        shape: Vec<usize>,
        got: usize,
    },

    #[error("{op}: invalid axis {axis} for rank {rank}")]
    InvalidAxis {
        op: &'static str,
        axis: usize,
        rank: usize,
    },

    #[error("{op}: {extent} is not divisible by {divisor} ({what})")]
    Divisibility {
        op: &'static str,
        what: &'static str,
        extent: usize,
        divisor: usize,
    },

    #[error("conv2d geometry is invalid: {0}")]
    ConvGeometry(String),

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("checkpoint parameter {name}: stored shape {stored:?} does not match model shape {expected:?}")]
    CheckpointShape {
        name: String,
        stored: Vec<usize>,
        expected: Vec<usize>,
    },

    #[error("checkpoint dtype {stored} does not match requested dtype {requested}")]
    CheckpointDType { stored: String, requested: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn divisibility(
        op: &'static str,
        what: &'static str,
        extent: usize,
        divisor: usize,
    ) -> Self {
        Error::Divisibility {
            op,
            what,
            extent,
            divisor,
        }
    }
}
