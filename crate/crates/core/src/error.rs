use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{0} is empty")]
    Empty(&'static str),

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("variable does not belong to this graph")]
    ForeignVar,

    #[error("unsupported bit width {0} (expected 4 or 8)")]
    UnsupportedBits(u32),

    #[error("value {value} outside quantization range [{q_min}, {q_max}]")]
    OutOfRange { value: i64, q_min: i32, q_max: i32 },

    #[error("observer for quant point `{0}` has not seen any data")]
    UninitializedObserver(String),

    #[error("unsupported layer `{0}`")]
    UnsupportedLayer(String),

    #[error("model has no layers")]
    EmptyModel,

    #[error("training diverged at epoch {epoch}, step {step}: {detail}")]
    Diverged {
        epoch: usize,
        step: usize,
        detail: String,
    },

    #[error("integer accumulator overflow in layer {layer}")]
    AccumulatorOverflow { layer: usize },

    #[error("malformed data at byte offset {offset}: {msg}")]
    Format { offset: u64, msg: String },

    #[error("checkpoint version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("config error{}: {msg}", line.map(|l| format!(" on line {l}")).unwrap_or_default())]
    Config { line: Option<usize>, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config {
            line: None,
            msg: msg.into(),
        }
    }
}
