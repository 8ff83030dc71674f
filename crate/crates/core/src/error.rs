use thiserror::Error;

/// Crate-wide error type. Numeric kernels panic on internal invariant
/// violations (those are bugs); this enum covers conditions callers can
/// plausibly hit with bad inputs, bad files, or bad configs.
#[derive(Debug, Error)]
pub enum VosError {
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    ShapeMismatch {
        context: &'static str,
        expected: String,
        got: String,
    },

    #[error("input too small: {dim} of {got} is below the minimum of {min} required by reflect padding")]
    InputTooSmall {
        dim: &'static str,
        got: usize,
        min: usize,
    },

    #[error("config error at line {line}: {reason}")]
    Config { line: usize, reason: String },

    #[error("unknown config key `{0}`")]
    UnknownKey(String),

    #[error("invalid value for `{key}`: {reason}")]
    BadValue { key: String, reason: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("non-finite loss at step {step}; offending batch: {batch:?}")]
    NonFiniteLoss { step: usize, batch: Vec<String> },

    #[error("inference session has no reference frames; seed it with the annotated first frame")]
    EmptyReferenceSet,

    #[error("object id {id} out of range: session tracks {count} objects")]
    UnknownObject { id: usize, count: usize },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("mask codec error: {0}")]
    MaskCodec(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl VosError {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        VosError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, VosError>;
