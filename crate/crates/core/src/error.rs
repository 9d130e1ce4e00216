use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("token index {token} out of range (valid tokens 0..{limit})")]
    TokenOutOfRange { token: usize, limit: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("loss is infinite; no gradient defined")]
    InfiniteLoss,

    #[error("instance too large for exhaustive enumeration ({paths} paths)")]
    TooLarge { paths: f64 },

    #[error("{got} transcripts exceed the speaker inventory size {max}")]
    TooManySpeakers { got: usize, max: usize },

    #[error("invalid probability grid: {0}")]
    InvalidGrid(String),

    #[error("singular scatter matrix despite regularization")]
    SingularScatter,

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),

    #[error("mismatched data: {0}")]
    Mismatch(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
