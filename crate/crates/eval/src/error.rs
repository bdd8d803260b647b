use thiserror::Error;

pub type Result<T> = std::result::Result<T, EvalError>;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("utterance of {len} samples is shorter than one {frame}-sample frame")]
    TooShort { len: usize, frame: usize },

    #[error("lengths differ by {diff} samples (tolerance {tolerance})")]
    LengthMismatch { diff: usize, tolerance: usize },

    #[error("sample rates differ: {0} Hz vs {1} Hz")]
    RateMismatch(u32, u32),

    #[error("invalid metric configuration: {0}")]
    Config(String),

    #[error("no utterances to evaluate")]
    EmptyCorpus,

    #[error(transparent)]
    Core(#[from] streamdec_core::Error),
}
