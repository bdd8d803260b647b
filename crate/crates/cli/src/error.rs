use std::fmt;

use streamdec_eval::EvalError;
use streamdec_stream::BitstreamError;
use streamdec_train::TrainError;

/// Process exit status, fixed for scripting.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExitKind {
    Failure = 1,
    Config = 2,
    Prerequisite = 3,
    Compatibility = 4,
    Corrupt = 5,
}

impl ExitKind {
    pub fn code(self) -> i32 {
        self as i32
    }
}

#[derive(Debug)]
pub struct CliError {
    pub kind: ExitKind,
    pub message: String,
}

impl CliError {
    pub fn new(kind: ExitKind, message: impl Into<String>) -> Self {
        Self {
            kind,
            message: message.into(),
        }
    }

    pub fn config(message: impl Into<String>) -> Self {
        Self::new(ExitKind::Config, message)
    }

    pub fn prerequisite(message: impl Into<String>) -> Self {
        Self::new(ExitKind::Prerequisite, message)
    }

    pub fn compatibility(message: impl Into<String>) -> Self {
        Self::new(ExitKind::Compatibility, message)
    }

    pub fn corrupt(message: impl Into<String>) -> Self {
        Self::new(ExitKind::Corrupt, message)
    }

    pub fn code(&self) -> i32 {
        self.kind.code()
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

pub type Result<T> = std::result::Result<T, CliError>;

fn core_kind(e: &streamdec_core::Error) -> ExitKind {
    use streamdec_core::Error as E;
    match e {
        E::Config(_) | E::Shape(_) => ExitKind::Config,
        E::Wav { .. } | E::Checkpoint(_) | E::IndexOutOfRange { .. } => ExitKind::Corrupt,
        _ => ExitKind::Failure,
    }
}

impl From<streamdec_core::Error> for CliError {
    fn from(e: streamdec_core::Error) -> Self {
        Self::new(core_kind(&e), e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        let kind = match &e {
            TrainError::Config(_) | TrainError::EmptyCorpus(_) => ExitKind::Config,
            TrainError::Prerequisite(_) => ExitKind::Prerequisite,
            TrainError::Compatibility(_) => ExitKind::Compatibility,
            TrainError::Corrupt { .. } => ExitKind::Corrupt,
            TrainError::Core(c) => core_kind(c),
            TrainError::NonFiniteLoss { .. } | TrainError::Io { .. } => ExitKind::Failure,
        };
        Self::new(kind, e.to_string())
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        let kind = match &e {
            EvalError::Config(_) | EvalError::EmptyCorpus => ExitKind::Config,
            EvalError::Core(c) => core_kind(c),
            _ => ExitKind::Failure,
        };
        Self::new(kind, e.to_string())
    }
}

impl From<BitstreamError> for CliError {
    fn from(e: BitstreamError) -> Self {
        Self::corrupt(format!("corrupt bitstream: {e}"))
    }
}
