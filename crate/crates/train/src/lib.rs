//! Training pipeline: experiment configuration, corpora, staged training
//! drivers, code extraction and training logs.

pub mod codes;
pub mod config;
pub mod corpus;
pub mod error;
pub mod log;
pub mod trainer;

pub use codes::{extract_normalized_codes, CodedUtterance, CodesDataset};
pub use config::{CorpusConfig, CorpusSource, ExperimentConfig, TrainMode, TrainSchedule, SCHEMA_VERSION};
pub use corpus::{synthetic_speech, Corpus, Utterance};
pub use error::{Result, TrainError};
pub use log::{read_log, smoothed, JsonlLog, LogRecord};
pub use trainer::{
    heldout_mel, init_codec, load_stage_checkpoint, step_rng, train_joint, train_stage1, train_stage2, train_vocoder,
    RunOptions, RunPaths, StageKind, TrainReport,
};
