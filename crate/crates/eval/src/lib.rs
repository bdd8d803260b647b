//! Objective metrics for reconstructed speech.
//!
//! Cepstra are a DCT of log-mel spectra rather than a vocoder-based mel
//! cepstrum, so absolute MCD values are only comparable within this crate.

pub mod error;
pub mod f0;
pub mod report;
pub mod spectral;

pub use error::{EvalError, Result};
pub use f0::{f0_metrics, track_f0, F0Config, F0Metrics};
pub use report::{evaluate_pair, report_schema, EvalConfig, MetricReport, UtteranceMetrics};
pub use spectral::{lsd, mcd, mcd_from_cepstra, mel_cepstra, LsdConfig, McdConfig, MCD_CONSTANT};
