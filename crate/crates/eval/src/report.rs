//! Per-utterance scoring and the corpus-level metric report.

use serde::{Deserialize, Serialize};
use streamdec_core::signal::Waveform;

use crate::error::{EvalError, Result};
use crate::f0::{f0_metrics, F0Config};
use crate::spectral::{lsd, mcd, LsdConfig, McdConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub f0: F0Config,
    pub mcd: McdConfig,
    pub lsd: LsdConfig,
}

impl EvalConfig {
    pub fn for_rate(sample_rate: u32) -> Self {
        Self {
            f0: F0Config::default(),
            mcd: McdConfig::for_rate(sample_rate),
            lsd: LsdConfig::for_rate(sample_rate),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UtteranceMetrics {
    pub name: String,
    /// Hz.
    pub f0_rmse: f64,
    /// Percent.
    pub uv_error: f64,
    /// dB.
    pub mcd: f64,
    /// dB.
    pub lsd: f64,
}

/// Scores `test` against `reference`. Lengths may differ by at most one
/// analysis hop (trailing padding of the codec output).
pub fn evaluate_pair(name: &str, reference: &Waveform, test: &Waveform, cfg: &EvalConfig) -> Result<UtteranceMetrics> {
    let f0 = f0_metrics(reference, test, &cfg.f0)?;
    Ok(UtteranceMetrics {
        name: name.to_string(),
        f0_rmse: f0.f0_rmse,
        uv_error: f0.uv_error,
        mcd: mcd(reference, test, &cfg.mcd)?,
        lsd: lsd(reference, test, &cfg.lsd)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricReport {
    pub system: String,
    pub utterances: usize,
    pub f0_rmse: f64,
    pub uv_error: f64,
    pub mcd: f64,
    pub lsd: f64,
    /// Reserved for externally computed perceptual scores; never filled here.
    pub dnsmos: Option<f64>,
    pub config_hash: Option<String>,
    pub per_utterance: Vec<UtteranceMetrics>,
}

impl MetricReport {
    pub fn from_utterances(system: &str, per_utterance: Vec<UtteranceMetrics>) -> Result<Self> {
        if per_utterance.is_empty() {
            return Err(EvalError::EmptyCorpus);
        }
        let n = per_utterance.len() as f64;
        let mean = |f: fn(&UtteranceMetrics) -> f64| per_utterance.iter().map(f).sum::<f64>() / n;
        Ok(Self {
            system: system.to_string(),
            utterances: per_utterance.len(),
            f0_rmse: mean(|u| u.f0_rmse),
            uv_error: mean(|u| u.uv_error),
            mcd: mean(|u| u.mcd),
            lsd: mean(|u| u.lsd),
            dnsmos: None,
            config_hash: None,
            per_utterance,
        })
    }

    pub fn with_config_hash(mut self, hash: impl Into<String>) -> Self {
        self.config_hash = Some(hash.into());
        self
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| EvalError::Config(format!("metric report: {e}")))
    }

    /// One row per utterance plus a closing mean row.
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "{:<24} {:>12} {:>9} {:>10} {:>10}\n",
            "utterance", "F0RMSE (Hz)", "U/V (%)", "MCD (dB)", "LSD (dB)"
        );
        let row = |name: &str, f0: f64, uv: f64, mcd: f64, lsd: f64| {
            format!("{name:<24} {f0:>12.3} {uv:>9.3} {mcd:>10.3} {lsd:>10.3}\n")
        };
        for u in &self.per_utterance {
            out.push_str(&row(&u.name, u.f0_rmse, u.uv_error, u.mcd, u.lsd));
        }
        out.push_str(&row(
            &format!("{} (mean)", self.system),
            self.f0_rmse,
            self.uv_error,
            self.mcd,
            self.lsd,
        ));
        out
    }
}

/// JSON Schema for the serialized report.
pub fn report_schema() -> serde_json::Value {
    let num = serde_json::json!({"type": "number", "minimum": 0});
    let utt = serde_json::json!({
        "type": "object",
        "additionalProperties": false,
        "required": ["name", "f0_rmse", "uv_error", "mcd", "lsd"],
        "properties": {
            "name": {"type": "string"},
            "f0_rmse": num, "uv_error": num, "mcd": num, "lsd": num
        }
    });
    serde_json::json!({
        "$schema": "https://json-schema.org/draft/2020-12/schema",
        "title": "MetricReport",
        "type": "object",
        "additionalProperties": false,
        "required": ["system", "utterances", "f0_rmse", "uv_error", "mcd", "lsd", "dnsmos", "config_hash", "per_utterance"],
        "properties": {
            "system": {"type": "string"},
            "utterances": {"type": "integer", "minimum": 1},
            "f0_rmse": num, "uv_error": num, "mcd": num, "lsd": num,
            "dnsmos": {"type": ["number", "null"]},
            "config_hash": {"type": ["string", "null"]},
            "per_utterance": {"type": "array", "minItems": 1, "items": utt}
        }
    })
}
