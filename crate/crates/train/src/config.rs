//! Experiment configuration: one TOML file fully determines a run.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use streamdec_core::adversary::{DiscriminatorConfig, DiscriminatorKind};
use streamdec_core::codec::{CodecConfig, GeneratorVariant, VariantId};
use streamdec_core::losses::{GanFlavor, LossWeights};

use crate::error::{Result, TrainError};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrainMode {
    /// Symmetric codec; stage 2 trains only the decoder.
    #[serde(rename = "symAD")]
    SymAd,
    /// Symmetric codec; stage 2 keeps training everything.
    #[serde(rename = "symAD_star")]
    SymAdStar,
    /// Encoder with a vocoder-style decoder, trained with the two-stage recipe.
    #[serde(rename = "asymAD")]
    AsymAd,
    /// Vocoder trained on normalized codes of a finished codec.
    #[serde(rename = "vocoder")]
    Vocoder,
    /// Joint training from scratch with hinge losses and STFT + multi-scale
    /// discriminators.
    #[serde(rename = "soundstream_baseline")]
    SoundStreamBaseline,
}

impl TrainMode {
    /// Whether stage 2 holds the encoder, projector and codebook fixed.
    pub fn freezes_encoder(self) -> bool {
        matches!(self, TrainMode::SymAd | TrainMode::AsymAd | TrainMode::Vocoder)
    }

    pub fn gan_flavor(self) -> GanFlavor {
        match self {
            TrainMode::SoundStreamBaseline => GanFlavor::Hinge,
            _ => GanFlavor::LeastSquares,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSchedule {
    pub mode: TrainMode,
    pub stage1_iters: u64,
    pub stage2_iters: u64,
    /// Iterations of vocoder training on normalized codes.
    pub vocoder_iters: u64,
    pub batch_size: usize,
    /// Crop length in samples; must be a multiple of the hop.
    pub segment_length: usize,
    pub gen_lr: f64,
    pub disc_lr: f64,
    /// Learning rates are multiplied by this once half of a stage is done.
    pub lr_decay: f64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    pub vocoder_variant: VariantId,
    pub vocoder_channels: usize,
    /// Steps between resumable snapshots; 0 disables them.
    pub checkpoint_every: u64,
    /// Moving-average window for smoothed loss summaries.
    pub smoothing_window: usize,
}

impl TrainSchedule {
    /// Learning rate for `step` of a stage lasting `total` iterations.
    pub fn lr_at(&self, base: f64, step: u64, total: u64) -> f64 {
        if total > 1 && step >= total / 2 {
            base * self.lr_decay
        } else {
            base
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CorpusSource {
    /// Every `.wav` file under `path` (recursively), sorted by path.
    Directory { path: PathBuf },
    /// Deterministic speech-like signals.
    Synthetic { utterances: usize, seconds: f64, seed: u64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    pub source: CorpusSource,
    /// The last this-many utterances are held out from training.
    pub heldout_utterances: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub name: String,
    pub seed: u64,
    /// Relative paths resolve against the output root.
    pub output_dir: PathBuf,
    pub corpus: CorpusConfig,
    pub codec: CodecConfig,
    pub discriminators: DiscriminatorConfig,
    pub weights: LossWeights,
    pub schedule: TrainSchedule,
}

impl ExperimentConfig {
    /// Full-band run: 48 kHz, 200k + 500k iterations.
    pub fn full_preset() -> Self {
        let codec = CodecConfig::full_scale();
        let channels = codec.encoder.output_channels();
        Self {
            schema_version: SCHEMA_VERSION,
            name: "full".into(),
            seed: 0,
            output_dir: PathBuf::from("runs/full"),
            corpus: CorpusConfig {
                source: CorpusSource::Directory {
                    path: PathBuf::from("data/train"),
                },
                heldout_utterances: 50,
            },
            discriminators: DiscriminatorConfig::full(),
            weights: LossWeights::default(),
            schedule: TrainSchedule {
                mode: TrainMode::SymAd,
                stage1_iters: 200_000,
                stage2_iters: 500_000,
                vocoder_iters: 500_000,
                batch_size: 16,
                segment_length: 48000,
                gen_lr: 1e-4,
                disc_lr: 2e-4,
                lr_decay: 0.5,
                grad_clip: 0.0,
                vocoder_variant: VariantId::V1,
                vocoder_channels: 512,
                checkpoint_every: 10_000,
                smoothing_window: 100,
            },
            codec,
        }
        .with_vocoder_channels(channels)
    }

    /// CPU-scale run: 24 kHz, narrow networks, 5k + 10k iterations.
    pub fn desk_preset() -> Self {
        let codec = CodecConfig::desk_scale();
        let channels = codec.encoder.output_channels();
        Self {
            schema_version: SCHEMA_VERSION,
            name: "desk".into(),
            seed: 0,
            output_dir: PathBuf::from("runs/desk"),
            corpus: CorpusConfig {
                source: CorpusSource::Synthetic {
                    utterances: 200,
                    seconds: 3.0,
                    seed: 7,
                },
                heldout_utterances: 10,
            },
            discriminators: DiscriminatorConfig::desk(),
            weights: LossWeights::default(),
            schedule: TrainSchedule {
                mode: TrainMode::SymAd,
                stage1_iters: 5_000,
                stage2_iters: 10_000,
                vocoder_iters: 10_000,
                batch_size: 4,
                segment_length: 9600,
                gen_lr: 1e-4,
                disc_lr: 2e-4,
                lr_decay: 0.5,
                grad_clip: 0.0,
                vocoder_variant: VariantId::V1,
                vocoder_channels: 64,
                checkpoint_every: 500,
                smoothing_window: 50,
            },
            codec,
        }
        .with_vocoder_channels(channels)
    }

    fn with_vocoder_channels(mut self, channels: usize) -> Self {
        self.schedule.vocoder_channels = channels;
        self
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "full" => Some(Self::full_preset()),
            "desk" => Some(Self::desk_preset()),
            _ => None,
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| TrainError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| TrainError::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            TrainError::Config(m) => TrainError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes to TOML")
    }

    /// SHA-256 over the canonical JSON of everything except `output_dir`,
    /// so moving a run does not change its identity.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        v.as_object_mut().expect("object").remove("output_dir");
        hex::encode(Sha256::digest(serde_json::to_vec(&v).expect("json")))
    }

    /// Codec configuration of the vocoder decoder trained in vocoder mode.
    pub fn vocoder_codec(&self) -> Result<CodecConfig> {
        let s = &self.schedule;
        if s.vocoder_variant == VariantId::Sym {
            return Err(TrainError::Config("vocoder_variant must be v0, v1 or v2".into()));
        }
        let mut codec = self.codec.clone();
        codec.generator = GeneratorVariant::for_id(s.vocoder_variant, &codec.encoder, s.vocoder_channels);
        codec.validate()?;
        Ok(codec)
    }

    /// Discriminators used by the adversarial stages of this mode.
    pub fn stage2_discriminators(&self) -> DiscriminatorConfig {
        match self.schedule.mode {
            TrainMode::SoundStreamBaseline => self
                .discriminators
                .clone()
                .with_kinds(&[DiscriminatorKind::Stftd, DiscriminatorKind::Msd]),
            _ => self.discriminators.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.schema_version != SCHEMA_VERSION {
            return bad(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        self.codec.validate()?;
        self.discriminators.validate()?;
        self.weights.validate()?;
        let s = &self.schedule;
        let hop = self.codec.hop();
        if s.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if s.segment_length == 0 || s.segment_length % hop != 0 {
            return bad(format!("segment_length {} must be a positive multiple of the hop {hop}", s.segment_length));
        }
        for (name, lr) in [("gen_lr", s.gen_lr), ("disc_lr", s.disc_lr)] {
            if !(lr.is_finite() && lr > 0.0) {
                return bad(format!("{name} must be positive"));
            }
        }
        if !(s.lr_decay > 0.0 && s.lr_decay <= 1.0) {
            return bad("lr_decay must lie in (0, 1]".into());
        }
        if !(s.grad_clip >= 0.0) {
            return bad("grad_clip must be nonnegative".into());
        }
        if s.smoothing_window == 0 {
            return bad("smoothing_window must be positive".into());
        }
        let sym = self.codec.generator.variant == VariantId::Sym;
        match s.mode {
            TrainMode::SymAd | TrainMode::SymAdStar | TrainMode::SoundStreamBaseline | TrainMode::Vocoder if !sym => {
                return bad(format!("mode {:?} trains the mirrored decoder; set codec.generator to sym", s.mode));
            }
            TrainMode::AsymAd if sym => {
                return bad("asymAD needs a v0, v1 or v2 codec.generator".into());
            }
            _ => {}
        }
        if s.mode == TrainMode::Vocoder {
            self.vocoder_codec()?;
        }
        if let CorpusSource::Synthetic { utterances, seconds, .. } = &self.corpus.source {
            if *utterances <= self.corpus.heldout_utterances {
                return bad("synthetic corpus must keep at least one training utterance".into());
            }
            if !(*seconds > 0.0) {
                return bad("synthetic utterances need a positive duration".into());
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate_and_round_trip() {
        for cfg in [ExperimentConfig::full_preset(), ExperimentConfig::desk_preset()] {
            cfg.validate().unwrap();
            let back = ExperimentConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
            assert_eq!(back, cfg);
            assert_eq!(back.hash(), cfg.hash());
        }
        let p = ExperimentConfig::full_preset();
        assert_eq!((p.schedule.stage1_iters, p.schedule.stage2_iters), (200_000, 500_000));
        assert_eq!(p.codec.sample_rate, 48000);
        let d = ExperimentConfig::desk_preset();
        assert_eq!((d.schedule.stage1_iters, d.schedule.stage2_iters), (5_000, 10_000));
        assert_eq!(d.codec.sample_rate, 24000);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = ExperimentConfig::desk_preset().to_toml_string().replace("seed = 0\n", "seed = 0\nsurprise = 1\n");
        assert!(matches!(ExperimentConfig::from_toml_str(&text), Err(TrainError::Config(_))));
    }

    #[test]
    fn wrong_schema_version_is_rejected() {
        let mut cfg = ExperimentConfig::desk_preset();
        cfg.schema_version = 99;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn hash_ignores_output_dir_only() {
        let a = ExperimentConfig::desk_preset();
        let mut b = a.clone();
        b.output_dir = PathBuf::from("elsewhere");
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn segment_must_be_hop_aligned() {
        let mut cfg = ExperimentConfig::desk_preset();
        cfg.schedule.segment_length = 9601;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn half_schedule_decay() {
        let s = ExperimentConfig::desk_preset().schedule;
        assert_eq!(s.lr_at(1.0, 0, 10), 1.0);
        assert_eq!(s.lr_at(1.0, 4, 10), 1.0);
        assert_eq!(s.lr_at(1.0, 5, 10), 0.5);
    }

    #[test]
    fn mode_names() {
        let names: Vec<String> = [
            TrainMode::SymAd,
            TrainMode::SymAdStar,
            TrainMode::AsymAd,
            TrainMode::Vocoder,
            TrainMode::SoundStreamBaseline,
        ]
        .iter()
        .map(|m| serde_json::to_string(m).unwrap())
        .collect();
        assert_eq!(names, ["\"symAD\"", "\"symAD_star\"", "\"asymAD\"", "\"vocoder\"", "\"soundstream_baseline\""]);
    }
}
