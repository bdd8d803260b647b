#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use streamdec_core::adversary::{DiscLayer, DiscriminatorConfig, DiscriminatorKind};
use streamdec_core::checkpoint::Checkpoint;
use streamdec_core::codec::{Codec, CodecConfig, EncoderConfig, GeneratorVariant, VariantId};
use streamdec_core::losses::LossWeights;
use streamdec_core::nn::{Activation, WeightInit};
use streamdec_core::quantizer::{QuantizerConfig, ResidualCodebook};
use streamdec_core::signal::{save_wav, BitDepth, MelConfig, Waveform};
use streamdec_train::config::{CorpusConfig, CorpusSource, TrainSchedule, SCHEMA_VERSION};
use streamdec_train::{synthetic_speech, ExperimentConfig, TrainMode};

pub fn streamdec(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_streamdec"))
        .args(args)
        .env_remove("STREAMDEC_HOME")
        .output()
        .expect("binary runs")
}

pub fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

pub fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

pub fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

pub fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 path")
}

fn l(out_channels: usize, kernel: usize, stride: usize) -> DiscLayer {
    DiscLayer {
        out_channels,
        kernel,
        stride,
        groups: 1,
    }
}

/// An experiment small enough to run every stage in a few seconds.
pub fn tiny_config(mode: TrainMode, dir: &Path) -> ExperimentConfig {
    let sr = 8000;
    let encoder = EncoderConfig {
        downsample_factors: vec![2, 4],
        base_channels: 4,
        max_channels: 8,
        code_dim: 4,
        num_blocks_per_stage: 1,
        kernel: 3,
        activation: Activation::LeakyRelu { slope: 0.2 },
    };
    let generator = match mode {
        TrainMode::AsymAd => GeneratorVariant::for_id(VariantId::V2, &encoder, 8),
        _ => GeneratorVariant::sym(&encoder),
    };
    let codec = CodecConfig {
        sample_rate: sr,
        generator,
        encoder,
        quantizer: QuantizerConfig {
            num_books: 2,
            book_size: 8,
            reseed_interval: 5,
            kmeans_iters: 4,
            ..Default::default()
        },
        mel: MelConfig {
            sample_rate: sr,
            fft_size: 128,
            hop_length: 16,
            win_length: 64,
            num_mels: 16,
            fmin: 0.0,
            fmax: 4000.0,
            log_floor: 1e-5,
        },
        init: WeightInit::FanIn { gain: 1.0 },
    };
    ExperimentConfig {
        schema_version: SCHEMA_VERSION,
        name: "tiny".into(),
        seed: 3,
        output_dir: dir.to_path_buf(),
        corpus: CorpusConfig {
            source: CorpusSource::Synthetic {
                utterances: 8,
                seconds: 0.25,
                seed: 11,
            },
            heldout_utterances: 2,
        },
        discriminators: DiscriminatorConfig {
            kinds: vec![DiscriminatorKind::Mpd, DiscriminatorKind::Msd],
            periods: vec![2, 3],
            mpd_layers: vec![l(4, 5, 3), l(4, 3, 1)],
            msd_scales: 2,
            msd_layers: vec![l(4, 15, 1), l(4, 5, 1)],
            msd_first_spectral: true,
            stft_fft_size: 64,
            stft_hop: 16,
            stftd_layers: vec![l(4, 3, 1), l(4, 3, 1)],
            slope: 0.2,
        },
        weights: LossWeights::default(),
        schedule: TrainSchedule {
            mode,
            stage1_iters: 4,
            stage2_iters: 3,
            vocoder_iters: 3,
            batch_size: 2,
            segment_length: 256,
            gen_lr: 1e-3,
            disc_lr: 1e-3,
            lr_decay: 0.5,
            grad_clip: 0.0,
            vocoder_variant: VariantId::V2,
            vocoder_channels: 8,
            checkpoint_every: 2,
            smoothing_window: 2,
        },
        codec,
    }
}

pub fn write_config(cfg: &ExperimentConfig, path: &Path) -> PathBuf {
    std::fs::write(path, cfg.to_toml_string()).unwrap();
    path.to_path_buf()
}

/// Narrow 48 kHz codec with the full-rate frame layout: hop 300 and
/// 8 books of 1024 random entries.
pub fn wide_codec(variant: VariantId, seed: u64) -> Codec {
    let encoder = EncoderConfig {
        downsample_factors: vec![2, 3, 5, 10],
        base_channels: 2,
        max_channels: 4,
        code_dim: 4,
        num_blocks_per_stage: 1,
        kernel: 3,
        activation: Activation::LeakyRelu { slope: 0.2 },
    };
    let generator = match variant {
        VariantId::Sym => GeneratorVariant::sym(&encoder),
        v => GeneratorVariant::for_id(v, &encoder, 16),
    };
    let quantizer = QuantizerConfig::default();
    let config = CodecConfig {
        sample_rate: 48_000,
        generator,
        mel: MelConfig::for_rate(48_000),
        quantizer: quantizer.clone(),
        encoder,
        init: WeightInit::FanIn { gain: 1.0 },
    };
    let mut codec = Codec::init(config, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let entries = (0..quantizer.num_books)
        .map(|b| {
            let scale = 0.5f64.powi(b as i32);
            (0..quantizer.book_size)
                .map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0) * scale).collect())
                .collect()
        })
        .collect();
    codec.codebook = ResidualCodebook::from_entries(entries, quantizer.decay, quantizer.epsilon).unwrap();
    codec.codebook.freeze();
    codec
}

pub fn save_checkpoint(codec: &Codec, config_hash: &str, path: &Path) -> PathBuf {
    Checkpoint::from_codec(codec, config_hash, serde_json::json!({})).save(path).unwrap();
    path.to_path_buf()
}

pub fn speech_wav(path: &Path, seconds: f64, sample_rate: u32, seed: u64) -> PathBuf {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = (seconds * sample_rate as f64).round() as usize;
    let wave: Waveform = synthetic_speech(n, sample_rate, &mut rng);
    save_wav(&wave, path, BitDepth::Sixteen).unwrap();
    path.to_path_buf()
}
