#![allow(dead_code)]

use std::path::Path;

use streamdec_core::adversary::{DiscLayer, DiscriminatorConfig, DiscriminatorKind};
use streamdec_core::codec::{CodecConfig, EncoderConfig, GeneratorVariant, VariantId};
use streamdec_core::losses::LossWeights;
use streamdec_core::nn::{Activation, WeightInit};
use streamdec_core::quantizer::QuantizerConfig;
use streamdec_core::signal::MelConfig;
use streamdec_train::config::{CorpusConfig, CorpusSource, TrainSchedule, SCHEMA_VERSION};
use streamdec_train::{Corpus, ExperimentConfig, TrainMode};

pub const SR: u32 = 8000;

fn l(out_channels: usize, kernel: usize, stride: usize) -> DiscLayer {
    DiscLayer {
        out_channels,
        kernel,
        stride,
        groups: 1,
    }
}

/// A codec and adversary small enough to train for a few steps in a test.
pub fn tiny_config(mode: TrainMode, dir: &Path) -> ExperimentConfig {
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
        sample_rate: SR,
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
            sample_rate: SR,
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
            stage1_iters: 6,
            stage2_iters: 4,
            vocoder_iters: 4,
            batch_size: 2,
            segment_length: 256,
            gen_lr: 1e-3,
            disc_lr: 1e-3,
            lr_decay: 0.5,
            grad_clip: 0.0,
            vocoder_variant: VariantId::V2,
            vocoder_channels: 8,
            checkpoint_every: 3,
            smoothing_window: 2,
        },
        codec,
    }
}

pub fn corpora(cfg: &ExperimentConfig) -> (Corpus, Corpus) {
    Corpus::from_config(&cfg.corpus, cfg.codec.sample_rate)
        .unwrap()
        .split(cfg.corpus.heldout_utterances)
        .unwrap()
}
