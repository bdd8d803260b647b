//! The waveform autoencoder: causal encoder, projector, and the decoder
//! family (mirrored decoder and the multi-receptive-field generators).

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::latent::LatentSequence;
use crate::nn::{Activation, Block, CompiledNetwork, Conv1d, ConvTranspose1d, Initializer, Network, ParamStore, WeightInit};
use crate::quantizer::{normalize_codes, CodeFrame, NormStats, QuantizerConfig, ResidualCodebook};
use crate::signal::{MelConfig, Waveform};
use crate::tensor::{self, ConvGeometry, Tensor};

pub const ENCODER_PREFIX: &str = "enc.";
pub const PROJECTOR_PREFIX: &str = "proj.";
pub const DECODER_PREFIX: &str = "dec.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub downsample_factors: Vec<usize>,
    pub base_channels: usize,
    /// Channel width cap for the doubling schedule.
    pub max_channels: usize,
    pub code_dim: usize,
    /// Residual units per stage; unit `j` uses dilation `3^j`.
    pub num_blocks_per_stage: usize,
    pub kernel: usize,
    pub activation: Activation,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            downsample_factors: vec![2, 2, 3, 5, 5],
            base_channels: 16,
            max_channels: 512,
            code_dim: 64,
            num_blocks_per_stage: 3,
            kernel: 7,
            activation: Activation::LeakyRelu { slope: 0.2 },
        }
    }
}

impl EncoderConfig {
    pub fn hop(&self) -> usize {
        self.downsample_factors.iter().product()
    }

    /// Channel width entering stage `i`; `width(0)` is the input conv width.
    fn width(&self, stage: usize) -> usize {
        (self.base_channels << stage).min(self.max_channels)
    }

    pub fn output_channels(&self) -> usize {
        self.width(self.downsample_factors.len())
    }

    pub fn validate(&self) -> Result<()> {
        if self.downsample_factors.is_empty() || self.downsample_factors.contains(&0) {
            return Err(Error::Config("downsample factors must be non-empty and ≥ 1".into()));
        }
        if self.base_channels == 0 || self.code_dim == 0 || self.kernel == 0 {
            return Err(Error::Config("encoder widths and kernel must be positive".into()));
        }
        if self.max_channels < self.base_channels {
            return Err(Error::Config("max_channels below base_channels".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VariantId {
    Sym,
    V0,
    V1,
    V2,
}

impl VariantId {
    pub fn code(self) -> u8 {
        match self {
            VariantId::Sym => 0,
            VariantId::V0 => 1,
            VariantId::V1 => 2,
            VariantId::V2 => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => VariantId::Sym,
            1 => VariantId::V0,
            2 => VariantId::V1,
            3 => VariantId::V2,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            VariantId::Sym => "sym",
            VariantId::V0 => "v0",
            VariantId::V1 => "v1",
            VariantId::V2 => "v2",
        }
    }
}

impl std::fmt::Display for VariantId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorVariant {
    pub variant: VariantId,
    /// Width after the input conv; halves at each upsampling step.
    /// The mirrored decoder takes its widths from the encoder instead.
    pub channels: usize,
    pub upsample_factors: Vec<usize>,
    /// One residual stack per kernel (v0).
    pub branch_kernels: Vec<usize>,
    /// Shared kernel of the grouped stack (v1/v2).
    pub group_kernel: usize,
    pub num_groups: usize,
    /// Dilations of the residual units inside each fusion block.
    pub dilations: Vec<usize>,
    pub activation: Activation,
}

impl GeneratorVariant {
    pub fn sym(enc: &EncoderConfig) -> Self {
        Self {
            variant: VariantId::Sym,
            channels: enc.output_channels(),
            upsample_factors: enc.downsample_factors.iter().rev().copied().collect(),
            branch_kernels: Vec::new(),
            group_kernel: 0,
            num_groups: 1,
            dilations: Vec::new(),
            activation: Activation::Elu,
        }
    }

    pub fn v0(enc: &EncoderConfig, channels: usize) -> Self {
        Self {
            variant: VariantId::V0,
            channels,
            upsample_factors: enc.downsample_factors.iter().rev().copied().collect(),
            branch_kernels: vec![3, 7, 11],
            group_kernel: 0,
            num_groups: 3,
            dilations: vec![1, 3, 5],
            activation: Activation::Elu,
        }
    }

    pub fn v1(enc: &EncoderConfig, channels: usize) -> Self {
        Self {
            variant: VariantId::V1,
            group_kernel: 11,
            branch_kernels: Vec::new(),
            ..Self::v0(enc, channels)
        }
    }

    pub fn v2(enc: &EncoderConfig, channels: usize) -> Self {
        Self {
            group_kernel: 3,
            variant: VariantId::V2,
            ..Self::v1(enc, channels)
        }
    }

    pub fn for_id(id: VariantId, enc: &EncoderConfig, channels: usize) -> Self {
        match id {
            VariantId::Sym => Self::sym(enc),
            VariantId::V0 => Self::v0(enc, channels),
            VariantId::V1 => Self::v1(enc, channels),
            VariantId::V2 => Self::v2(enc, channels),
        }
    }

    pub fn hop(&self) -> usize {
        self.upsample_factors.iter().product()
    }

    pub fn validate(&self, enc: &EncoderConfig) -> Result<()> {
        if self.hop() != enc.hop() {
            return Err(Error::Config(format!(
                "decoder upsampling {} does not match encoder hop {}",
                self.hop(),
                enc.hop()
            )));
        }
        match self.variant {
            VariantId::Sym => {
                let mirrored: Vec<usize> = enc.downsample_factors.iter().rev().copied().collect();
                if self.upsample_factors != mirrored {
                    return Err(Error::Config("sym decoder must mirror the encoder factors".into()));
                }
            }
            VariantId::V0 => {
                let mut k = self.branch_kernels.clone();
                k.sort_unstable();
                k.dedup();
                if k.len() != self.branch_kernels.len() || k.is_empty() {
                    return Err(Error::Config("v0 needs at least one branch, all kernels distinct".into()));
                }
            }
            VariantId::V1 | VariantId::V2 => {
                if self.group_kernel == 0 || self.num_groups == 0 {
                    return Err(Error::Config("grouped variants need a kernel and ≥ 1 group".into()));
                }
            }
        }
        if self.variant != VariantId::Sym {
            if self.dilations.is_empty() {
                return Err(Error::Config("fusion blocks need at least one dilation".into()));
            }
            if self.channels >> self.upsample_factors.len() == 0 {
                return Err(Error::Config(format!(
                    "{} channels cannot be halved {} times",
                    self.channels,
                    self.upsample_factors.len()
                )));
            }
        }
        Ok(())
    }
}

/// Geometry of one causal convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CausalConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
    pub left_pad: usize,
}

impl CausalConvSpec {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, dilation: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            dilation,
            left_pad: (kernel - 1) * dilation,
        }
    }
}

/// `out[t] = Σ_k w[k]·in[t − k·dilation]` (per strided position), zero
/// history before the first sample; output length `ceil(len / stride)`.
pub fn causal_conv_forward(input: &Tensor, spec: &CausalConvSpec, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    if input.channels() != spec.in_channels || input.is_empty() {
        return Err(Error::Shape(format!(
            "input {:?} does not match {} input channels",
            input.shape(),
            spec.in_channels
        )));
    }
    if weight.shape() != [spec.out_channels, spec.in_channels, spec.kernel] {
        return Err(Error::Shape(format!("weight shape {:?}", weight.shape())));
    }
    let geo = ConvGeometry::causal(input.len(), spec.stride, spec.dilation, 1);
    Ok(tensor::conv1d(input, weight, bias, &geo))
}

fn residual_unit(name: &str, channels: usize, kernel: usize, dilation: usize, groups: usize, act: Activation, second_kernel: usize) -> Block {
    Block::Residual(vec![
        Block::Act(act),
        Block::Conv(Conv1d::causal(format!("{name}.c0"), channels, channels, kernel).dilation(dilation).groups(groups)),
        Block::Act(act),
        Block::Conv(Conv1d::causal(format!("{name}.c1"), channels, channels, second_kernel).groups(groups)),
    ])
}

/// The fusion block applied after each generator upsampling step.
pub fn mrf_blocks(prefix: &str, channels: usize, gen: &GeneratorVariant) -> Result<Vec<Block>> {
    let act = gen.activation;
    match gen.variant {
        VariantId::Sym => Err(Error::Config("the mirrored decoder has no fusion block".into())),
        VariantId::V0 => {
            let branches = gen
                .branch_kernels
                .iter()
                .enumerate()
                .map(|(b, &k)| {
                    gen.dilations
                        .iter()
                        .enumerate()
                        .map(|(j, &d)| residual_unit(&format!("{prefix}.b{b}.r{j}"), channels, k, d, 1, act, k))
                        .collect()
                })
                .collect();
            Ok(vec![Block::Branches(branches)])
        }
        VariantId::V1 | VariantId::V2 => {
            let g = gen.num_groups;
            let k = gen.group_kernel;
            let mut blocks = vec![Block::Repeat(g)];
            for (j, &d) in gen.dilations.iter().enumerate() {
                blocks.push(residual_unit(&format!("{prefix}.r{j}"), channels * g, k, d, g, act, k));
            }
            blocks.push(Block::GroupMean(g));
            Ok(blocks)
        }
    }
}

/// Runs one fusion block on `[B, C, T]` features with weights stored under `prefix`.
pub fn mrf_forward(frames: &Tensor, gen: &GeneratorVariant, params: &ParamStore, prefix: &str) -> Result<Tensor> {
    let net = Network::new(mrf_blocks(prefix, frames.channels(), gen)?);
    Ok(net.compile(params)?.forward(frames))
}

pub fn build_encoder(enc: &EncoderConfig) -> Network {
    let act = enc.activation;
    let mut blocks = vec![Block::Conv(Conv1d::causal("enc.conv_in", 1, enc.base_channels, enc.kernel))];
    let mut ch = enc.base_channels;
    for (i, &s) in enc.downsample_factors.iter().enumerate() {
        for j in 0..enc.num_blocks_per_stage {
            let d = 3usize.pow(j as u32);
            blocks.push(residual_unit(&format!("enc.s{i}.r{j}"), ch, enc.kernel, d, 1, act, 1));
        }
        let next = enc.width(i + 1);
        blocks.push(Block::Act(act));
        blocks.push(Block::Conv(Conv1d::causal(format!("enc.s{i}.down"), ch, next, 2 * s).stride(s)));
        ch = next;
    }
    blocks.push(Block::Act(act));
    blocks.push(Block::Conv(Conv1d::causal("enc.conv_out", ch, ch, 3)));
    Network::new(blocks)
}

/// Linear map from encoder features to the code dimension.
pub fn build_projector(enc: &EncoderConfig) -> Network {
    Network::new(vec![Block::Conv(Conv1d::causal("proj.conv", enc.output_channels(), enc.code_dim, 1))])
}

pub fn build_decoder(gen: &GeneratorVariant, enc: &EncoderConfig) -> Result<Network> {
    gen.validate(enc)?;
    let act = gen.activation;
    let mut blocks = Vec::new();
    match gen.variant {
        VariantId::Sym => {
            let stages = enc.downsample_factors.len();
            let mut ch = enc.output_channels();
            blocks.push(Block::Conv(Conv1d::causal("dec.conv_in", enc.code_dim, ch, enc.kernel)));
            for (u, &s) in gen.upsample_factors.iter().enumerate() {
                let stage = stages - 1 - u;
                let next = enc.width(stage);
                blocks.push(Block::Act(act));
                blocks.push(Block::ConvTranspose(ConvTranspose1d::new(format!("dec.s{u}.up"), ch, next, s)));
                ch = next;
                for j in 0..enc.num_blocks_per_stage {
                    let d = 3usize.pow(j as u32);
                    blocks.push(residual_unit(&format!("dec.s{u}.r{j}"), ch, enc.kernel, d, 1, act, 1));
                }
            }
            blocks.push(Block::Act(act));
            blocks.push(Block::Conv(Conv1d::causal("dec.conv_out", ch, 1, enc.kernel)));
        }
        _ => {
            let mut ch = gen.channels;
            blocks.push(Block::Conv(Conv1d::causal("dec.conv_pre", enc.code_dim, ch, 7)));
            for (u, &s) in gen.upsample_factors.iter().enumerate() {
                blocks.push(Block::Act(act));
                blocks.push(Block::ConvTranspose(ConvTranspose1d::new(format!("dec.up{u}"), ch, ch / 2, s)));
                ch /= 2;
                blocks.extend(mrf_blocks(&format!("dec.up{u}.mrf"), ch, gen)?);
            }
            blocks.push(Block::Act(act));
            blocks.push(Block::Conv(Conv1d::causal("dec.conv_post", ch, 1, 7)));
        }
    }
    blocks.push(Block::Tanh);
    Ok(Network::new(blocks))
}

/// Everything that determines a codec's architecture and analysis settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodecConfig {
    pub sample_rate: u32,
    pub encoder: EncoderConfig,
    pub generator: GeneratorVariant,
    pub quantizer: QuantizerConfig,
    pub mel: MelConfig,
    pub init: WeightInit,
}

impl CodecConfig {
    /// Full-band defaults: 48 kHz, hop 300, 8 × 1024 codebooks.
    pub fn full_scale() -> Self {
        let encoder = EncoderConfig::default();
        Self {
            sample_rate: 48000,
            generator: GeneratorVariant::sym(&encoder),
            encoder,
            quantizer: QuantizerConfig::default(),
            mel: MelConfig::for_rate(48000),
            init: WeightInit::Normal { std: 0.01 },
        }
    }

    /// Reduced widths at 24 kHz for CPU-scale runs.
    pub fn desk_scale() -> Self {
        let encoder = EncoderConfig {
            base_channels: 8,
            max_channels: 64,
            num_blocks_per_stage: 1,
            ..EncoderConfig::default()
        };
        Self {
            sample_rate: 24000,
            generator: GeneratorVariant::sym(&encoder),
            encoder,
            quantizer: QuantizerConfig::default(),
            mel: MelConfig::for_rate(24000),
            init: WeightInit::FanIn { gain: 1.0 },
        }
    }

    pub fn hop(&self) -> usize {
        self.encoder.hop()
    }

    pub fn frame_rate(&self) -> f64 {
        self.sample_rate as f64 / self.hop() as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.sample_rate == 0 {
            return Err(Error::Config("sample rate must be positive".into()));
        }
        self.encoder.validate()?;
        self.generator.validate(&self.encoder)?;
        self.quantizer.validate()?;
        self.mel.validate()?;
        if self.mel.sample_rate != self.sample_rate {
            return Err(Error::Config("mel sample rate differs from codec sample rate".into()));
        }
        self.init.validate()?;
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }
}

/// A codec's networks (not yet bound to weights).
#[derive(Clone, Debug, PartialEq)]
pub struct CodecNets {
    pub encoder: Network,
    pub projector: Network,
    pub decoder: Network,
}

impl CodecNets {
    pub fn build(cfg: &CodecConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            encoder: build_encoder(&cfg.encoder),
            projector: build_projector(&cfg.encoder),
            decoder: build_decoder(&cfg.generator, &cfg.encoder)?,
        })
    }

    /// Encoder followed by projector, as one network.
    pub fn analysis(&self) -> Network {
        let mut blocks = self.encoder.blocks.clone();
        blocks.extend(self.projector.blocks.clone());
        Network::new(blocks)
    }
}

/// Weights, codebook and optional vocoder normalization of one codec.
#[derive(Clone, Debug)]
pub struct Codec {
    pub config: CodecConfig,
    pub nets: CodecNets,
    pub params: ParamStore,
    pub codebook: ResidualCodebook,
    /// Present for vocoder-mode decoders trained on normalized codes.
    pub norm: Option<NormStats>,
}

impl Codec {
    pub fn init(config: CodecConfig, seed: u64) -> Result<Self> {
        let nets = CodecNets::build(&config)?;
        let mut params = ParamStore::new();
        let mut init = Initializer::with_scheme(seed, config.init);
        nets.encoder.init(&mut params, &mut init);
        nets.projector.init(&mut params, &mut init);
        nets.decoder.init(&mut params, &mut init);
        let codebook = ResidualCodebook::zeros(&config.quantizer, config.encoder.code_dim);
        Ok(Self {
            config,
            nets,
            params,
            codebook,
            norm: None,
        })
    }

    pub fn from_parts(config: CodecConfig, params: ParamStore, codebook: ResidualCodebook, norm: Option<NormStats>) -> Result<Self> {
        let nets = CodecNets::build(&config)?;
        if codebook.dim() != config.encoder.code_dim {
            return Err(Error::Shape("codebook dim differs from code_dim".into()));
        }
        let codec = Self {
            config,
            nets,
            params,
            codebook,
            norm,
        };
        codec.runtime()?;
        Ok(codec)
    }

    /// Replaces the decoder with a freshly initialized one of another variant.
    pub fn with_decoder(&self, generator: GeneratorVariant, seed: u64) -> Result<Self> {
        let mut config = self.config.clone();
        config.generator = generator;
        let nets = CodecNets::build(&config)?;
        let mut params = ParamStore::new();
        params.extend(self.params.with_prefix(ENCODER_PREFIX));
        params.extend(self.params.with_prefix(PROJECTOR_PREFIX));
        nets.decoder.init(&mut params, &mut Initializer::with_scheme(seed, config.init));
        Ok(Self {
            config,
            nets,
            params,
            codebook: self.codebook.clone(),
            norm: None,
        })
    }

    /// Weight-resolved networks for inference.
    pub fn runtime(&self) -> Result<CodecRuntime> {
        Ok(CodecRuntime {
            analysis: self.nets.analysis().compile(&self.params)?,
            decoder: self.nets.decoder.compile(&self.params)?,
            codebook: self.codebook.clone(),
            norm: self.norm.clone(),
            hop: self.config.hop(),
            sample_rate: self.config.sample_rate,
            code_dim: self.config.encoder.code_dim,
        })
    }

    pub fn encode(&self, wave: &Waveform) -> Result<LatentSequence> {
        self.runtime()?.encode(wave)
    }

    pub fn decode(&self, latents: &LatentSequence) -> Result<Waveform> {
        self.runtime()?.decode(latents)
    }
}

/// Compiled encoder/decoder pair plus codebook.
#[derive(Clone, Debug)]
pub struct CodecRuntime {
    pub analysis: CompiledNetwork,
    pub decoder: CompiledNetwork,
    pub codebook: ResidualCodebook,
    pub norm: Option<NormStats>,
    pub hop: usize,
    pub sample_rate: u32,
    pub code_dim: usize,
}

impl CodecRuntime {
    pub fn frame_rate(&self) -> f64 {
        self.sample_rate as f64 / self.hop as f64
    }

    /// Pre-quantization latents, one frame per started hop.
    pub fn encode(&self, wave: &Waveform) -> Result<LatentSequence> {
        if wave.sample_rate() != self.sample_rate {
            return Err(Error::Config(format!(
                "waveform at {} Hz, codec at {} Hz",
                wave.sample_rate(),
                self.sample_rate
            )));
        }
        if wave.is_empty() {
            return Err(Error::EmptyAudio("encoder input".into()));
        }
        let padded = wave.len().div_ceil(self.hop) * self.hop;
        let x = Tensor::signal(wave.with_len(padded).samples());
        LatentSequence::from_tensor(&self.analysis.forward(&x), self.frame_rate())
    }

    pub fn encode_codes(&self, wave: &Waveform) -> Result<Vec<CodeFrame>> {
        let z = self.encode(wave)?;
        Ok(self.codebook.rvq_quantize(&z)?.0)
    }

    /// Decodes quantized latents (normalized first in vocoder mode).
    pub fn decode(&self, latents: &LatentSequence) -> Result<Waveform> {
        if latents.dim() != self.code_dim {
            return Err(Error::Shape(format!("latent dim {} vs code dim {}", latents.dim(), self.code_dim)));
        }
        if latents.num_frames() == 0 {
            return Ok(Waveform::silence(0, self.sample_rate));
        }
        let input = match &self.norm {
            Some(stats) => normalize_codes(latents, stats)?.0,
            None => latents.clone(),
        };
        let y = self.decoder.forward(&input.to_tensor());
        Waveform::new(y.into_vec(), self.sample_rate)
    }

    pub fn decode_codes(&self, codes: &[CodeFrame]) -> Result<Waveform> {
        let q = self.codebook.rvq_dequantize(codes, self.frame_rate())?;
        self.decode(&q)
    }

    /// Batch reconstruction through the quantizer.
    pub fn reconstruct(&self, wave: &Waveform) -> Result<Waveform> {
        let codes = self.encode_codes(wave)?;
        let mut out = self.decode_codes(&codes)?;
        if out.len() > wave.len() {
            out = out.slice(0, wave.len());
        }
        Ok(out)
    }
}
