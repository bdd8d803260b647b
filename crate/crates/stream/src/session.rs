//! Chunk-by-chunk encoding and decoding with cached causal history.

use streamdec_core::codec::CodecRuntime;
use streamdec_core::latent::LatentSequence;
use streamdec_core::nn::{CompiledNetwork, NetState};
use streamdec_core::quantizer::{normalize_codes, CodeFrame};
use streamdec_core::tensor::Tensor;
use streamdec_core::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Encoder,
    Decoder,
}

/// Per-layer history buffers plus the sub-hop sample remainder.
#[derive(Clone, Debug, PartialEq)]
pub struct StreamState {
    role: Role,
    net: NetState,
    initial: NetState,
    remainder: Vec<f64>,
}

fn shapes(state: &NetState) -> Vec<[usize; 3]> {
    state.buffers().iter().map(|b| b.shape()).collect()
}

impl StreamState {
    pub fn encoder(model: &CodecRuntime) -> Self {
        let net = model.analysis.init_state(1);
        Self {
            role: Role::Encoder,
            initial: net.clone(),
            net,
            remainder: Vec::new(),
        }
    }

    pub fn decoder(model: &CodecRuntime) -> Self {
        let net = model.decoder.init_state(1);
        Self {
            role: Role::Decoder,
            initial: net.clone(),
            net,
            remainder: Vec::new(),
        }
    }

    pub fn role(&self) -> Role {
        self.role
    }

    /// Samples carried over because they do not fill a hop yet.
    pub fn remainder(&self) -> &[f64] {
        &self.remainder
    }

    pub fn net(&self) -> &NetState {
        &self.net
    }

    /// Back to zero history.
    pub fn reset(&mut self) {
        self.net = self.initial.clone();
        self.remainder.clear();
    }

    fn check(&self, role: Role, net: &CompiledNetwork) -> Result<()> {
        if self.role != role || shapes(&self.net) != shapes(&net.init_state(1)) {
            return Err(Error::Shape(format!("{:?} stream state does not belong to this model", self.role)));
        }
        Ok(())
    }
}

/// Continuous (pre-quantization) latents for the whole hops available so far.
pub fn stream_encode_latents(chunk: &[f64], state: &mut StreamState, model: &CodecRuntime) -> Result<LatentSequence> {
    state.check(Role::Encoder, &model.analysis)?;
    if let Some(pos) = chunk.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("chunk sample {pos}")));
    }
    state.remainder.extend_from_slice(chunk);
    let usable = state.remainder.len() / model.hop * model.hop;
    if usable == 0 {
        return LatentSequence::new(Vec::new(), model.code_dim, model.frame_rate());
    }
    let x = Tensor::signal(&state.remainder[..usable]);
    state.remainder.drain(..usable);
    let z = model.analysis.forward_stream(&mut state.net, &x);
    LatentSequence::from_tensor(&z, model.frame_rate())
}

/// Emits `floor((carried + chunk.len()) / hop)` code frames.
pub fn stream_encode_chunk(chunk: &[f64], state: &mut StreamState, model: &CodecRuntime) -> Result<Vec<CodeFrame>> {
    let z = stream_encode_latents(chunk, state, model)?;
    if z.num_frames() == 0 {
        return Ok(Vec::new());
    }
    Ok(model.codebook.rvq_quantize(&z)?.0)
}

/// Emits `frames.len() × hop` samples.
pub fn stream_decode_chunk(frames: &[CodeFrame], state: &mut StreamState, model: &CodecRuntime) -> Result<Vec<f64>> {
    state.check(Role::Decoder, &model.decoder)?;
    if frames.is_empty() {
        return Ok(Vec::new());
    }
    let q = model.codebook.rvq_dequantize(frames, model.frame_rate())?;
    stream_decode_latents(&q, state, model)
}

/// Decodes quantized latents (normalized first in vocoder mode).
pub fn stream_decode_latents(latents: &LatentSequence, state: &mut StreamState, model: &CodecRuntime) -> Result<Vec<f64>> {
    state.check(Role::Decoder, &model.decoder)?;
    if latents.num_frames() == 0 {
        return Ok(Vec::new());
    }
    let input = match &model.norm {
        Some(stats) => normalize_codes(latents, stats)?.0,
        None => latents.clone(),
    };
    Ok(model.decoder.forward_stream(&mut state.net, &input.to_tensor()).into_vec())
}
