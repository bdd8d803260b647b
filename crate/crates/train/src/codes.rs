//! Quantized-latent datasets with corpus-level normalization statistics,
//! the input of vocoder training.

use std::path::Path;

use serde::{Deserialize, Serialize};
use streamdec_core::codec::Codec;
use streamdec_core::latent::LatentSequence;
use streamdec_core::quantizer::{normalize_codes, NormStats};
use streamdec_core::tensor::Tensor;

use crate::corpus::Corpus;
use crate::error::{Result, TrainError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodedUtterance {
    pub name: String,
    pub num_samples: usize,
    /// One index per book per frame.
    pub codes: Vec<Vec<u16>>,
    /// Quantized latents, frame-major (`frames × dim`), before normalization.
    pub latents: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodesDataset {
    pub config_hash: String,
    pub codec_hash: String,
    pub dim: usize,
    pub frame_rate: f64,
    pub hop: usize,
    pub stats: NormStats,
    pub utterances: Vec<CodedUtterance>,
}

impl CodesDataset {
    pub fn latents(&self, i: usize) -> Result<LatentSequence> {
        Ok(LatentSequence::new(self.utterances[i].latents.clone(), self.dim, self.frame_rate)?)
    }

    /// Normalized latents of utterance `i` as `[1, dim, frames]`.
    pub fn normalized_tensor(&self, i: usize) -> Result<Tensor> {
        Ok(normalize_codes(&self.latents(i)?, &self.stats)?.0.to_tensor())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("dataset serializes")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| TrainError::io(parent, e))?;
        }
        std::fs::write(path, self.to_bytes()).map_err(|e| TrainError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| TrainError::io(path, e))?;
        serde_json::from_slice(&bytes).map_err(|e| TrainError::Corrupt {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }
}

/// Encodes and quantizes every utterance with a finished codec and gathers
/// per-dimension statistics over all frames.
pub fn extract_normalized_codes(codec: &Codec, corpus: &Corpus, config_hash: &str) -> Result<CodesDataset> {
    if !codec.codebook.is_frozen() {
        return Err(TrainError::Prerequisite(
            "code extraction needs a checkpoint with a frozen codebook (finish stage 1 first)".into(),
        ));
    }
    if corpus.is_empty() {
        return Err(TrainError::EmptyCorpus("nothing to extract codes from".into()));
    }
    let rt = codec.runtime()?;
    let mut seqs = Vec::with_capacity(corpus.len());
    let mut utterances = Vec::with_capacity(corpus.len());
    for u in &corpus.utterances {
        let z = rt.encode(&u.wave)?;
        let (codes, q, _) = rt.codebook.rvq_quantize(&z)?;
        utterances.push(CodedUtterance {
            name: u.name.clone(),
            num_samples: u.wave.len(),
            codes: codes.into_iter().map(|c| c.0).collect(),
            latents: q.vectors().to_vec(),
        });
        seqs.push(q);
    }
    Ok(CodesDataset {
        config_hash: config_hash.to_string(),
        codec_hash: codec.config.hash(),
        dim: rt.code_dim,
        frame_rate: rt.frame_rate(),
        hop: rt.hop,
        stats: NormStats::from_sequences(&seqs)?,
        utterances,
    })
}
