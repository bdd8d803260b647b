//! Checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      4 bytes  "SDCK"
//! version    u32
//! meta_len   u64
//! meta       meta_len bytes of UTF-8 JSON (CheckpointMeta)
//! count      u32
//! count × {
//!     name_len u16, name (UTF-8),
//!     shape    3 × u32,
//!     data     product(shape) × f64
//! }
//! ```
//!
//! Tensor names: codec weights under `enc.`, `proj.`, `dec.`; codebook state
//! as `vq.entries` `[books, size, dim]`, `vq.ema_counts` `[1, books, size]`,
//! `vq.ema_sums` `[books, size, dim]`; normalization statistics as
//! `norm.mean` / `norm.std` `[1, 1, dim]`; training-only state under
//! `disc.` and `opt.`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::codec::{Codec, CodecConfig, DECODER_PREFIX, ENCODER_PREFIX, PROJECTOR_PREFIX};
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::quantizer::{NormStats, ResidualCodebook};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SDCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub codec: CodecConfig,
    /// Hash of the codec configuration.
    pub codec_hash: String,
    /// Hash of the full experiment configuration that produced this file.
    pub config_hash: String,
    pub codebook_frozen: bool,
    pub codebook_decay: f64,
    pub codebook_epsilon: f64,
    /// Free-form producer metadata (stage, step, experiment config echo).
    pub extra: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: BTreeMap<String, Tensor>,
}

fn codec_prefix(name: &str) -> bool {
    [ENCODER_PREFIX, PROJECTOR_PREFIX, DECODER_PREFIX]
        .iter()
        .any(|p| name.starts_with(p))
}

impl Checkpoint {
    pub fn from_codec(codec: &Codec, config_hash: &str, extra: serde_json::Value) -> Self {
        let mut tensors: BTreeMap<String, Tensor> = codec.params.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        let cb = &codec.codebook;
        let (b, k, d) = (cb.num_books(), cb.book_size(), cb.dim());
        tensors.insert("vq.entries".into(), Tensor::from_vec([b, k, d], cb.entries().to_vec()));
        tensors.insert("vq.ema_counts".into(), Tensor::from_vec([1, b, k], cb.ema_counts().to_vec()));
        tensors.insert("vq.ema_sums".into(), Tensor::from_vec([b, k, d], cb.ema_sums().to_vec()));
        if let Some(n) = &codec.norm {
            tensors.insert("norm.mean".into(), Tensor::from_vec([1, 1, n.dim()], n.mean.clone()));
            tensors.insert("norm.std".into(), Tensor::from_vec([1, 1, n.dim()], n.std.clone()));
        }
        Self {
            meta: CheckpointMeta {
                codec_hash: codec.config.hash(),
                codec: codec.config.clone(),
                config_hash: config_hash.to_string(),
                codebook_frozen: cb.is_frozen(),
                codebook_decay: cb.decay(),
                codebook_epsilon: cb.epsilon(),
                extra,
            },
            tensors,
        }
    }

    pub fn to_codec(&self) -> Result<Codec> {
        if self.meta.codec.hash() != self.meta.codec_hash {
            return Err(Error::Checkpoint("codec configuration does not match its recorded hash".into()));
        }
        let mut params = ParamStore::new();
        for (k, v) in &self.tensors {
            if codec_prefix(k) {
                params.insert(k.clone(), v.clone());
            }
        }
        let get = |name: &str| {
            self.tensors
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))
        };
        let entries = get("vq.entries")?;
        let [b, k, d] = entries.shape();
        let codebook = ResidualCodebook::from_parts(
            b,
            k,
            d,
            entries.data().to_vec(),
            get("vq.ema_counts")?.data().to_vec(),
            get("vq.ema_sums")?.data().to_vec(),
            self.meta.codebook_decay,
            self.meta.codebook_epsilon,
            self.meta.codebook_frozen,
        )?;
        let norm = match (self.tensors.get("norm.mean"), self.tensors.get("norm.std")) {
            (Some(m), Some(s)) => Some(NormStats {
                mean: m.data().to_vec(),
                std: s.data().to_vec(),
            }),
            (None, None) => None,
            _ => return Err(Error::Checkpoint("incomplete normalization statistics".into())),
        };
        Codec::from_parts(self.meta.codec.clone(), params, codebook, norm)
            .map_err(|e| Error::Checkpoint(format!("weights do not fit the recorded configuration: {e}")))
    }

    /// Tensors whose names start with `prefix`, with the prefix kept.
    pub fn with_prefix(&self, prefix: &str) -> BTreeMap<String, Tensor> {
        self.tensors
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    pub fn manifest(&self) -> Vec<(String, [usize; 3])> {
        self.tensors.iter().map(|(k, v)| (k.clone(), v.shape())).collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = serde_json::to_vec(&self.meta).expect("metadata serializes");
        let mut out = Vec::with_capacity(64 + meta.len() + self.tensors.values().map(|t| t.numel() * 8 + 64).sum::<usize>());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            for s in t.shape() {
                out.extend_from_slice(&(s as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let meta_len = r.u64()? as usize;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len)?)
            .map_err(|e| Error::Checkpoint(format!("metadata: {e}")))?;
        let count = r.u32()?;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
                .to_string();
            let shape = [r.u32()? as usize, r.u32()? as usize, r.u32()? as usize];
            let n = shape.iter().product::<usize>();
            let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.insert(name, Tensor::from_vec(shape, data));
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { meta, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
        }
        let tmp = path.with_extension("partial");
        std::fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// SHA-256 of the tensors under `prefix`, independent of metadata.
    pub fn tensor_hash(&self, prefix: &str) -> String {
        let mut h = Sha256::new();
        for (k, t) in self.tensors.iter().filter(|(k, _)| k.starts_with(prefix)) {
            h.update(k.as_bytes());
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Checkpoint(format!("truncated at byte {} (needed {n} more)", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::WeightInit;
    use crate::codec::{EncoderConfig, GeneratorVariant};
    use crate::nn::Activation;
    use crate::quantizer::QuantizerConfig;
    use crate::signal::MelConfig;

    fn small_codec() -> Codec {
        let encoder = EncoderConfig {
            downsample_factors: vec![2, 3],
            base_channels: 2,
            max_channels: 4,
            code_dim: 3,
            num_blocks_per_stage: 1,
            kernel: 3,
            activation: Activation::LeakyRelu { slope: 0.2 },
        };
        let cfg = CodecConfig {
            sample_rate: 600,
            generator: GeneratorVariant::v2(&encoder, 8),
            encoder,
            quantizer: QuantizerConfig {
                num_books: 2,
                book_size: 4,
                ..Default::default()
            },
            mel: MelConfig {
                sample_rate: 600,
                fft_size: 64,
                hop_length: 6,
                win_length: 32,
                num_mels: 8,
                fmin: 0.0,
                fmax: 300.0,
                log_floor: 1e-5,
            },
            init: WeightInit::Normal { std: 0.1 },
        };
        Codec::init(cfg, 1).unwrap()
    }

    #[test]
    fn round_trip_preserves_everything() {
        let mut codec = small_codec();
        codec.codebook.freeze();
        codec.norm = Some(NormStats {
            mean: vec![0.1, 0.2, 0.3],
            std: vec![1.0, 2.0, 0.0],
        });
        let ck = Checkpoint::from_codec(&codec, "abc", serde_json::json!({"stage": 1}));
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        let restored = back.to_codec().unwrap();
        assert_eq!(restored.params, codec.params);
        assert_eq!(restored.codebook, codec.codebook);
        assert_eq!(restored.norm, codec.norm);
        assert!(back.manifest().iter().any(|(n, s)| n == "vq.entries" && *s == [2, 4, 3]));
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let ck = Checkpoint::from_codec(&small_codec(), "", serde_json::Value::Null);
        let bytes = ck.to_bytes();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Checkpoint(_))));
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut tampered = ck.clone();
        tampered.meta.codec.init = WeightInit::Normal { std: 0.5 };
        assert!(tampered.to_codec().is_err());
        let mut missing = ck.clone();
        missing.tensors.remove("dec.conv_pre.weight");
        assert!(missing.to_codec().is_err());
    }

    #[test]
    fn save_and_load_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub").join("c.ckpt");
        let ck = Checkpoint::from_codec(&small_codec(), "h", serde_json::Value::Null);
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ck);
        assert!(matches!(Checkpoint::load(dir.path().join("none")), Err(Error::Io { .. })));
    }
}
