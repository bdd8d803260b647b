use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Frame-rate code vectors between encoder and quantizer, frame-major.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentSequence {
    dim: usize,
    frame_rate: f64,
    vectors: Vec<f64>,
}

impl LatentSequence {
    pub fn new(vectors: Vec<f64>, dim: usize, frame_rate: f64) -> Result<Self> {
        if dim == 0 || vectors.len() % dim != 0 {
            return Err(Error::Shape(format!(
                "{} values do not form frames of dimension {dim}",
                vectors.len()
            )));
        }
        if vectors.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("latent vector".into()));
        }
        Ok(Self {
            dim,
            frame_rate,
            vectors,
        })
    }

    /// From a network activation `[1, dim, frames]`.
    pub fn from_tensor(t: &Tensor, frame_rate: f64) -> Result<Self> {
        let [b, dim, frames] = t.shape();
        if b != 1 {
            return Err(Error::Shape(format!("expected batch 1, got {b}")));
        }
        let mut vectors = vec![0.0; dim * frames];
        for d in 0..dim {
            for (f, &v) in t.row(0, d).iter().enumerate() {
                vectors[f * dim + d] = v;
            }
        }
        Self::new(vectors, dim, frame_rate)
    }

    /// As a network activation `[1, dim, frames]`.
    pub fn to_tensor(&self) -> Tensor {
        let frames = self.num_frames();
        let mut t = Tensor::zeros([1, self.dim, frames]);
        for f in 0..frames {
            for d in 0..self.dim {
                t.row_mut(0, d)[f] = self.vectors[f * self.dim + d];
            }
        }
        t
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn frame_rate(&self) -> f64 {
        self.frame_rate
    }

    pub fn num_frames(&self) -> usize {
        self.vectors.len() / self.dim
    }

    pub fn frame(&self, i: usize) -> &[f64] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    pub fn vectors(&self) -> &[f64] {
        &self.vectors
    }

    pub fn frames(&self) -> impl Iterator<Item = &[f64]> {
        self.vectors.chunks_exact(self.dim)
    }
}
