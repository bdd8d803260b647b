//! Residual vector quantization with EMA codebook learning.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{Graph, Unary, Var};
use crate::error::{Error, Result};
use crate::latent::LatentSequence;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantizerConfig {
    pub num_books: usize,
    pub book_size: usize,
    pub decay: f64,
    pub epsilon: f64,
    /// Entries whose EMA count falls below this are reseeded.
    pub dead_code_threshold: f64,
    /// Steps between dead-code sweeps; 0 disables reseeding.
    pub reseed_interval: usize,
    pub kmeans_iters: usize,
}

impl Default for QuantizerConfig {
    fn default() -> Self {
        Self {
            num_books: 8,
            book_size: 1024,
            decay: 0.99,
            epsilon: 1e-5,
            dead_code_threshold: 1.0,
            reseed_interval: 1000,
            kmeans_iters: 10,
        }
    }
}

impl QuantizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_books == 0 || self.book_size == 0 {
            return Err(Error::Config("quantizer needs at least one book with one entry".into()));
        }
        if self.book_size > 1 << 16 {
            return Err(Error::Config("book_size above 65536 is not supported".into()));
        }
        if !(0.0..1.0).contains(&self.decay) {
            return Err(Error::Config("EMA decay must lie in [0, 1)".into()));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config("EMA epsilon must be positive".into()));
        }
        Ok(())
    }

    /// `ceil(log2(book_size))`, at least 1.
    pub fn bits_per_code(&self) -> u32 {
        (usize::BITS - (self.book_size - 1).leading_zeros()).max(1)
    }
}

/// One index per book for a single frame.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct CodeFrame(pub Vec<u16>);

impl CodeFrame {
    pub fn indices(&self) -> &[u16] {
        &self.0
    }
}

/// Per-stage record of a quantization pass, as consumed by [`ResidualCodebook::ema_update`].
#[derive(Clone, Debug, PartialEq)]
pub struct StageTrace {
    /// `assignments[s][n]`: index chosen at stage `s` for vector `n`.
    pub assignments: Vec<Vec<usize>>,
    /// `residuals[s]`: the vectors stage `s` quantized, flattened `n × dim`.
    pub residuals: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Quantized {
    pub codes: Vec<CodeFrame>,
    /// Sum of chosen entries, flattened `n × dim`.
    pub quantized: Vec<f64>,
    pub trace: StageTrace,
    /// Mean squared distance between input and quantized vectors.
    pub vq_loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResidualCodebook {
    num_books: usize,
    book_size: usize,
    dim: usize,
    entries: Vec<f64>,
    ema_counts: Vec<f64>,
    ema_sums: Vec<f64>,
    decay: f64,
    epsilon: f64,
    frozen: bool,
}

impl ResidualCodebook {
    pub fn zeros(cfg: &QuantizerConfig, dim: usize) -> Self {
        let n = cfg.num_books * cfg.book_size;
        Self {
            num_books: cfg.num_books,
            book_size: cfg.book_size,
            dim,
            entries: vec![0.0; n * dim],
            ema_counts: vec![1.0; n],
            ema_sums: vec![0.0; n * dim],
            decay: cfg.decay,
            epsilon: cfg.epsilon,
            frozen: false,
        }
    }

    /// Codebook with explicit entries `[book][entry][dim]`; EMA state
    /// starts at count 1 per entry.
    pub fn from_entries(entries: Vec<Vec<Vec<f64>>>, decay: f64, epsilon: f64) -> Result<Self> {
        let num_books = entries.len();
        let book_size = entries.first().map_or(0, Vec::len);
        let dim = entries.first().and_then(|b| b.first()).map_or(0, Vec::len);
        if num_books == 0 || book_size == 0 || dim == 0 {
            return Err(Error::Shape("empty codebook".into()));
        }
        let mut flat = Vec::with_capacity(num_books * book_size * dim);
        for book in &entries {
            if book.len() != book_size || book.iter().any(|e| e.len() != dim) {
                return Err(Error::Shape("ragged codebook".into()));
            }
            book.iter().for_each(|e| flat.extend_from_slice(e));
        }
        Ok(Self {
            num_books,
            book_size,
            dim,
            ema_sums: flat.clone(),
            entries: flat,
            ema_counts: vec![1.0; num_books * book_size],
            decay,
            epsilon,
            frozen: false,
        })
    }

    /// Restores a codebook from serialized state.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        num_books: usize,
        book_size: usize,
        dim: usize,
        entries: Vec<f64>,
        ema_counts: Vec<f64>,
        ema_sums: Vec<f64>,
        decay: f64,
        epsilon: f64,
        frozen: bool,
    ) -> Result<Self> {
        let n = num_books * book_size;
        if entries.len() != n * dim || ema_sums.len() != n * dim || ema_counts.len() != n {
            return Err(Error::Shape("codebook state does not match its declared shape".into()));
        }
        if entries.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("codebook entry".into()));
        }
        Ok(Self {
            num_books,
            book_size,
            dim,
            entries,
            ema_counts,
            ema_sums,
            decay,
            epsilon,
            frozen,
        })
    }

    pub fn num_books(&self) -> usize {
        self.num_books
    }

    pub fn book_size(&self) -> usize {
        self.book_size
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn decay(&self) -> f64 {
        self.decay
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn ema_counts(&self) -> &[f64] {
        &self.ema_counts
    }

    pub fn ema_sums(&self) -> &[f64] {
        &self.ema_sums
    }

    pub fn entry(&self, book: usize, index: usize) -> &[f64] {
        let start = (book * self.book_size + index) * self.dim;
        &self.entries[start..start + self.dim]
    }

    /// Idempotent. Frozen codebooks reject EMA updates and reseeding.
    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    /// Re-enables EMA updates (joint fine-tuning of a finished codebook).
    pub fn thaw(&mut self) {
        self.frozen = false;
    }

    /// A copy limited to the first `books` stages.
    pub fn truncated(&self, books: usize) -> Self {
        let books = books.min(self.num_books);
        let n = books * self.book_size;
        Self {
            num_books: books,
            entries: self.entries[..n * self.dim].to_vec(),
            ema_counts: self.ema_counts[..n].to_vec(),
            ema_sums: self.ema_sums[..n * self.dim].to_vec(),
            ..self.clone()
        }
    }

    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for v in self.entries.iter().chain(&self.ema_counts).chain(&self.ema_sums) {
            h.update(v.to_le_bytes());
        }
        h.update([self.frozen as u8]);
        hex::encode(h.finalize())
    }

    /// Nearest entry of `book` to `v` by Euclidean distance; ties go to the
    /// lowest index.
    pub fn nearest(&self, book: usize, v: &[f64]) -> (usize, f64) {
        let mut best = (0, f64::INFINITY);
        let base = book * self.book_size * self.dim;
        for (j, e) in self.entries[base..base + self.book_size * self.dim]
            .chunks_exact(self.dim)
            .enumerate()
        {
            let d: f64 = e.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best.1 {
                best = (j, d);
            }
        }
        best
    }

    /// Quantizes `n × dim` frame-major vectors stage by stage.
    pub fn quantize_vectors(&self, vectors: &[f64]) -> Result<Quantized> {
        if vectors.len() % self.dim != 0 {
            return Err(Error::Shape(format!(
                "{} values are not a multiple of codebook dim {}",
                vectors.len(),
                self.dim
            )));
        }
        let n = vectors.len() / self.dim;
        let mut residual = vectors.to_vec();
        let mut quantized = vec![0.0; vectors.len()];
        let mut codes = vec![Vec::with_capacity(self.num_books); n];
        let mut trace = StageTrace {
            assignments: Vec::with_capacity(self.num_books),
            residuals: Vec::with_capacity(self.num_books),
        };
        for book in 0..self.num_books {
            let mut assigned = Vec::with_capacity(n);
            trace.residuals.push(residual.clone());
            for (f, r) in residual.chunks_exact_mut(self.dim).enumerate() {
                let (j, _) = self.nearest(book, r);
                let e = self.entry(book, j);
                for ((rv, qv), ev) in r.iter_mut().zip(&mut quantized[f * self.dim..(f + 1) * self.dim]).zip(e) {
                    *rv -= ev;
                    *qv += ev;
                }
                codes[f].push(j as u16);
                assigned.push(j);
            }
            trace.assignments.push(assigned);
        }
        let vq_loss = if vectors.is_empty() {
            0.0
        } else {
            vectors.iter().zip(&quantized).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / vectors.len() as f64
        };
        Ok(Quantized {
            codes: codes.into_iter().map(CodeFrame).collect(),
            quantized,
            trace,
            vq_loss,
        })
    }

    pub fn rvq_quantize(&self, latents: &LatentSequence) -> Result<(Vec<CodeFrame>, LatentSequence, f64)> {
        self.check_dim(latents.dim())?;
        let q = self.quantize_vectors(latents.vectors())?;
        let quantized = LatentSequence::new(q.quantized, self.dim, latents.frame_rate())?;
        Ok((q.codes, quantized, q.vq_loss))
    }

    pub fn rvq_dequantize(&self, codes: &[CodeFrame], frame_rate: f64) -> Result<LatentSequence> {
        let mut out = vec![0.0; codes.len() * self.dim];
        for (f, code) in codes.iter().enumerate() {
            if code.0.len() != self.num_books {
                return Err(Error::Shape(format!(
                    "code frame has {} indices, codebook has {} books",
                    code.0.len(),
                    self.num_books
                )));
            }
            let dst = &mut out[f * self.dim..(f + 1) * self.dim];
            for (book, &idx) in code.0.iter().enumerate() {
                let idx = idx as usize;
                if idx >= self.book_size {
                    return Err(Error::IndexOutOfRange {
                        book,
                        index: idx,
                        size: self.book_size,
                    });
                }
                for (d, e) in dst.iter_mut().zip(self.entry(book, idx)) {
                    *d += e;
                }
            }
        }
        LatentSequence::new(out, self.dim, frame_rate)
    }

    fn check_dim(&self, dim: usize) -> Result<()> {
        if dim != self.dim {
            return Err(Error::Shape(format!("latent dim {dim} vs codebook dim {}", self.dim)));
        }
        Ok(())
    }

    /// Records the quantizer on a graph for a `[B, dim, F]` activation.
    ///
    /// Returns the straight-through output (forward: quantized vectors;
    /// backward: identity to `z`), the commitment loss
    /// `mean((z − sg[q])²)`, and the pass record.
    pub fn quantize_graph(&self, g: &mut Graph, z: Var) -> Result<(Var, Var, Quantized)> {
        let zt = g.value(z).clone();
        let [b, dim, frames] = zt.shape();
        self.check_dim(dim)?;
        let mut flat = vec![0.0; b * frames * dim];
        for bi in 0..b {
            for d in 0..dim {
                for (f, &v) in zt.row(bi, d).iter().enumerate() {
                    flat[(bi * frames + f) * dim + d] = v;
                }
            }
        }
        let q = self.quantize_vectors(&flat)?;
        let mut qt = Tensor::zeros([b, dim, frames]);
        for bi in 0..b {
            for d in 0..dim {
                for (f, slot) in qt.row_mut(bi, d).iter_mut().enumerate() {
                    *slot = q.quantized[(bi * frames + f) * dim + d];
                }
            }
        }
        let target = g.constant(qt.clone());
        let diff = g.sub(z, target);
        let sq = g.unary(diff, Unary::Square);
        let loss = g.mean(sq);
        let st = g.straight_through(z, qt);
        Ok((st, loss, q))
    }

    /// EMA update of counts and sums, then `entry = sums / smoothed_count`
    /// with Laplace-smoothed counts.
    pub fn ema_update(&mut self, trace: &StageTrace) -> Result<()> {
        if self.frozen {
            return Err(Error::FrozenCodebook);
        }
        if trace.assignments.len() != self.num_books || trace.residuals.len() != self.num_books {
            return Err(Error::Shape("trace does not cover every book".into()));
        }
        let (k, dim, decay) = (self.book_size, self.dim, self.decay);
        for book in 0..self.num_books {
            let assigned = &trace.assignments[book];
            let vectors = &trace.residuals[book];
            if vectors.len() != assigned.len() * dim {
                return Err(Error::Shape("trace residuals do not match assignments".into()));
            }
            let mut batch_counts = vec![0.0; k];
            let mut batch_sums = vec![0.0; k * dim];
            for (n, &j) in assigned.iter().enumerate() {
                if j >= k {
                    return Err(Error::IndexOutOfRange { book, index: j, size: k });
                }
                batch_counts[j] += 1.0;
                for (s, v) in batch_sums[j * dim..(j + 1) * dim].iter_mut().zip(&vectors[n * dim..(n + 1) * dim]) {
                    *s += v;
                }
            }
            let counts = &mut self.ema_counts[book * k..(book + 1) * k];
            let sums = &mut self.ema_sums[book * k * dim..(book + 1) * k * dim];
            for (c, b) in counts.iter_mut().zip(&batch_counts) {
                *c = decay * *c + (1.0 - decay) * b;
            }
            for (s, b) in sums.iter_mut().zip(&batch_sums) {
                *s = decay * *s + (1.0 - decay) * b;
            }
            let total: f64 = counts.iter().sum();
            let entries = &mut self.entries[book * k * dim..(book + 1) * k * dim];
            for j in 0..k {
                let smoothed = (counts[j] + self.epsilon) / (total + k as f64 * self.epsilon) * total;
                for (e, s) in entries[j * dim..(j + 1) * dim].iter_mut().zip(&sums[j * dim..(j + 1) * dim]) {
                    *e = s / smoothed;
                }
            }
        }
        Ok(())
    }

    /// Initializes every stage by k-means over the residuals of `vectors`
    /// (`n × dim`), falling back to sampled vectors when `n < book_size`.
    pub fn kmeans_init(&mut self, vectors: &[f64], iters: usize, rng: &mut impl Rng) -> Result<()> {
        if self.frozen {
            return Err(Error::FrozenCodebook);
        }
        if vectors.len() % self.dim != 0 {
            return Err(Error::Shape("k-means input is not a whole number of vectors".into()));
        }
        let n = vectors.len() / self.dim;
        if n == 0 {
            return Err(Error::Shape("k-means init needs at least one vector".into()));
        }
        let (k, dim) = (self.book_size, self.dim);
        let mut residual = vectors.to_vec();
        for book in 0..self.num_books {
            let mut centroids = vec![0.0; k * dim];
            if n >= k {
                for (j, i) in sample(rng, n, k).into_iter().enumerate() {
                    centroids[j * dim..(j + 1) * dim].copy_from_slice(&residual[i * dim..(i + 1) * dim]);
                }
                for _ in 0..iters {
                    let mut sums = vec![0.0; k * dim];
                    let mut counts = vec![0usize; k];
                    for r in residual.chunks_exact(dim) {
                        let j = nearest_in(&centroids, dim, r);
                        counts[j] += 1;
                        for (s, v) in sums[j * dim..(j + 1) * dim].iter_mut().zip(r) {
                            *s += v;
                        }
                    }
                    for j in 0..k {
                        if counts[j] > 0 {
                            for (c, s) in centroids[j * dim..(j + 1) * dim].iter_mut().zip(&sums[j * dim..(j + 1) * dim]) {
                                *c = s / counts[j] as f64;
                            }
                        }
                    }
                }
            } else {
                for j in 0..k {
                    let i = rng.random_range(0..n);
                    centroids[j * dim..(j + 1) * dim].copy_from_slice(&residual[i * dim..(i + 1) * dim]);
                }
            }
            for r in residual.chunks_exact_mut(dim) {
                let j = nearest_in(&centroids, dim, r);
                for (v, c) in r.iter_mut().zip(&centroids[j * dim..(j + 1) * dim]) {
                    *v -= c;
                }
            }
            let base = book * k;
            self.entries[base * dim..(base + k) * dim].copy_from_slice(&centroids);
            self.ema_sums[base * dim..(base + k) * dim].copy_from_slice(&centroids);
            self.ema_counts[base..base + k].fill(1.0);
        }
        Ok(())
    }

    /// Replaces entries whose EMA count is below `threshold` with randomly
    /// chosen residuals from `trace`. Returns the number reseeded.
    pub fn reseed_dead(&mut self, trace: &StageTrace, threshold: f64, rng: &mut impl Rng) -> Result<usize> {
        if self.frozen {
            return Err(Error::FrozenCodebook);
        }
        let (k, dim) = (self.book_size, self.dim);
        let mut reseeded = 0;
        for book in 0..self.num_books {
            let vectors = &trace.residuals[book];
            let n = vectors.len() / dim;
            if n == 0 {
                continue;
            }
            for j in 0..k {
                let idx = book * k + j;
                if self.ema_counts[idx] >= threshold {
                    continue;
                }
                let i = rng.random_range(0..n);
                let src = &vectors[i * dim..(i + 1) * dim];
                self.entries[idx * dim..(idx + 1) * dim].copy_from_slice(src);
                self.ema_sums[idx * dim..(idx + 1) * dim].copy_from_slice(src);
                self.ema_counts[idx] = 1.0;
                reseeded += 1;
            }
        }
        Ok(reseeded)
    }

    /// Code usage perplexity of each stage over `trace`.
    pub fn perplexity(&self, trace: &StageTrace) -> Vec<f64> {
        trace
            .assignments
            .iter()
            .map(|assigned| {
                let mut counts = vec![0.0; self.book_size];
                assigned.iter().for_each(|&j| counts[j] += 1.0);
                let n = assigned.len().max(1) as f64;
                let entropy: f64 = counts
                    .iter()
                    .filter(|&&c| c > 0.0)
                    .map(|&c| {
                        let p = c / n;
                        -p * p.ln()
                    })
                    .sum();
                entropy.exp()
            })
            .collect()
    }
}

fn nearest_in(centroids: &[f64], dim: usize, v: &[f64]) -> usize {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.chunks_exact(dim).enumerate() {
        let d: f64 = c.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum();
        if d < best.1 {
            best = (j, d);
        }
    }
    best.0
}

/// Per-dimension corpus statistics of quantized latents.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    /// Population mean and standard deviation over all frames.
    pub fn from_sequences<'a>(seqs: impl IntoIterator<Item = &'a LatentSequence>) -> Result<Self> {
        let mut dim = None;
        let mut count = 0usize;
        let mut sum = Vec::new();
        let mut sq = Vec::new();
        for s in seqs {
            let d = *dim.get_or_insert_with(|| {
                sum = vec![0.0; s.dim()];
                sq = vec![0.0; s.dim()];
                s.dim()
            });
            if s.dim() != d {
                return Err(Error::Shape("sequences disagree on latent dim".into()));
            }
            for f in s.frames() {
                for (i, v) in f.iter().enumerate() {
                    sum[i] += v;
                    sq[i] += v * v;
                }
                count += 1;
            }
        }
        if count == 0 {
            return Err(Error::Shape("no frames to compute statistics from".into()));
        }
        let n = count as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| (q / n - m * m).max(0.0).sqrt())
            .collect();
        Ok(Self { mean, std })
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Dimensions whose standard deviation is zero; these pass through
    /// normalization unchanged.
    pub fn degenerate_dims(&self) -> Vec<usize> {
        self.std
            .iter()
            .enumerate()
            .filter(|(_, &s)| !(s > 0.0))
            .map(|(i, _)| i)
            .collect()
    }

    fn check(&self, latents: &LatentSequence) -> Result<()> {
        if latents.dim() != self.dim() {
            return Err(Error::Shape(format!(
                "normalization stats have dim {}, latents have {}",
                self.dim(),
                latents.dim()
            )));
        }
        Ok(())
    }
}

/// `(latent − mean) / std` per dimension. Returns the normalized sequence
/// and the zero-variance dimensions that were passed through.
pub fn normalize_codes(latents: &LatentSequence, stats: &NormStats) -> Result<(LatentSequence, Vec<usize>)> {
    stats.check(latents)?;
    let degenerate = stats.degenerate_dims();
    let dim = latents.dim();
    let out = latents
        .vectors()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let d = i % dim;
            if stats.std[d] > 0.0 {
                (v - stats.mean[d]) / stats.std[d]
            } else {
                v
            }
        })
        .collect();
    Ok((LatentSequence::new(out, dim, latents.frame_rate())?, degenerate))
}

pub fn denormalize_codes(latents: &LatentSequence, stats: &NormStats) -> Result<LatentSequence> {
    stats.check(latents)?;
    let dim = latents.dim();
    let out = latents
        .vectors()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let d = i % dim;
            if stats.std[d] > 0.0 {
                v * stats.std[d] + stats.mean[d]
            } else {
                v
            }
        })
        .collect();
    LatentSequence::new(out, dim, latents.frame_rate())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_book(rng: &mut ChaCha8Rng, books: usize, size: usize, dim: usize, with_zero: bool) -> ResidualCodebook {
        let entries = (0..books)
            .map(|b| {
                (0..size)
                    .map(|j| {
                        if with_zero && j == 0 && b > 0 {
                            vec![0.0; dim]
                        } else {
                            (0..dim).map(|_| rng.random_range(-1.0..1.0) / (b + 1) as f64).collect()
                        }
                    })
                    .collect()
            })
            .collect();
        ResidualCodebook::from_entries(entries, 0.99, 1e-5).unwrap()
    }

    #[test]
    fn exact_codebook_hit_has_zero_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cb = random_book(&mut rng, 3, 8, 4, true);
        let target = cb.entry(0, 5).to_vec();
        let latents = LatentSequence::new(target.clone(), 4, 80.0).unwrap();
        let (codes, q, loss) = cb.rvq_quantize(&latents).unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(q.vectors(), target.as_slice());
        assert_eq!(codes[0].0, vec![5, 0, 0]);
    }

    #[test]
    fn residual_energy_is_non_increasing_with_zero_entries() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut entries = Vec::new();
        for _ in 0..6 {
            let mut book: Vec<Vec<f64>> = (0..16).map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
            book[7] = vec![0.0; 3];
            entries.push(book);
        }
        let cb = ResidualCodebook::from_entries(entries, 0.99, 1e-5).unwrap();
        for _ in 0..200 {
            let v: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
            let q = cb.quantize_vectors(&v).unwrap();
            let energies: Vec<f64> = q.trace.residuals.iter().map(|r| r.iter().map(|x| x * x).sum()).collect();
            for w in energies.windows(2) {
                assert!(w[1] <= w[0] + 1e-15);
            }
        }
    }

    #[test]
    fn dequantize_reproduces_quantized_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cb = random_book(&mut rng, 4, 16, 5, false);
        let v: Vec<f64> = (0..50).map(|_| rng.random_range(-1.0..1.0)).collect();
        let latents = LatentSequence::new(v, 5, 80.0).unwrap();
        let (codes, q, _) = cb.rvq_quantize(&latents).unwrap();
        assert_eq!(cb.rvq_dequantize(&codes, 80.0).unwrap(), q);
    }

    #[test]
    fn dequantize_edge_cases() {
        let cfg = QuantizerConfig {
            num_books: 2,
            book_size: 4,
            ..Default::default()
        };
        let zero = ResidualCodebook::zeros(&cfg, 3);
        let out = zero.rvq_dequantize(&[CodeFrame(vec![3, 1])], 1.0).unwrap();
        assert!(out.vectors().iter().all(|&v| v == 0.0));
        assert!(matches!(
            zero.rvq_dequantize(&[CodeFrame(vec![4, 0])], 1.0),
            Err(Error::IndexOutOfRange { book: 0, index: 4, size: 4 })
        ));
        let single = ResidualCodebook::from_entries(vec![vec![vec![1.0, 2.0], vec![3.0, 4.0]]], 0.9, 1e-5).unwrap();
        let out = single.rvq_dequantize(&[CodeFrame(vec![1])], 1.0).unwrap();
        assert_eq!(out.vectors(), &[3.0, 4.0]);
    }

    #[test]
    fn decay_zero_replaces_entries_with_batch_means() {
        let mut cb = ResidualCodebook::from_entries(vec![vec![vec![0.0, 0.0], vec![5.0, 5.0]]], 0.0, 1e-5).unwrap();
        let trace = StageTrace {
            assignments: vec![vec![0, 0, 1]],
            residuals: vec![vec![1.0, 2.0, 3.0, 4.0, 10.0, -10.0]],
        };
        cb.ema_update(&trace).unwrap();
        let e0 = cb.entry(0, 0);
        assert!((e0[0] - 2.0).abs() < 1e-4 && (e0[1] - 3.0).abs() < 1e-4);
        let e1 = cb.entry(0, 1);
        assert!((e1[0] - 10.0).abs() < 1e-4 && (e1[1] + 10.0).abs() < 1e-4);
    }

    #[test]
    fn freeze_contract() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut cb = random_book(&mut rng, 2, 8, 3, false);
        cb.freeze();
        cb.freeze();
        assert!(cb.is_frozen());
        let hash = cb.hash();
        let v: Vec<f64> = (0..30).map(|_| rng.random_range(-1.0..1.0)).collect();
        for _ in 0..1000 {
            let q = cb.quantize_vectors(&v).unwrap();
            assert!(matches!(cb.ema_update(&q.trace), Err(Error::FrozenCodebook)));
        }
        assert!(cb.reseed_dead(&cb.quantize_vectors(&v).unwrap().trace, 10.0, &mut rng).is_err());
        assert_eq!(cb.hash(), hash);
    }

    #[test]
    fn kmeans_init_fits_clusters_and_handles_small_batches() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = QuantizerConfig {
            num_books: 2,
            book_size: 4,
            ..Default::default()
        };
        let centers = [[2.0, 2.0], [-2.0, 2.0], [2.0, -2.0], [-2.0, -2.0]];
        let mut data = Vec::new();
        for i in 0..400 {
            let c = centers[i % 4];
            data.push(c[0] + rng.random_range(-0.1..0.1));
            data.push(c[1] + rng.random_range(-0.1..0.1));
        }
        let mut cb = ResidualCodebook::zeros(&cfg, 2);
        cb.kmeans_init(&data, 10, &mut rng).unwrap();
        let q = cb.quantize_vectors(&data).unwrap();
        assert!(q.vq_loss < 0.01, "{}", q.vq_loss);

        let mut small = ResidualCodebook::zeros(&QuantizerConfig { book_size: 16, ..cfg }, 2);
        small.kmeans_init(&data[..6], 10, &mut rng).unwrap();
        assert!(small.entries().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn dead_codes_are_reseeded() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut cb = random_book(&mut rng, 1, 4, 2, false);
        let trace = StageTrace {
            assignments: vec![vec![0; 5]],
            residuals: vec![(0..10).map(f64::from).collect()],
        };
        for _ in 0..300 {
            cb.ema_update(&trace).unwrap();
        }
        let reseeded = cb.reseed_dead(&trace, 0.5, &mut rng).unwrap();
        assert_eq!(reseeded, 3);
        for j in 1..4 {
            let e = cb.entry(0, j);
            assert!(trace.residuals[0].chunks_exact(2).any(|r| r == e));
        }
    }

    #[test]
    fn perplexity_bounds() {
        let cb = ResidualCodebook::zeros(&QuantizerConfig { num_books: 1, book_size: 4, ..Default::default() }, 1);
        let uniform = StageTrace {
            assignments: vec![vec![0, 1, 2, 3]],
            residuals: vec![vec![0.0; 4]],
        };
        assert!((cb.perplexity(&uniform)[0] - 4.0).abs() < 1e-12);
        let single = StageTrace {
            assignments: vec![vec![2, 2, 2]],
            residuals: vec![vec![0.0; 3]],
        };
        assert!((cb.perplexity(&single)[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn normalization_round_trip_and_self_stats() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let v: Vec<f64> = (0..300).map(|i| rng.random_range(-1.0..1.0) * (1 + i % 3) as f64 + (i % 3) as f64).collect();
        let l = LatentSequence::new(v, 3, 80.0).unwrap();
        let stats = NormStats::from_sequences([&l]).unwrap();
        let (n, degenerate) = normalize_codes(&l, &stats).unwrap();
        assert!(degenerate.is_empty());
        let check = NormStats::from_sequences([&n]).unwrap();
        for d in 0..3 {
            assert!(check.mean[d].abs() < 1e-6);
            assert!((check.std[d] - 1.0).abs() < 1e-6);
        }
        let back = denormalize_codes(&n, &stats).unwrap();
        for (a, b) in back.vectors().iter().zip(l.vectors()) {
            assert!((a - b).abs() < 1e-6);
        }
        let (same, _) = normalize_codes(&l, &NormStats::identity(3)).unwrap();
        assert_eq!(same, l);
    }

    #[test]
    fn zero_variance_dimension_is_reported_and_passed_through() {
        let l = LatentSequence::new(vec![1.0, 5.0, 2.0, 5.0, 3.0, 5.0], 2, 1.0).unwrap();
        let stats = NormStats::from_sequences([&l]).unwrap();
        let (n, degenerate) = normalize_codes(&l, &stats).unwrap();
        assert_eq!(degenerate, vec![1]);
        assert_eq!(n.frame(0)[1], 5.0);
    }

    #[test]
    fn bits_per_code() {
        let mut cfg = QuantizerConfig::default();
        assert_eq!(cfg.bits_per_code(), 10);
        cfg.book_size = 1000;
        assert_eq!(cfg.bits_per_code(), 10);
        cfg.book_size = 1025;
        assert_eq!(cfg.bits_per_code(), 11);
        cfg.book_size = 2;
        assert_eq!(cfg.bits_per_code(), 1);
    }
}
