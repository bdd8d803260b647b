//! Training corpora: WAV directories or deterministic speech-like signals,
//! plus hop-aligned random crops.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use streamdec_core::signal::{load_wav, Waveform};
use streamdec_core::tensor::Tensor;

use crate::config::{CorpusConfig, CorpusSource};
use crate::error::{Result, TrainError};

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub name: String,
    pub wave: Waveform,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub sample_rate: u32,
    pub utterances: Vec<Utterance>,
}

fn wav_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let entries = std::fs::read_dir(dir).map_err(|e| TrainError::io(dir, e))?;
    for entry in entries {
        let path = entry.map_err(|e| TrainError::io(dir, e))?.path();
        if path.is_dir() {
            wav_files(&path, out)?;
        } else if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav")) {
            out.push(path);
        }
    }
    Ok(())
}

impl Corpus {
    /// Every WAV file under `dir`, resampled to `sample_rate`, in path order.
    pub fn load_dir(dir: impl AsRef<Path>, sample_rate: u32) -> Result<Self> {
        let dir = dir.as_ref();
        let mut files = Vec::new();
        wav_files(dir, &mut files)?;
        files.sort();
        if files.is_empty() {
            return Err(TrainError::EmptyCorpus(format!("no .wav files under {}", dir.display())));
        }
        let utterances = files
            .iter()
            .map(|p| {
                let name = p.strip_prefix(dir).unwrap_or(p).to_string_lossy().into_owned();
                Ok(Utterance {
                    name,
                    wave: load_wav(p, Some(sample_rate))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            sample_rate,
            utterances,
        })
    }

    pub fn synthetic(utterances: usize, seconds: f64, sample_rate: u32, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = (seconds * sample_rate as f64).round() as usize;
        let utterances = (0..utterances)
            .map(|i| Utterance {
                name: format!("synth_{i:04}"),
                wave: synthetic_speech(n, sample_rate, &mut rng),
            })
            .collect();
        Self {
            sample_rate,
            utterances,
        }
    }

    pub fn from_config(cfg: &CorpusConfig, sample_rate: u32) -> Result<Self> {
        match &cfg.source {
            CorpusSource::Directory { path } => Self::load_dir(path, sample_rate),
            CorpusSource::Synthetic { utterances, seconds, seed } => {
                Ok(Self::synthetic(*utterances, *seconds, sample_rate, *seed))
            }
        }
    }

    /// `(train, heldout)`: the last `heldout` utterances are held out.
    pub fn split(&self, heldout: usize) -> Result<(Corpus, Corpus)> {
        if heldout >= self.utterances.len() {
            return Err(TrainError::EmptyCorpus(format!(
                "{} utterances leave nothing to train on after holding out {heldout}",
                self.utterances.len()
            )));
        }
        let cut = self.utterances.len() - heldout;
        let part = |u: &[Utterance]| Corpus {
            sample_rate: self.sample_rate,
            utterances: u.to_vec(),
        };
        Ok((part(&self.utterances[..cut]), part(&self.utterances[cut..])))
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn total_seconds(&self) -> f64 {
        self.utterances.iter().map(|u| u.wave.duration_secs()).sum()
    }

    /// `[batch, 1, segment]` random crops starting on hop boundaries;
    /// utterances shorter than a segment are zero-padded.
    pub fn sample_batch(&self, rng: &mut impl Rng, batch: usize, segment: usize, hop: usize) -> Result<Tensor> {
        if self.utterances.is_empty() {
            return Err(TrainError::EmptyCorpus("no training utterances".into()));
        }
        let mut data = Vec::with_capacity(batch * segment);
        for _ in 0..batch {
            let u = &self.utterances[rng.random_range(0..self.utterances.len())].wave;
            let start = if u.len() > segment {
                rng.random_range(0..=(u.len() - segment) / hop) * hop
            } else {
                0
            };
            let end = (start + segment).min(u.len());
            data.extend_from_slice(&u.samples()[start..end]);
            data.resize(data.len() + segment - (end - start), 0.0);
        }
        Ok(Tensor::from_vec([batch, 1, segment], data))
    }
}

/// Two-pole resonator coefficients for a formant at `freq` Hz with bandwidth `bw`.
fn resonator(freq: f64, bw: f64, sr: f64) -> (f64, f64) {
    let r = (-PI * bw / sr).exp();
    (2.0 * r * (2.0 * PI * freq / sr).cos(), -r * r)
}

/// Syllable-like bursts: a glottal pulse train (or noise for unvoiced
/// segments) shaped by three formant resonators and a smooth envelope,
/// separated by short pauses. Peak-normalized to 0.5.
pub fn synthetic_speech(len: usize, sample_rate: u32, rng: &mut impl Rng) -> Waveform {
    let sr = sample_rate as f64;
    let base_f0 = rng.random_range(90.0..240.0);
    let mut out = vec![0.0; len];
    let mut pos = (rng.random_range(0.02..0.1) * sr) as usize;
    let mut phase = 0.0;
    let (mut y1, mut y2) = ([0.0f64; 3], [0.0f64; 3]);
    let mut tilt = 0.0;
    while pos < len {
        let dur = (rng.random_range(0.12..0.3) * sr) as usize;
        let voiced = rng.random_bool(0.8);
        let f_start = base_f0 * rng.random_range(0.85..1.15);
        let f_end = f_start * rng.random_range(0.85..1.15);
        let formants = [
            (rng.random_range(300.0..800.0), rng.random_range(60.0..120.0)),
            (rng.random_range(900.0..2200.0), rng.random_range(80.0..160.0)),
            (rng.random_range(2400.0..3200.0_f64.min(0.45 * sr)), rng.random_range(100.0..200.0)),
        ];
        let coefs: Vec<(f64, f64)> = formants.iter().map(|&(f, b)| resonator(f, b, sr)).collect();
        let gain = rng.random_range(0.5..1.0);
        for i in 0..dur.min(len - pos) {
            let t = i as f64 / dur as f64;
            let env = (PI * t).sin().powf(0.7) * gain;
            let src = if voiced {
                let f0 = f_start + (f_end - f_start) * t;
                phase += f0 / sr;
                let pulse = if phase >= 1.0 {
                    phase -= 1.0;
                    1.0
                } else {
                    0.0
                };
                tilt = 0.7 * tilt + pulse;
                tilt + 0.02 * rng.random_range(-1.0..1.0)
            } else {
                0.3 * rng.random_range(-1.0..1.0)
            };
            let mut x = src * env;
            for (k, &(a1, a2)) in coefs.iter().enumerate() {
                let y = x + a1 * y1[k] + a2 * y2[k];
                y2[k] = y1[k];
                y1[k] = y;
                x = y * (1.0 - a2.abs().sqrt());
            }
            out[pos + i] = x;
        }
        pos += dur + (rng.random_range(0.0..0.15) * sr) as usize;
    }
    let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        out.iter_mut().for_each(|v| *v *= 0.5 / peak);
    }
    Waveform::new(out, sample_rate).expect("finite synthetic audio")
}
