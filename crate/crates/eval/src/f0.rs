//! Autocorrelation pitch tracker and the F0 / voicing error metrics.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use streamdec_core::signal::Waveform;

use crate::error::{EvalError, Result};
use crate::spectral::align;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct F0Config {
    pub frame_ms: f64,
    pub hop_ms: f64,
    /// Minimum normalized autocorrelation peak for a voiced frame.
    pub voicing_threshold: f64,
    pub fmin: f64,
    pub fmax: f64,
    /// Frames with RMS below this are unvoiced regardless of periodicity.
    pub silence_rms: f64,
}

impl Default for F0Config {
    fn default() -> Self {
        Self {
            frame_ms: 25.0,
            hop_ms: 5.0,
            voicing_threshold: 0.3,
            fmin: 60.0,
            fmax: 500.0,
            silence_rms: 1e-4,
        }
    }
}

impl F0Config {
    pub fn frame_len(&self, sample_rate: u32) -> usize {
        (self.frame_ms * sample_rate as f64 / 1000.0).round() as usize
    }

    pub fn hop_len(&self, sample_rate: u32) -> usize {
        (self.hop_ms * sample_rate as f64 / 1000.0).round() as usize
    }

    pub fn validate(&self, sample_rate: u32) -> Result<()> {
        let bad = |m: &str| Err(EvalError::Config(m.to_string()));
        if self.frame_len(sample_rate) < 2 || self.hop_len(sample_rate) == 0 {
            return bad("frame and hop must span at least one sample");
        }
        if !(self.fmin > 0.0 && self.fmin < self.fmax) {
            return bad("need 0 < fmin < fmax");
        }
        if self.fmax * 2.0 > sample_rate as f64 {
            return bad("fmax above Nyquist");
        }
        if !(0.0..1.0).contains(&self.voicing_threshold) {
            return bad("voicing threshold must lie in [0, 1)");
        }
        Ok(())
    }
}

struct Tracker {
    frame: usize,
    hop: usize,
    min_lag: usize,
    max_lag: usize,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
    fft_len: usize,
}

impl Tracker {
    fn new(cfg: &F0Config, sr: u32) -> Result<Self> {
        cfg.validate(sr)?;
        let frame = cfg.frame_len(sr);
        let min_lag = ((sr as f64 / cfg.fmax).floor() as usize).max(2);
        let max_lag = ((sr as f64 / cfg.fmin).ceil() as usize).min(frame - 2);
        if min_lag + 2 > max_lag {
            return Err(EvalError::Config("frame too short for the pitch range".into()));
        }
        let fft_len = (2 * frame).next_power_of_two();
        let mut planner = FftPlanner::new();
        Ok(Self {
            frame,
            hop: cfg.hop_len(sr),
            min_lag,
            max_lag,
            fwd: planner.plan_fft_forward(fft_len),
            inv: planner.plan_fft_inverse(fft_len),
            fft_len,
        })
    }

    /// Autocorrelation normalized by lag 0 (biased estimate).
    fn autocorr(&self, x: &[f64], buf: &mut [Complex<f64>]) -> Vec<f64> {
        let mean = x.iter().sum::<f64>() / x.len() as f64;
        for (i, slot) in buf.iter_mut().enumerate() {
            *slot = Complex::new(if i < x.len() { x[i] - mean } else { 0.0 }, 0.0);
        }
        self.fwd.process(buf);
        for v in buf.iter_mut() {
            *v = Complex::new(v.norm_sqr(), 0.0);
        }
        self.inv.process(buf);
        let r0 = buf[0].re;
        if r0 <= 0.0 {
            return vec![0.0; self.max_lag + 2];
        }
        buf[..self.max_lag + 2].iter().map(|c| c.re / r0).collect()
    }

    fn frame_f0(&self, x: &[f64], sr: u32, cfg: &F0Config, buf: &mut [Complex<f64>]) -> Option<f64> {
        let mean = x.iter().sum::<f64>() / x.len() as f64;
        let rms = (x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / x.len() as f64).sqrt();
        if rms < cfg.silence_rms {
            return None;
        }
        let r = self.autocorr(x, buf);
        let lags = self.min_lag..=self.max_lag;
        let best = lags.clone().map(|l| r[l]).fold(f64::NEG_INFINITY, f64::max);
        if best < cfg.voicing_threshold {
            return None;
        }
        // Earliest local maximum close to the global one avoids octave-down errors.
        let lag = lags
            .clone()
            .find(|&l| r[l] >= 0.9 * best && r[l] >= r[l - 1] && r[l] >= r[l + 1])
            .unwrap_or_else(|| lags.clone().max_by(|&a, &b| r[a].total_cmp(&r[b])).expect("lag range"));
        let (a, b, c) = (r[lag - 1], r[lag], r[lag + 1]);
        let denom = a - 2.0 * b + c;
        let shift = if denom.abs() > 1e-12 { (0.5 * (a - c) / denom).clamp(-0.5, 0.5) } else { 0.0 };
        Some(sr as f64 / (lag as f64 + shift))
    }
}

/// Per-frame F0 in Hz, `None` for unvoiced frames. Frames start every hop
/// and cover `frame_ms`; the last partial frame is dropped.
pub fn track_f0(wave: &Waveform, cfg: &F0Config) -> Result<Vec<Option<f64>>> {
    let sr = wave.sample_rate();
    let tracker = Tracker::new(cfg, sr)?;
    let x = wave.samples();
    if x.len() < tracker.frame {
        return Err(EvalError::TooShort {
            len: x.len(),
            frame: tracker.frame,
        });
    }
    let frames = 1 + (x.len() - tracker.frame) / tracker.hop;
    let mut buf = vec![Complex::new(0.0, 0.0); tracker.fft_len];
    Ok((0..frames)
        .map(|i| {
            let s = i * tracker.hop;
            tracker.frame_f0(&x[s..s + tracker.frame], sr, cfg, &mut buf)
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct F0Metrics {
    /// Hz, over frames voiced in both signals (0 when there are none).
    pub f0_rmse: f64,
    /// Percent of frames whose voicing flags disagree.
    pub uv_error: f64,
    pub voiced_in_both: usize,
    pub frames: usize,
}

/// Lengths may differ by at most one hop; the shorter signal is zero-padded.
pub fn f0_metrics(reference: &Waveform, test: &Waveform, cfg: &F0Config) -> Result<F0Metrics> {
    let tolerance = cfg.hop_len(reference.sample_rate());
    let (r, t) = align(reference, test, tolerance)?;
    let fr = track_f0(&r, cfg)?;
    let ft = track_f0(&t, cfg)?;
    let mut sq = 0.0;
    let mut both = 0;
    let mut disagree = 0;
    for (a, b) in fr.iter().zip(&ft) {
        match (a, b) {
            (Some(a), Some(b)) => {
                sq += (a - b) * (a - b);
                both += 1;
            }
            (None, None) => {}
            _ => disagree += 1,
        }
    }
    Ok(F0Metrics {
        f0_rmse: if both > 0 { (sq / both as f64).sqrt() } else { 0.0 },
        uv_error: 100.0 * disagree as f64 / fr.len() as f64,
        voiced_in_both: both,
        frames: fr.len(),
    })
}
