use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use super::Waveform;
use crate::error::{Error, Result};

/// Log-mel analysis parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MelConfig {
    pub sample_rate: u32,
    pub fft_size: usize,
    pub hop_length: usize,
    pub win_length: usize,
    pub num_mels: usize,
    pub fmin: f64,
    pub fmax: f64,
    /// Energies are clamped to at least this value before the log.
    pub log_floor: f64,
}

impl MelConfig {
    /// Repository defaults: hop aligned with the codec hop of 300 samples.
    pub fn for_rate(sample_rate: u32) -> Self {
        let (fft_size, win_length) = if sample_rate >= 44100 { (2048, 1200) } else { (1024, 600) };
        Self {
            sample_rate,
            fft_size,
            hop_length: 300,
            win_length,
            num_mels: 80,
            fmin: 0.0,
            fmax: sample_rate as f64 / 2.0,
            log_floor: 1e-5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let nyquist = self.sample_rate as f64 / 2.0;
        let bad = |m: &str| Err(Error::Config(format!("mel config: {m}")));
        if self.sample_rate == 0 {
            return bad("sample_rate must be positive");
        }
        if self.hop_length == 0 || self.fft_size == 0 || self.win_length == 0 {
            return bad("fft_size, hop_length and win_length must be positive");
        }
        if self.win_length > self.fft_size {
            return bad("win_length exceeds fft_size");
        }
        if !(0.0 <= self.fmin && self.fmin < self.fmax && self.fmax <= nyquist) {
            return bad("require 0 <= fmin < fmax <= sample_rate / 2");
        }
        if self.num_mels == 0 {
            return bad("num_mels must be at least 1");
        }
        if !(self.log_floor > 0.0) {
            return bad("log_floor must be positive");
        }
        Ok(())
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

fn reflect(mut i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let n = len as isize;
    loop {
        if i < 0 {
            i = -i;
        } else if i >= n {
            i = 2 * (n - 1) - i;
        } else {
            return i as usize;
        }
    }
}

/// Precomputed window, filterbank and FFT plan for one [`MelConfig`].
///
/// Frame `i` is centred on hop block `i` (`i·hop + hop/2`), with reflection
/// padding at both ends, giving `ceil(len / hop)` frames.
pub struct MelPlan {
    cfg: MelConfig,
    window: Vec<f64>,
    /// Per mel band: first FFT bin and its triangular weights.
    filters: Vec<(usize, Vec<f64>)>,
    centers: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for MelPlan {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MelPlan").field("cfg", &self.cfg).finish()
    }
}

impl MelPlan {
    pub fn new(cfg: &MelConfig) -> Result<Self> {
        cfg.validate()?;
        let n = cfg.fft_size;
        let mut window = vec![0.0; n];
        let offset = (n - cfg.win_length) / 2;
        for i in 0..cfg.win_length {
            window[offset + i] = 0.5 - 0.5 * (2.0 * PI * i as f64 / cfg.win_length as f64).cos();
        }

        let bins = n / 2 + 1;
        let (mlo, mhi) = (hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax));
        let points: Vec<f64> = (0..cfg.num_mels + 2)
            .map(|i| mel_to_hz(mlo + (mhi - mlo) * i as f64 / (cfg.num_mels + 1) as f64))
            .collect();
        let bin_hz = cfg.sample_rate as f64 / n as f64;
        let mut filters = Vec::with_capacity(cfg.num_mels);
        for m in 0..cfg.num_mels {
            let (l, c, r) = (points[m], points[m + 1], points[m + 2]);
            let weights: Vec<(usize, f64)> = (0..bins)
                .filter_map(|k| {
                    let f = k as f64 * bin_hz;
                    let w = ((f - l) / (c - l)).min((r - f) / (r - c));
                    (w > 0.0).then_some((k, w))
                })
                .collect();
            let start = weights.first().map_or(0, |&(k, _)| k);
            filters.push((start, weights.into_iter().map(|(_, w)| w).collect()));
        }
        let fft = FftPlanner::new().plan_fft_forward(n);
        Ok(Self {
            cfg: cfg.clone(),
            window,
            filters,
            centers: points[1..=cfg.num_mels].to_vec(),
            fft,
        })
    }

    pub fn config(&self) -> &MelConfig {
        &self.cfg
    }

    /// Centre frequency (Hz) of each mel band.
    pub fn center_frequencies(&self) -> &[f64] {
        &self.centers
    }

    pub fn num_frames(&self, len: usize) -> usize {
        len.div_ceil(self.cfg.hop_length)
    }

    fn frame_origin(&self, frame: usize) -> isize {
        (frame * self.cfg.hop_length) as isize - ((self.cfg.fft_size - self.cfg.hop_length) / 2) as isize
    }

    fn spectrum(&self, signal: &[f64], frame: usize, buf: &mut [Complex<f64>]) {
        let origin = self.frame_origin(frame);
        for (n, slot) in buf.iter_mut().enumerate() {
            let w = self.window[n];
            *slot = if w == 0.0 {
                Complex::new(0.0, 0.0)
            } else {
                Complex::new(w * signal[reflect(origin + n as isize, signal.len())], 0.0)
            };
        }
        self.fft.process(buf);
    }

    /// Log-mel energies laid out mel-major: `out[m * frames + i]`.
    pub fn forward(&self, signal: &[f64]) -> Vec<f64> {
        assert!(!signal.is_empty(), "mel of empty signal");
        let frames = self.num_frames(signal.len());
        let mut out = vec![0.0; self.cfg.num_mels * frames];
        let mut buf = vec![Complex::new(0.0, 0.0); self.cfg.fft_size];
        let mut power = vec![0.0; self.cfg.fft_size / 2 + 1];
        for i in 0..frames {
            self.spectrum(signal, i, &mut buf);
            for (p, x) in power.iter_mut().zip(&buf) {
                *p = x.norm_sqr();
            }
            for (m, (start, weights)) in self.filters.iter().enumerate() {
                let e: f64 = weights.iter().zip(&power[*start..]).map(|(w, p)| w * p).sum();
                out[m * frames + i] = e.max(self.cfg.log_floor).ln();
            }
        }
        out
    }

    /// Vector-Jacobian product of [`MelPlan::forward`]: given `d loss / d out`
    /// (mel-major), returns `d loss / d signal`.
    pub fn backward(&self, signal: &[f64], grad_out: &[f64]) -> Vec<f64> {
        let frames = self.num_frames(signal.len());
        assert_eq!(grad_out.len(), self.cfg.num_mels * frames);
        let n = self.cfg.fft_size;
        let bins = n / 2 + 1;
        let mut grad = vec![0.0; signal.len()];
        let mut buf = vec![Complex::new(0.0, 0.0); n];
        let mut power = vec![0.0; bins];
        let mut dpower = vec![0.0; bins];
        for i in 0..frames {
            self.spectrum(signal, i, &mut buf);
            for (p, x) in power.iter_mut().zip(&buf) {
                *p = x.norm_sqr();
            }
            dpower.fill(0.0);
            let mut any = false;
            for (m, (start, weights)) in self.filters.iter().enumerate() {
                let g = grad_out[m * frames + i];
                if g == 0.0 {
                    continue;
                }
                let e: f64 = weights.iter().zip(&power[*start..]).map(|(w, p)| w * p).sum();
                if e <= self.cfg.log_floor {
                    continue;
                }
                let de = g / e;
                for (d, w) in dpower[*start..].iter_mut().zip(weights) {
                    *d += de * w;
                }
                any = true;
            }
            if !any {
                continue;
            }
            // d P_k / d y_n = 2 Re(conj(X_k) e^{-2πikn/N}) for the one-sided bins.
            for (k, slot) in buf.iter_mut().enumerate() {
                *slot = if k < bins { slot.conj() * dpower[k] } else { Complex::new(0.0, 0.0) };
            }
            self.fft.process(&mut buf);
            let origin = self.frame_origin(i);
            for (idx, z) in buf.iter().enumerate() {
                let w = self.window[idx];
                if w != 0.0 {
                    grad[reflect(origin + idx as isize, signal.len())] += 2.0 * z.re * w;
                }
            }
        }
        grad
    }
}

/// Log-mel spectrogram as `[num_frames][num_mels]`.
pub fn mel_spectrogram(wave: &Waveform, cfg: &MelConfig) -> Result<Vec<Vec<f64>>> {
    if wave.sample_rate() != cfg.sample_rate {
        return Err(Error::Config(format!(
            "waveform rate {} does not match mel config rate {}",
            wave.sample_rate(),
            cfg.sample_rate
        )));
    }
    if wave.len() < cfg.hop_length {
        return Err(Error::Config(format!(
            "waveform of {} samples is shorter than one hop ({})",
            wave.len(),
            cfg.hop_length
        )));
    }
    let plan = MelPlan::new(cfg)?;
    let frames = plan.num_frames(wave.len());
    let flat = plan.forward(wave.samples());
    Ok((0..frames)
        .map(|i| (0..cfg.num_mels).map(|m| flat[m * frames + i]).collect())
        .collect())
}
