use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

/// Complex STFT laid out as real channels: rows `0..bins` hold the real parts
/// and rows `bins..2·bins` the imaginary parts, each `frames` long.
pub struct StftPlan {
    fft_size: usize,
    hop: usize,
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for StftPlan {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "StftPlan({}, hop {})", self.fft_size, self.hop)
    }
}

impl StftPlan {
    pub fn new(fft_size: usize, hop: usize) -> Self {
        let window = (0..fft_size)
            .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / fft_size as f64).cos())
            .collect();
        Self {
            fft_size,
            hop,
            window,
            fft: FftPlanner::new().plan_fft_forward(fft_size),
        }
    }

    pub fn fft_size(&self) -> usize {
        self.fft_size
    }

    pub fn bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    pub fn num_frames(&self, len: usize) -> usize {
        len.div_ceil(self.hop)
    }

    fn origin(&self, frame: usize) -> isize {
        (frame * self.hop) as isize - (self.fft_size / 2) as isize
    }

    pub fn forward(&self, signal: &[f64]) -> Vec<f64> {
        let frames = self.num_frames(signal.len());
        let bins = self.bins();
        let mut out = vec![0.0; 2 * bins * frames];
        let mut buf = vec![Complex::new(0.0, 0.0); self.fft_size];
        for i in 0..frames {
            let origin = self.origin(i);
            for (n, slot) in buf.iter_mut().enumerate() {
                let idx = origin + n as isize;
                let x = if idx >= 0 && (idx as usize) < signal.len() { signal[idx as usize] } else { 0.0 };
                *slot = Complex::new(x * self.window[n], 0.0);
            }
            self.fft.process(&mut buf);
            for k in 0..bins {
                out[k * frames + i] = buf[k].re;
                out[(bins + k) * frames + i] = buf[k].im;
            }
        }
        out
    }

    pub fn backward(&self, len: usize, grad_out: &[f64]) -> Vec<f64> {
        let frames = self.num_frames(len);
        let bins = self.bins();
        let mut grad = vec![0.0; len];
        let mut buf = vec![Complex::new(0.0, 0.0); self.fft_size];
        for i in 0..frames {
            for (k, slot) in buf.iter_mut().enumerate() {
                *slot = if k < bins {
                    Complex::new(grad_out[k * frames + i], -grad_out[(bins + k) * frames + i])
                } else {
                    Complex::new(0.0, 0.0)
                };
            }
            self.fft.process(&mut buf);
            let origin = self.origin(i);
            for (n, z) in buf.iter().enumerate() {
                let idx = origin + n as isize;
                if idx >= 0 && (idx as usize) < len {
                    grad[idx as usize] += z.re * self.window[n];
                }
            }
        }
        grad
    }
}
