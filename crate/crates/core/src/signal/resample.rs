use std::f64::consts::PI;

use super::Waveform;
use crate::error::{Error, Result};

/// Zero crossings of the sinc kept on each side of the filter centre.
const HALF_ZERO_CROSSINGS: usize = 24;
const KAISER_BETA: f64 = 8.6;

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Modified Bessel function of the first kind, order zero.
fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let half = x / 2.0;
    for k in 1..64 {
        term *= (half / k as f64) * (half / k as f64);
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

/// Band-limited rational resampling with a Kaiser-windowed sinc, evaluated
/// polyphase (one filter per output phase).
pub fn resample(wave: &Waveform, target_rate: u32) -> Result<Waveform> {
    if target_rate == 0 {
        return Err(Error::Config("target sample rate must be positive".into()));
    }
    let src = wave.sample_rate() as u64;
    if src == target_rate as u64 {
        return Ok(wave.clone());
    }
    let g = gcd(src, target_rate as u64);
    let up = (target_rate as u64 / g) as usize;
    let down = (src / g) as usize;
    let cutoff = (up as f64 / down as f64).min(1.0);
    let half = (HALF_ZERO_CROSSINGS as f64 / cutoff).ceil() as isize;
    let taps = (2 * half + 1) as usize;

    // filters[phase][j] weights input sample base - half + j for output time
    // base + phase / up.
    let mut filters = vec![vec![0.0; taps]; up];
    for (phase, filter) in filters.iter_mut().enumerate() {
        let frac = phase as f64 / up as f64;
        for (j, w) in filter.iter_mut().enumerate() {
            let t = frac - (j as isize - half) as f64;
            let r = t / (half as f64 + 1.0);
            if r.abs() >= 1.0 {
                continue;
            }
            let window = bessel_i0(KAISER_BETA * (1.0 - r * r).sqrt()) / bessel_i0(KAISER_BETA);
            *w = cutoff * sinc(cutoff * t) * window;
        }
    }

    let input = wave.samples();
    let out_len = (input.len() * up).div_ceil(down);
    let mut out = Vec::with_capacity(out_len);
    for n in 0..out_len {
        let pos = n * down;
        let base = (pos / up) as isize;
        let filter = &filters[pos % up];
        let mut acc = 0.0;
        for (j, &w) in filter.iter().enumerate() {
            let idx = base - half + j as isize;
            if idx >= 0 && (idx as usize) < input.len() {
                acc += w * input[idx as usize];
            }
        }
        out.push(acc);
    }
    Waveform::new(out, target_rate)
}
