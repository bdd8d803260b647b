//! Mel-cepstral distortion and log-spectral distance.

use std::f64::consts::{LN_10, PI};

use serde::{Deserialize, Serialize};
use streamdec_core::signal::{MelConfig, MelPlan, StftPlan, Waveform};

use crate::error::{EvalError, Result};

/// `(10 / ln 10) · √2`, the dB scale of a unit cepstral distance.
pub const MCD_CONSTANT: f64 = 10.0 / LN_10 * std::f64::consts::SQRT_2;

/// Zero-pads the shorter signal so both have the same length. Fails when the
/// rates differ or the lengths differ by more than `tolerance` samples.
pub(crate) fn align(a: &Waveform, b: &Waveform, tolerance: usize) -> Result<(Waveform, Waveform)> {
    if a.sample_rate() != b.sample_rate() {
        return Err(EvalError::RateMismatch(a.sample_rate(), b.sample_rate()));
    }
    let diff = a.len().abs_diff(b.len());
    if diff > tolerance {
        return Err(EvalError::LengthMismatch { diff, tolerance });
    }
    let n = a.len().max(b.len());
    Ok((a.with_len(n), b.with_len(n)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McdConfig {
    pub mel: MelConfig,
    /// Cepstral coefficients 1..=order are compared; c0 (energy) is excluded.
    pub order: usize,
}

impl McdConfig {
    pub fn for_rate(sample_rate: u32) -> Self {
        Self {
            mel: MelConfig::for_rate(sample_rate),
            order: 24,
        }
    }

    fn validate(&self) -> Result<()> {
        self.mel.validate()?;
        if self.order == 0 || self.order >= self.mel.num_mels {
            return Err(EvalError::Config(format!(
                "cepstral order {} needs 0 < order < num_mels ({})",
                self.order, self.mel.num_mels
            )));
        }
        Ok(())
    }
}

/// Orthonormal DCT-II of each log-mel frame, truncated to c0..=order.
pub fn mel_cepstra(wave: &Waveform, cfg: &McdConfig) -> Result<Vec<Vec<f64>>> {
    cfg.validate()?;
    if wave.sample_rate() != cfg.mel.sample_rate {
        return Err(EvalError::RateMismatch(wave.sample_rate(), cfg.mel.sample_rate));
    }
    if wave.len() < cfg.mel.hop_length {
        return Err(EvalError::TooShort {
            len: wave.len(),
            frame: cfg.mel.hop_length,
        });
    }
    let plan = MelPlan::new(&cfg.mel)?;
    let frames = plan.num_frames(wave.len());
    let flat = plan.forward(wave.samples());
    let m = cfg.mel.num_mels;
    let basis: Vec<Vec<f64>> = (0..=cfg.order)
        .map(|k| {
            let scale = if k == 0 { (1.0 / m as f64).sqrt() } else { (2.0 / m as f64).sqrt() };
            (0..m).map(|j| scale * (PI * k as f64 * (j as f64 + 0.5) / m as f64).cos()).collect()
        })
        .collect();
    Ok((0..frames)
        .map(|i| basis.iter().map(|b| (0..m).map(|j| b[j] * flat[j * frames + i]).sum()).collect())
        .collect())
}

/// Mean over frames of `MCD_CONSTANT · ‖a[1..] − b[1..]‖₂`.
pub fn mcd_from_cepstra(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(EvalError::LengthMismatch {
            diff: a.len().abs_diff(b.len()),
            tolerance: 0,
        });
    }
    if a.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| {
            let d: f64 = x.iter().zip(y).skip(1).map(|(p, q)| (p - q) * (p - q)).sum();
            MCD_CONSTANT * d.sqrt()
        })
        .sum();
    Ok(total / a.len() as f64)
}

/// Lengths may differ by at most one analysis hop; the shorter signal is
/// zero-padded.
pub fn mcd(reference: &Waveform, test: &Waveform, cfg: &McdConfig) -> Result<f64> {
    let (r, t) = align(reference, test, cfg.mel.hop_length)?;
    mcd_from_cepstra(&mel_cepstra(&r, cfg)?, &mel_cepstra(&t, cfg)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LsdConfig {
    pub fft_size: usize,
    pub hop: usize,
    /// Power floor applied before `log10`.
    pub floor: f64,
}

impl LsdConfig {
    pub fn for_rate(sample_rate: u32) -> Self {
        let fft_size = if sample_rate >= 44100 { 2048 } else { 1024 };
        Self {
            fft_size,
            hop: fft_size / 4,
            floor: 1e-10,
        }
    }
}

fn log_power(wave: &Waveform, plan: &StftPlan, floor: f64) -> (usize, usize, Vec<f64>) {
    let frames = plan.num_frames(wave.len());
    let bins = plan.bins();
    let spec = plan.forward(wave.samples());
    let mut out = vec![0.0; frames * bins];
    for k in 0..bins {
        for i in 0..frames {
            let (re, im) = (spec[k * frames + i], spec[(bins + k) * frames + i]);
            out[i * bins + k] = (re * re + im * im).max(floor).log10();
        }
    }
    (frames, bins, out)
}

/// Mean over frames of the RMS (over bins) difference of `log10` power.
pub fn lsd(reference: &Waveform, test: &Waveform, cfg: &LsdConfig) -> Result<f64> {
    if cfg.fft_size < 2 || cfg.hop == 0 || cfg.floor <= 0.0 {
        return Err(EvalError::Config("LSD needs fft_size ≥ 2, hop > 0 and a positive floor".into()));
    }
    let (r, t) = align(reference, test, cfg.hop)?;
    if r.is_empty() {
        return Err(EvalError::TooShort { len: 0, frame: 1 });
    }
    let plan = StftPlan::new(cfg.fft_size, cfg.hop);
    let (frames, bins, a) = log_power(&r, &plan, cfg.floor);
    let (_, _, b) = log_power(&t, &plan, cfg.floor);
    let total: f64 = a
        .chunks(bins)
        .zip(b.chunks(bins))
        .map(|(x, y)| (x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum::<f64>() / bins as f64).sqrt())
        .sum();
    Ok(total / frames as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const SR: u32 = 24000;

    fn noise(seed: u64, n: usize) -> Waveform {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Waveform::new((0..n).map(|_| rng.random_range(-0.5..0.5)).collect(), SR).unwrap()
    }

    #[test]
    fn unit_cepstral_difference_constant() {
        let a = vec![vec![0.0; 25]];
        let mut b = a.clone();
        b[0][3] = 1.0;
        let v = mcd_from_cepstra(&a, &b).unwrap();
        assert!((v - 6.142).abs() < 1e-3);
        // c0 differences are ignored.
        b[0][0] = 5.0;
        assert_eq!(mcd_from_cepstra(&a, &b).unwrap(), v);
    }

    #[test]
    fn orthonormal_dct_preserves_energy() {
        let cfg = McdConfig {
            order: 79,
            ..McdConfig::for_rate(SR)
        };
        let w = noise(1, 3000);
        let c = mel_cepstra(&w, &cfg).unwrap();
        let plan = MelPlan::new(&cfg.mel).unwrap();
        let flat = plan.forward(w.samples());
        let frames = c.len();
        for (i, frame) in c.iter().enumerate() {
            let e_mel: f64 = (0..80).map(|j| flat[j * frames + i].powi(2)).sum();
            let e_cep: f64 = frame.iter().map(|v| v * v).sum();
            assert!((e_mel - e_cep).abs() < 1e-8 * e_mel);
        }
    }

    #[test]
    fn plus_one_db_gives_a_tenth() {
        let w = noise(2, 12000);
        let v = lsd(&w, &w.scaled(10f64.powf(1.0 / 20.0)), &LsdConfig::for_rate(SR)).unwrap();
        assert!((v - 0.1).abs() < 1e-3, "{v}");
    }

    #[test]
    fn identities_and_symmetry() {
        let a = noise(3, 6000);
        let b = noise(4, 6000);
        let m = McdConfig::for_rate(SR);
        let l = LsdConfig::for_rate(SR);
        assert_eq!(mcd(&a, &a, &m).unwrap(), 0.0);
        assert_eq!(lsd(&a, &a, &l).unwrap(), 0.0);
        assert!(mcd(&a, &b, &m).unwrap() > 0.0);
        assert_eq!(mcd(&a, &b, &m).unwrap(), mcd(&b, &a, &m).unwrap());
        assert_eq!(lsd(&a, &b, &l).unwrap(), lsd(&b, &a, &l).unwrap());
    }

    #[test]
    fn length_mismatch_beyond_one_hop() {
        let a = noise(5, 6000);
        assert!(matches!(
            mcd(&a, &a.with_len(6301), &McdConfig::for_rate(SR)),
            Err(EvalError::LengthMismatch { .. })
        ));
        assert!(matches!(
            lsd(&a, &a.with_len(6257), &LsdConfig::for_rate(SR)),
            Err(EvalError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn order_must_fit_the_mel_bands() {
        let cfg = McdConfig {
            order: 80,
            ..McdConfig::for_rate(SR)
        };
        assert!(matches!(mel_cepstra(&noise(6, 1000), &cfg), Err(EvalError::Config(_))));
    }
}
