use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use super::{resample, Waveform};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BitDepth {
    Sixteen,
    TwentyFour,
}

impl BitDepth {
    pub fn bits(self) -> u16 {
        match self {
            BitDepth::Sixteen => 16,
            BitDepth::TwentyFour => 24,
        }
    }

    pub fn from_bits(bits: u16) -> Result<Self> {
        match bits {
            16 => Ok(BitDepth::Sixteen),
            24 => Ok(BitDepth::TwentyFour),
            other => Err(Error::Config(format!("unsupported bit depth {other}"))),
        }
    }
}

/// Reads a PCM (integer or float) WAV file, averaging channels to mono and
/// optionally resampling to `target_rate`.
pub fn load_wav(path: impl AsRef<Path>, target_rate: Option<u32>) -> Result<Waveform> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let wav_err = |e: hound::Error| Error::Wav {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let mut reader = WavReader::new(std::io::BufReader::new(file)).map_err(wav_err)?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    let interleaved: Vec<f64> = match spec.sample_format {
        SampleFormat::Int => {
            let scale = (1u64 << (spec.bits_per_sample - 1)) as f64;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| v as f64 / scale))
                .collect::<std::result::Result<_, _>>()
                .map_err(wav_err)?
        }
        SampleFormat::Float => reader
            .samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<std::result::Result<_, _>>()
            .map_err(wav_err)?,
    };
    if interleaved.is_empty() || channels == 0 {
        return Err(Error::EmptyAudio(path.display().to_string()));
    }
    let mono: Vec<f64> = interleaved
        .chunks_exact(channels)
        .map(|frame| frame.iter().sum::<f64>() / channels as f64)
        .collect();
    let wave = Waveform::new(mono, spec.sample_rate)?;
    match target_rate {
        Some(rate) if rate != spec.sample_rate => resample(&wave, rate),
        _ => Ok(wave),
    }
}

/// Writes mono integer PCM. Samples are clipped to `[-1, 1]`.
pub fn save_wav(wave: &Waveform, path: impl AsRef<Path>, depth: BitDepth) -> Result<()> {
    let path = path.as_ref();
    if wave.is_empty() {
        return Err(Error::EmptyAudio("refusing to write empty waveform".into()));
    }
    let spec = WavSpec {
        channels: 1,
        sample_rate: wave.sample_rate(),
        bits_per_sample: depth.bits(),
        sample_format: SampleFormat::Int,
    };
    let wav_err = |e: hound::Error| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::Wav {
            path: path.to_path_buf(),
            message: other.to_string(),
        },
    };
    let mut writer = WavWriter::create(path, spec).map_err(wav_err)?;
    let full = (1i64 << (depth.bits() - 1)) as f64;
    let (lo, hi) = (-full as i64, full as i64 - 1);
    for &s in wave.samples() {
        let q = (s.clamp(-1.0, 1.0) * full).round() as i64;
        writer.write_sample(q.clamp(lo, hi) as i32).map_err(wav_err)?;
    }
    writer.finalize().map_err(wav_err)
}
