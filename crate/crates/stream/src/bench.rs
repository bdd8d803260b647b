//! Per-window processing time of streaming encode and decode.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use streamdec_core::codec::CodecRuntime;
use streamdec_core::quantizer::CodeFrame;
use streamdec_core::signal::Waveform;
use streamdec_core::{Error, Result};

use crate::session::{stream_decode_chunk, stream_encode_chunk, StreamState};

pub const DEFAULT_WINDOWS_MS: [f64; 4] = [12.5, 25.0, 50.0, 100.0];
pub const DEFAULT_WARMUP: usize = 5;
pub const MIN_UTTERANCES: usize = 50;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BenchRole {
    Encoder,
    Decoder,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyRecord {
    pub window_ms: f64,
    pub role: BenchRole,
    /// Column label: `encoder` or the decoder's name.
    pub name: String,
    pub backend: String,
    pub mean_ms: f64,
    pub std_ms: f64,
    pub utterances: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub window_ms: f64,
    pub decoder: String,
    /// `max(encoder, decoder)` mean per-window time.
    pub max_ms: f64,
    pub streamable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub backend: String,
    pub sample_rate: u32,
    pub windows_ms: Vec<f64>,
    pub decoders: Vec<String>,
    pub records: Vec<LatencyRecord>,
    pub verdicts: Vec<Verdict>,
    pub warnings: Vec<String>,
}

pub fn backend_descriptor() -> String {
    format!("cpu-f64-1thread ({}-{})", std::env::consts::ARCH, std::env::consts::OS)
}

/// Rounded to 0.1 µs so text and JSON carry identical values.
fn round_ms(v: f64) -> f64 {
    (v * 1e4).round() / 1e4
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (0.0, 0.0);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

fn window_samples(window_ms: f64, sample_rate: u32) -> Result<usize> {
    let n = (window_ms * sample_rate as f64 / 1000.0).round() as usize;
    if n == 0 {
        return Err(Error::Config(format!("window of {window_ms} ms is empty")));
    }
    Ok(n)
}

/// Mean per-window encode time (ms) over one utterance; also returns the
/// codes emitted per window.
fn time_encode(model: &CodecRuntime, wave: &Waveform, win: usize) -> Result<(f64, Vec<Vec<CodeFrame>>)> {
    let mut state = StreamState::encoder(model);
    let mut total = 0.0;
    let mut per_window = Vec::new();
    for chunk in wave.samples().chunks(win) {
        let t = Instant::now();
        let codes = stream_encode_chunk(chunk, &mut state, model)?;
        total += t.elapsed().as_secs_f64() * 1e3;
        per_window.push(codes);
    }
    Ok((total / per_window.len().max(1) as f64, per_window))
}

fn time_decode(model: &CodecRuntime, windows: &[Vec<CodeFrame>]) -> Result<f64> {
    let mut state = StreamState::decoder(model);
    let mut total = 0.0;
    for codes in windows {
        let t = Instant::now();
        stream_decode_chunk(codes, &mut state, model)?;
        total += t.elapsed().as_secs_f64() * 1e3;
    }
    Ok(total / windows.len().max(1) as f64)
}

/// Times streaming encode with `encoder` and streaming decode with each of
/// `decoders` over non-overlapping windows. The first `warmup` utterances
/// are run once untimed before measurement.
pub fn bench_latency(
    encoder: &CodecRuntime,
    decoders: &[(String, CodecRuntime)],
    utterances: &[Waveform],
    windows_ms: &[f64],
    warmup: usize,
) -> Result<LatencyReport> {
    if utterances.is_empty() {
        return Err(Error::EmptyAudio("benchmark corpus".into()));
    }
    let mut warnings = Vec::new();
    if utterances.len() < MIN_UTTERANCES {
        warnings.push(format!(
            "only {} utterances (protocol asks for at least {MIN_UTTERANCES})",
            utterances.len()
        ));
    }
    if utterances.len() == 1 {
        warnings.push("single utterance: standard deviations are reported as 0".into());
    }
    for (name, d) in decoders {
        if d.hop != encoder.hop || d.sample_rate != encoder.sample_rate || d.codebook.num_books() != encoder.codebook.num_books() {
            return Err(Error::Config(format!("decoder {name} is incompatible with the encoder")));
        }
    }
    let backend = backend_descriptor();
    let sr = encoder.sample_rate;
    let first = window_samples(windows_ms[0].max(1.0), sr)?;
    for w in utterances.iter().take(warmup) {
        let (_, codes) = time_encode(encoder, w, first)?;
        for (_, d) in decoders {
            time_decode(d, &codes)?;
        }
    }
    let mut records = Vec::new();
    let mut verdicts = Vec::new();
    for &wms in windows_ms {
        let win = window_samples(wms, sr)?;
        let mut enc_times = Vec::with_capacity(utterances.len());
        let mut dec_times = vec![Vec::with_capacity(utterances.len()); decoders.len()];
        for w in utterances {
            let (t, codes) = time_encode(encoder, w, win)?;
            enc_times.push(t);
            for (i, (_, d)) in decoders.iter().enumerate() {
                dec_times[i].push(time_decode(d, &codes)?);
            }
        }
        let (em, es) = mean_std(&enc_times);
        let enc_mean = round_ms(em);
        records.push(LatencyRecord {
            window_ms: wms,
            role: BenchRole::Encoder,
            name: "encoder".into(),
            backend: backend.clone(),
            mean_ms: enc_mean,
            std_ms: round_ms(es),
            utterances: utterances.len(),
        });
        for (i, (name, _)) in decoders.iter().enumerate() {
            let (dm, ds) = mean_std(&dec_times[i]);
            let dec_mean = round_ms(dm);
            records.push(LatencyRecord {
                window_ms: wms,
                role: BenchRole::Decoder,
                name: name.clone(),
                backend: backend.clone(),
                mean_ms: dec_mean,
                std_ms: round_ms(ds),
                utterances: utterances.len(),
            });
            verdicts.push(streamability(wms, name, enc_mean, dec_mean));
        }
    }
    Ok(LatencyReport {
        backend,
        sample_rate: sr,
        windows_ms: windows_ms.to_vec(),
        decoders: decoders.iter().map(|(n, _)| n.clone()).collect(),
        records,
        verdicts,
        warnings,
    })
}

/// Encoding and decoding run concurrently, so only the slower side counts.
pub fn streamability(window_ms: f64, decoder: &str, encoder_ms: f64, decoder_ms: f64) -> Verdict {
    let max_ms = encoder_ms.max(decoder_ms);
    Verdict {
        window_ms,
        decoder: decoder.to_string(),
        max_ms,
        streamable: max_ms < window_ms,
    }
}

impl LatencyReport {
    pub fn record(&self, window_ms: f64, name: &str) -> Option<&LatencyRecord> {
        self.records.iter().find(|r| r.window_ms == window_ms && r.name == name)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// One row per window; an encoder column followed by one column per
    /// decoder, each `mean ± std` in ms, then the verdicts.
    pub fn to_text(&self) -> String {
        let mut out = format!("latency per window (ms), backend {}\n", self.backend);
        let mut header = format!("{:>10} | {:>22}", "window", "encoder");
        for d in &self.decoders {
            header.push_str(&format!(" | {:>22}", d));
        }
        out.push_str(&header);
        out.push('\n');
        out.push_str(&"-".repeat(header.chars().count()));
        out.push('\n');
        for &w in &self.windows_ms {
            let cell = |name: &str| {
                self.record(w, name)
                    .map(|r| format!("{:.4} ± {:.4}", r.mean_ms, r.std_ms))
                    .unwrap_or_default()
            };
            let mut row = format!("{:>10} | {:>22}", w, cell("encoder"));
            for d in &self.decoders {
                row.push_str(&format!(" | {:>22}", cell(d)));
            }
            out.push_str(&row);
            out.push('\n');
        }
        out.push_str("streamability (max of encoder and decoder < window):\n");
        for v in &self.verdicts {
            out.push_str(&format!(
                "  {} @ {} ms: {:.4} ms -> {}\n",
                v.decoder,
                v.window_ms,
                v.max_ms,
                if v.streamable { "streamable" } else { "not streamable" }
            ));
        }
        for w in &self.warnings {
            out.push_str(&format!("warning: {w}\n"));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn verdict_rule() {
        assert!(streamability(25.0, "v2", 3.0, 24.9).streamable);
        assert!(!streamability(25.0, "v0", 3.0, 25.1).streamable);
        assert!(!streamability(12.5, "v0", 13.0, 1.0).streamable);
    }

    #[test]
    fn sample_std_and_single_value() {
        assert_eq!(mean_std(&[2.0]), (2.0, 0.0));
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 2f64.sqrt()).abs() < 1e-12);
    }
}
