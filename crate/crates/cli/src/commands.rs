use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use streamdec_core::checkpoint::Checkpoint;
use streamdec_core::codec::CodecRuntime;
use streamdec_core::quantizer::CodeFrame;
use streamdec_core::signal::{load_wav, save_wav, BitDepth, Waveform};
use streamdec_eval::{evaluate_pair, EvalConfig, MetricReport};
use streamdec_stream::bitstream::{pack_frames, unpack_frames};
use streamdec_stream::{bench_latency, BitstreamError, BitstreamHeader, FrameParser, LatencyReport, StreamState};
use streamdec_train::{
    extract_normalized_codes, load_stage_checkpoint, train_joint, train_stage1, train_stage2, train_vocoder, Corpus,
    CodesDataset, ExperimentConfig, RunOptions, RunPaths, StageKind, TrainMode, TrainReport,
};

use crate::error::{CliError, Result};

/// Output root for relative run directories; defaults to the working directory.
pub const HOME_ENV: &str = "STREAMDEC_HOME";

pub const DEFAULT_WINDOWS_MS: [f64; 4] = [12.5, 25.0, 50.0, 100.0];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StageArg {
    One,
    Two,
    Vocoder,
    All,
}

impl std::str::FromStr for StageArg {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "1" => Ok(Self::One),
            "2" => Ok(Self::Two),
            "vocoder" => Ok(Self::Vocoder),
            "all" => Ok(Self::All),
            other => Err(format!("unknown stage {other:?} (expected 1, 2, vocoder or all)")),
        }
    }
}

/// A config file path, or the name of a built-in preset when no such file exists.
pub fn load_config(arg: &str) -> Result<ExperimentConfig> {
    let path = Path::new(arg);
    if !path.exists() {
        if let Some(cfg) = ExperimentConfig::preset(arg) {
            return Ok(cfg);
        }
        return Err(CliError::config(format!("config file {arg} does not exist (presets: desk, full)")));
    }
    ExperimentConfig::load(path).map_err(|e| match e {
        streamdec_train::TrainError::Io { path, source } => {
            CliError::config(format!("cannot read config {}: {source}", path.display()))
        }
        other => other.into(),
    })
}

/// Run directory of `cfg`: `out` if given, else `output_dir` resolved against `home`.
pub fn run_dir(cfg: &ExperimentConfig, out: Option<&Path>, home: Option<&Path>) -> PathBuf {
    if let Some(out) = out {
        return out.to_path_buf();
    }
    if cfg.output_dir.is_absolute() {
        return cfg.output_dir.clone();
    }
    match home {
        Some(h) => h.join(&cfg.output_dir),
        None => cfg.output_dir.clone(),
    }
}

pub fn home_from_env() -> Option<PathBuf> {
    std::env::var_os(HOME_ENV).filter(|v| !v.is_empty()).map(PathBuf::from)
}

fn training_split(cfg: &ExperimentConfig) -> Result<Corpus> {
    let corpus = Corpus::from_config(&cfg.corpus, cfg.codec.sample_rate)?;
    Ok(corpus.split(cfg.corpus.heldout_utterances)?.0)
}

#[derive(Clone, Debug)]
pub struct TrainRequest {
    pub config: String,
    pub stage: StageArg,
    pub force: bool,
    pub max_steps: Option<u64>,
    pub out: Option<PathBuf>,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub run_dir: PathBuf,
    pub reports: Vec<TrainReport>,
}

impl TrainOutcome {
    pub fn summary(&self) -> String {
        let mut out = format!("run directory {}\n", self.run_dir.display());
        let mel = |v: Option<f64>| v.map_or("-".to_string(), |m| format!("{m:.4}"));
        for r in &self.reports {
            out.push_str(&format!(
                "{} ({:?}): {}/{} iterations, {:.2} it/s, smoothed mel {} -> {}{}\n",
                r.stage.name(),
                r.mode,
                r.completed,
                r.iterations,
                r.iters_per_sec,
                mel(r.smoothed_mel_first),
                mel(r.smoothed_mel_last),
                if r.complete { "" } else { " (halted, resumable)" }
            ));
        }
        out
    }
}

fn stages_for(mode: TrainMode, stage: StageArg) -> Result<Vec<StageKind>> {
    use StageKind::*;
    let baseline = mode == TrainMode::SoundStreamBaseline;
    Ok(match stage {
        StageArg::All if baseline => vec![Joint],
        StageArg::All if mode == TrainMode::Vocoder => vec![Stage1, Vocoder],
        StageArg::All => vec![Stage1, Stage2],
        _ if baseline => {
            return Err(CliError::config("the baseline trains jointly; use --stage all"));
        }
        StageArg::One => vec![Stage1],
        StageArg::Two if mode == TrainMode::Vocoder => {
            return Err(CliError::config("vocoder mode has no stage 2; use --stage vocoder"));
        }
        StageArg::Two => vec![Stage2],
        StageArg::Vocoder if mode != TrainMode::Vocoder => {
            return Err(CliError::config(format!(
                "--stage vocoder needs schedule.mode = \"vocoder\" (config has {mode:?})"
            )));
        }
        StageArg::Vocoder => vec![Vocoder],
    })
}

/// Normalized codes of the training split under the finished stage-1 codec,
/// reused from disk when they were extracted by the same checkpoint.
fn codes_for(cfg: &ExperimentConfig, paths: &RunPaths, stage1: &Checkpoint, train: &Corpus) -> Result<CodesDataset> {
    let path = paths.codes();
    if path.exists() {
        let cached = CodesDataset::load(&path)?;
        if cached.config_hash == stage1.meta.config_hash && cached.codec_hash == stage1.meta.codec_hash {
            return Ok(cached);
        }
    }
    let codes = extract_normalized_codes(&stage1.to_codec()?, train, &cfg.hash())?;
    codes.save(&path)?;
    Ok(codes)
}

pub fn cmd_train(req: &TrainRequest, home: Option<&Path>) -> Result<TrainOutcome> {
    let cfg = load_config(&req.config)?;
    let stages = stages_for(cfg.schedule.mode, req.stage)?;
    let root = run_dir(&cfg, req.out.as_deref(), home);
    let paths = RunPaths::new(&root);
    std::fs::create_dir_all(&root).map_err(|e| CliError::new(crate::ExitKind::Failure, format!("{}: {e}", root.display())))?;
    std::fs::write(paths.config(), cfg.to_toml_string())
        .map_err(|e| CliError::new(crate::ExitKind::Failure, format!("{}: {e}", paths.config().display())))?;
    let train = training_split(&cfg)?;
    let opts = RunOptions {
        force: req.force,
        halt_after: req.max_steps,
    };
    let mut reports = Vec::new();
    for stage in stages {
        let report = match stage {
            StageKind::Stage1 => train_stage1(&cfg, &train, &paths, &opts)?,
            StageKind::Stage2 => train_stage2(&cfg, &train, &paths, &opts)?,
            StageKind::Joint => train_joint(&cfg, &train, &paths, &opts)?,
            StageKind::Vocoder => {
                let source = load_stage_checkpoint(&cfg, &paths, StageKind::Stage1, req.force)?;
                let codes = codes_for(&cfg, &paths, &source, &train)?;
                train_vocoder(&cfg, &source, &codes, &train, &paths, &opts)?
            }
        };
        let complete = report.complete;
        reports.push(report);
        if !complete {
            break;
        }
    }
    Ok(TrainOutcome { run_dir: root, reports })
}

/// Extracts normalized codes of the training split with the finished
/// stage-1 checkpoint of the run.
pub fn cmd_extract_codes(
    config: &str,
    out: Option<&Path>,
    run: Option<&Path>,
    force: bool,
    home: Option<&Path>,
) -> Result<(PathBuf, CodesDataset)> {
    let cfg = load_config(config)?;
    let paths = RunPaths::new(run_dir(&cfg, run, home));
    let source = load_stage_checkpoint(&cfg, &paths, StageKind::Stage1, force)?;
    let train = training_split(&cfg)?;
    let codes = extract_normalized_codes(&source.to_codec()?, &train, &cfg.hash())?;
    let target = out.map(Path::to_path_buf).unwrap_or_else(|| paths.codes());
    codes.save(&target)?;
    Ok((target, codes))
}

/// Loads a checkpoint for inference; a missing file is a missing prerequisite.
pub fn load_model(path: &Path) -> Result<(Checkpoint, CodecRuntime)> {
    if !path.exists() {
        return Err(CliError::prerequisite(format!("checkpoint {} does not exist", path.display())));
    }
    let ckpt = Checkpoint::load(path)?;
    let rt = ckpt.to_codec()?.runtime()?;
    Ok((ckpt, rt))
}

pub fn header_for(ckpt: &Checkpoint, rt: &CodecRuntime) -> Result<BitstreamHeader> {
    let books = u8::try_from(rt.codebook.num_books())
        .map_err(|_| CliError::config("more than 255 codebooks cannot be written to a bitstream"))?;
    let size = rt.codebook.book_size();
    let bits = (usize::BITS - (size.max(2) - 1).leading_zeros()) as u8;
    let hop = u32::try_from(rt.hop).map_err(|_| CliError::config("hop does not fit the bitstream header"))?;
    Ok(BitstreamHeader::new(ckpt.meta.codec.generator.variant, rt.sample_rate, hop, books, bits)
        .with_hash_hex(&ckpt.meta.config_hash))
}

/// Samples per chunk for a chunk duration in milliseconds.
pub fn chunk_samples(chunk_ms: f64, sample_rate: u32) -> Result<usize> {
    if !(chunk_ms.is_finite() && chunk_ms > 0.0) {
        return Err(CliError::config(format!("--chunk-ms must be positive, got {chunk_ms}")));
    }
    Ok(((chunk_ms * sample_rate as f64 / 1000.0).round() as usize).max(1))
}

/// Codes of `wave`, either in one batch pass or through the streaming
/// encoder fed `chunk` samples at a time. The stream tail is zero-padded
/// to a full hop, which matches the batch padding.
pub fn encode_wave(rt: &CodecRuntime, wave: &Waveform, chunk: Option<usize>) -> Result<Vec<CodeFrame>> {
    let Some(chunk) = chunk else {
        return Ok(rt.encode_codes(wave)?);
    };
    if wave.is_empty() {
        return Err(streamdec_core::Error::EmptyAudio("encoder input".into()).into());
    }
    let mut state = StreamState::encoder(rt);
    let mut frames = Vec::with_capacity(wave.len().div_ceil(rt.hop));
    for piece in wave.samples().chunks(chunk) {
        frames.extend(streamdec_stream::stream_encode_chunk(piece, &mut state, rt)?);
    }
    let rem = state.remainder().len();
    if rem > 0 {
        let pad = vec![0.0; rt.hop - rem];
        frames.extend(streamdec_stream::stream_encode_chunk(&pad, &mut state, rt)?);
    }
    Ok(frames)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncodeSummary {
    pub frames: usize,
    pub payload_bytes: usize,
    pub total_bytes: usize,
    pub bitrate: u64,
}

pub fn cmd_encode(checkpoint: &Path, input: &Path, output: &Path, chunk_ms: Option<f64>) -> Result<EncodeSummary> {
    let (ckpt, rt) = load_model(checkpoint)?;
    let chunk = chunk_ms.map(|ms| chunk_samples(ms, rt.sample_rate)).transpose()?;
    if !input.exists() {
        return Err(CliError::prerequisite(format!("input {} does not exist", input.display())));
    }
    let wave = load_wav(input, Some(rt.sample_rate))?;
    let frames = encode_wave(&rt, &wave, chunk)?;
    let mut header = header_for(&ckpt, &rt)?;
    header.num_frames = Some(
        u32::try_from(frames.len()).map_err(|_| CliError::config("input is too long for one bitstream"))?,
    );
    let bytes = pack_frames(&frames, &header)?;
    write_file(output, &bytes)?;
    Ok(EncodeSummary {
        frames: frames.len(),
        payload_bytes: frames.len() * header.frame_bytes(),
        total_bytes: bytes.len(),
        bitrate: streamdec_stream::bitrate(&header),
    })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)
            .map_err(|e| CliError::new(crate::ExitKind::Failure, format!("{}: {e}", parent.display())))?;
    }
    std::fs::write(path, bytes).map_err(|e| CliError::new(crate::ExitKind::Failure, format!("{}: {e}", path.display())))
}

/// Refuses to decode a bitstream with a checkpoint that cannot have produced it.
pub fn check_compatible(header: &BitstreamHeader, expected: &BitstreamHeader, force: bool) -> Result<()> {
    let fields = [
        ("variant", header.variant.name().to_string(), expected.variant.name().to_string()),
        ("sample rate", header.sample_rate.to_string(), expected.sample_rate.to_string()),
        ("hop", header.hop.to_string(), expected.hop.to_string()),
        ("codebooks", header.num_books.to_string(), expected.num_books.to_string()),
        ("bits per code", header.bits_per_code.to_string(), expected.bits_per_code.to_string()),
    ];
    for (name, got, want) in fields {
        if got != want {
            return Err(CliError::compatibility(format!("bitstream {name} is {got} but the checkpoint expects {want}")));
        }
    }
    if !force && header.config_hash != expected.config_hash {
        return Err(CliError::compatibility(format!(
            "bitstream config hash {} differs from the checkpoint's {} (use --force to decode anyway)",
            header.hash_hex(),
            expected.hash_hex()
        )));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecodeSummary {
    pub frames: usize,
    pub samples: usize,
    pub sample_rate: u32,
}

/// Decodes `bytes` in one pass, or by feeding the parser `chunk_frames`
/// frames' worth of bytes at a time and decoding each batch as it arrives.
pub fn decode_bytes(
    bytes: &[u8],
    expected: &BitstreamHeader,
    rt: &CodecRuntime,
    chunk_frames: Option<usize>,
    force: bool,
) -> Result<Waveform> {
    let Some(chunk_frames) = chunk_frames else {
        let (header, frames) = unpack_frames(bytes)?;
        check_compatible(&header, expected, force)?;
        return Ok(rt.decode_codes(&frames)?);
    };
    let mut parser = FrameParser::new();
    let mut state = StreamState::decoder(rt);
    let mut samples = Vec::new();
    let mut frames_seen = 0usize;
    let step = chunk_frames.max(1) * expected.frame_bytes();
    let mut checked = false;
    let mut offset = 0;
    while offset < bytes.len() {
        let end = if parser.header().is_none() {
            bytes.len().min(streamdec_stream::bitstream::HEADER_LEN)
        } else {
            bytes.len().min(offset + step)
        };
        let frames = parser.push(&bytes[offset..end])?;
        offset = end;
        if !checked {
            if let Some(h) = parser.header() {
                check_compatible(h, expected, force)?;
                checked = true;
            }
        }
        if !frames.is_empty() {
            frames_seen += frames.len();
            samples.extend(streamdec_stream::stream_decode_chunk(&frames, &mut state, rt)?);
        }
    }
    parser.finish()?;
    let header = parser.header().ok_or(BitstreamError::TruncatedHeader(0))?;
    if let Some(n) = header.num_frames {
        if n as usize != frames_seen {
            return Err(BitstreamError::FrameCount {
                declared: n,
                found: frames_seen,
            }
            .into());
        }
    }
    Ok(Waveform::new(samples, rt.sample_rate)?)
}

pub fn cmd_decode(
    checkpoint: &Path,
    input: &Path,
    output: &Path,
    chunk_ms: Option<f64>,
    force: bool,
) -> Result<DecodeSummary> {
    let (ckpt, rt) = load_model(checkpoint)?;
    let expected = header_for(&ckpt, &rt)?;
    let chunk_frames = chunk_ms
        .map(|ms| chunk_samples(ms, rt.sample_rate).map(|n| n.div_ceil(rt.hop)))
        .transpose()?;
    let bytes = std::fs::read(input)
        .map_err(|e| CliError::prerequisite(format!("cannot read bitstream {}: {e}", input.display())))?;
    let wave = decode_bytes(&bytes, &expected, &rt, chunk_frames, force)?;
    save_wav(&wave, output, BitDepth::Sixteen)?;
    Ok(DecodeSummary {
        frames: wave.len() / rt.hop,
        samples: wave.len(),
        sample_rate: rt.sample_rate,
    })
}

/// Where evaluation and benchmark audio comes from.
#[derive(Clone, Debug, PartialEq)]
pub enum CorpusArg {
    Directory(PathBuf),
    /// `synthetic:<utterances>:<seconds>[:<seed>]`
    Synthetic { utterances: usize, seconds: f64, seed: u64 },
}

impl std::str::FromStr for CorpusArg {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let Some(rest) = s.strip_prefix("synthetic:") else {
            return Ok(Self::Directory(PathBuf::from(s)));
        };
        let parts: Vec<&str> = rest.split(':').collect();
        let bad = || format!("expected synthetic:<utterances>:<seconds>[:<seed>], got {s:?}");
        if !(2..=3).contains(&parts.len()) {
            return Err(bad());
        }
        let utterances = parts[0].parse().map_err(|_| bad())?;
        let seconds: f64 = parts[1].parse().map_err(|_| bad())?;
        let seed = parts.get(2).map(|p| p.parse()).transpose().map_err(|_| bad())?.unwrap_or(0);
        if utterances == 0 || !(seconds > 0.0) {
            return Err(bad());
        }
        Ok(Self::Synthetic {
            utterances,
            seconds,
            seed,
        })
    }
}

impl CorpusArg {
    pub fn load(&self, sample_rate: u32) -> Result<Corpus> {
        match self {
            Self::Directory(dir) if !dir.is_dir() => {
                Err(CliError::prerequisite(format!("corpus directory {} does not exist", dir.display())))
            }
            Self::Directory(dir) => Ok(Corpus::load_dir(dir, sample_rate)?),
            Self::Synthetic {
                utterances,
                seconds,
                seed,
            } => Ok(Corpus::synthetic(*utterances, *seconds, sample_rate, *seed)),
        }
    }
}

#[derive(Clone, Debug)]
pub struct BenchRequest {
    pub checkpoint: PathBuf,
    /// Extra `(name, checkpoint)` decoders timed against the same codes.
    pub decoders: Vec<(String, PathBuf)>,
    pub corpus: CorpusArg,
    pub windows_ms: Vec<f64>,
    /// At most this many utterances, drawn with `seed`.
    pub utterances: usize,
    pub seed: u64,
    pub warmup: usize,
}

pub fn cmd_bench(req: &BenchRequest) -> Result<LatencyReport> {
    if req.windows_ms.is_empty() || req.windows_ms.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
        return Err(CliError::config("--windows needs positive window lengths in ms"));
    }
    let (ckpt, encoder) = load_model(&req.checkpoint)?;
    let mut decoders = vec![(ckpt.meta.codec.generator.variant.name().to_string(), encoder.clone())];
    for (name, path) in &req.decoders {
        decoders.push((name.clone(), load_model(path)?.1));
    }
    let corpus = req.corpus.load(encoder.sample_rate)?;
    let mut waves: Vec<Waveform> = corpus.utterances.into_iter().map(|u| u.wave).collect();
    waves.shuffle(&mut ChaCha8Rng::seed_from_u64(req.seed));
    waves.truncate(req.utterances.max(1));
    Ok(bench_latency(&encoder, &decoders, &waves, &req.windows_ms, req.warmup)?)
}

#[derive(Clone, Debug)]
pub struct EvalRequest {
    /// Codec under test; `None` scores every reference against itself.
    pub checkpoint: Option<PathBuf>,
    pub corpus: CorpusArg,
    /// Analysis rate when no checkpoint fixes it.
    pub sample_rate: u32,
    pub system: Option<String>,
}

pub fn cmd_eval(req: &EvalRequest) -> Result<MetricReport> {
    let model = req.checkpoint.as_deref().map(load_model).transpose()?;
    let rate = model.as_ref().map_or(req.sample_rate, |(_, rt)| rt.sample_rate);
    let corpus = req.corpus.load(rate)?;
    if corpus.is_empty() {
        return Err(CliError::config("evaluation corpus is empty"));
    }
    let cfg = EvalConfig::for_rate(rate);
    let mut rows = Vec::with_capacity(corpus.len());
    for u in &corpus.utterances {
        let test = match &model {
            Some((_, rt)) => rt.reconstruct(&u.wave)?,
            None => u.wave.clone(),
        };
        rows.push(evaluate_pair(&u.name, &u.wave, &test, &cfg)?);
    }
    let system = match (&req.system, &model) {
        (Some(s), _) => s.clone(),
        (None, Some((ckpt, _))) => ckpt.meta.codec.generator.variant.name().to_string(),
        (None, None) => "identity".to_string(),
    };
    let report = MetricReport::from_utterances(&system, rows)?;
    Ok(match &model {
        Some((ckpt, _)) => report.with_config_hash(ckpt.meta.config_hash.clone()),
        None => report,
    })
}
