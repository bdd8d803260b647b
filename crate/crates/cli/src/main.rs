use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use streamdec_cli::{
    cmd_bench, cmd_decode, cmd_encode, cmd_eval, cmd_extract_codes, cmd_train, home_from_env, load_config, BenchRequest,
    CliError, CorpusArg, EvalRequest, ExitKind, StageArg, TrainRequest, DEFAULT_WINDOWS_MS,
};

#[derive(Parser)]
#[command(name = "streamdec", version, about = "Causal streaming speech codec with decoupled decoder training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one stage, or every stage of the configured mode.
    Train {
        /// Experiment config (TOML) or a preset name (desk, full).
        config: String,
        #[arg(long, default_value = "all")]
        stage: StageArg,
        /// Accept prerequisite checkpoints from a different config.
        #[arg(long)]
        force: bool,
        /// Stop after this many iterations of the running stage; rerun to resume.
        #[arg(long)]
        max_steps: Option<u64>,
        /// Run directory (defaults to the config's output_dir).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write normalized codes of the training corpus for vocoder training.
    ExtractCodes {
        config: String,
        #[arg(long)]
        run: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Compress a WAV file into a code bitstream.
    Encode {
        #[arg(long)]
        checkpoint: PathBuf,
        input: PathBuf,
        output: PathBuf,
        /// Feed the streaming encoder chunks of this many milliseconds.
        #[arg(long)]
        chunk_ms: Option<f64>,
    },
    /// Reconstruct a WAV file from a code bitstream.
    Decode {
        #[arg(long)]
        checkpoint: PathBuf,
        input: PathBuf,
        output: PathBuf,
        #[arg(long)]
        chunk_ms: Option<f64>,
        /// Decode even if the bitstream came from a different config.
        #[arg(long)]
        force: bool,
    },
    /// Per-window streaming latency of encoder and decoders.
    Bench {
        #[arg(long)]
        checkpoint: PathBuf,
        /// WAV directory or synthetic:<utterances>:<seconds>[:<seed>].
        corpus: CorpusArg,
        /// Additional decoders as name=checkpoint.
        #[arg(long = "decoder", value_parser = parse_named)]
        decoders: Vec<(String, PathBuf)>,
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_WINDOWS_MS)]
        windows: Vec<f64>,
        #[arg(long, default_value_t = 50)]
        utterances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        warmup: usize,
        /// Also write the report as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Objective metrics of codec reconstructions against the references.
    Eval {
        /// Codec to evaluate; omit with --identity to score references against themselves.
        #[arg(long, required_unless_present = "identity")]
        checkpoint: Option<PathBuf>,
        corpus: CorpusArg,
        #[arg(long, conflicts_with = "checkpoint")]
        identity: bool,
        #[arg(long, default_value_t = 24_000)]
        sample_rate: u32,
        #[arg(long)]
        system: Option<String>,
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Print a preset experiment config as TOML.
    Config { preset: String },
}

fn parse_named(s: &str) -> Result<(String, PathBuf), String> {
    let (name, path) = s.split_once('=').ok_or_else(|| format!("expected name=checkpoint, got {s:?}"))?;
    Ok((name.to_string(), PathBuf::from(path)))
}

fn write_json(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| CliError::new(ExitKind::Failure, format!("{}: {e}", path.display())))
}

fn run(cli: Cli) -> Result<String, CliError> {
    let home = home_from_env();
    match cli.command {
        Command::Train {
            config,
            stage,
            force,
            max_steps,
            out,
        } => {
            let req = TrainRequest {
                config,
                stage,
                force,
                max_steps,
                out,
            };
            Ok(cmd_train(&req, home.as_deref())?.summary())
        }
        Command::ExtractCodes { config, run, out, force } => {
            let (path, codes) = cmd_extract_codes(&config, out.as_deref(), run.as_deref(), force, home.as_deref())?;
            Ok(format!("{} utterances of {}-dim codes -> {}\n", codes.utterances.len(), codes.dim, path.display()))
        }
        Command::Encode {
            checkpoint,
            input,
            output,
            chunk_ms,
        } => {
            let s = cmd_encode(&checkpoint, &input, &output, chunk_ms)?;
            Ok(format!(
                "{} frames, {} payload bytes ({} total) at {} bps -> {}\n",
                s.frames,
                s.payload_bytes,
                s.total_bytes,
                s.bitrate,
                output.display()
            ))
        }
        Command::Decode {
            checkpoint,
            input,
            output,
            chunk_ms,
            force,
        } => {
            let s = cmd_decode(&checkpoint, &input, &output, chunk_ms, force)?;
            Ok(format!("{} frames, {} samples at {} Hz -> {}\n", s.frames, s.samples, s.sample_rate, output.display()))
        }
        Command::Bench {
            checkpoint,
            corpus,
            decoders,
            windows,
            utterances,
            seed,
            warmup,
            json,
        } => {
            let report = cmd_bench(&BenchRequest {
                checkpoint,
                decoders,
                corpus,
                windows_ms: windows,
                utterances,
                seed,
                warmup,
            })?;
            if let Some(p) = json {
                write_json(&p, &report.to_json())?;
            }
            Ok(report.to_text())
        }
        Command::Eval {
            checkpoint,
            corpus,
            identity: _,
            sample_rate,
            system,
            json,
        } => {
            let report = cmd_eval(&EvalRequest {
                checkpoint,
                corpus,
                sample_rate,
                system,
            })?;
            if let Some(p) = json {
                write_json(&p, &report.to_json())?;
            }
            Ok(report.to_text())
        }
        Command::Config { preset } => Ok(load_config(&preset)?.to_toml_string()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(text) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code() as u8)
        }
    }
}
