//! JSON-lines training log.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Result, TrainError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogRecord {
    pub stage: String,
    pub step: u64,
    pub mel: f64,
    pub vq: f64,
    pub adv: f64,
    pub fm: f64,
    pub d_loss: f64,
    /// Weighted generator objective.
    pub total: f64,
    pub gen_lr: f64,
    /// Code usage perplexity per book on this batch; empty when the stage
    /// does not quantize on the fly.
    pub perplexity: Vec<f64>,
    pub reseeded: usize,
    /// Seconds since the stage (or its resumed segment) started.
    pub elapsed_s: f64,
}

impl LogRecord {
    /// Copy with the wall-clock field zeroed, for determinism comparisons.
    pub fn untimed(&self) -> Self {
        Self {
            elapsed_s: 0.0,
            ..self.clone()
        }
    }
}

pub struct JsonlLog {
    path: PathBuf,
    file: File,
}

impl JsonlLog {
    /// Opens `path` for appending, keeping only records with `step < keep_below`.
    pub fn open(path: impl AsRef<Path>, keep_below: u64) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let kept: Vec<LogRecord> = if path.exists() {
            read_log(&path)?.into_iter().filter(|r| r.step < keep_below).collect()
        } else {
            Vec::new()
        };
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| TrainError::io(parent, e))?;
        }
        let mut file = File::create(&path).map_err(|e| TrainError::io(&path, e))?;
        for r in &kept {
            writeln!(file, "{}", serde_json::to_string(r).expect("record serializes")).map_err(|e| TrainError::io(&path, e))?;
        }
        drop(file);
        let file = OpenOptions::new().append(true).open(&path).map_err(|e| TrainError::io(&path, e))?;
        Ok(Self { path, file })
    }

    pub fn append(&mut self, record: &LogRecord) -> Result<()> {
        writeln!(self.file, "{}", serde_json::to_string(record).expect("record serializes"))
            .map_err(|e| TrainError::io(&self.path, e))
    }

    pub fn flush(&mut self) -> Result<()> {
        self.file.flush().map_err(|e| TrainError::io(&self.path, e))
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

pub fn read_log(path: impl AsRef<Path>) -> Result<Vec<LogRecord>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| TrainError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| TrainError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| TrainError::Corrupt {
            path: path.to_path_buf(),
            message: format!("line {}: {e}", i + 1),
        })?);
    }
    Ok(out)
}

/// Trailing moving average of `values` over `window` entries.
pub fn smoothed(values: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    let mut out = Vec::with_capacity(values.len());
    let mut sum = 0.0;
    for (i, v) in values.iter().enumerate() {
        sum += v;
        if i >= window {
            sum -= values[i - window];
        }
        out.push(sum / (i + 1).min(window) as f64);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(step: u64) -> LogRecord {
        LogRecord {
            stage: "stage1".into(),
            step,
            mel: 1.0 / (step + 1) as f64,
            vq: 0.0,
            adv: 0.0,
            fm: 0.0,
            d_loss: 0.0,
            total: 0.0,
            gen_lr: 1e-4,
            perplexity: vec![1.5],
            reseeded: 0,
            elapsed_s: step as f64,
        }
    }

    #[test]
    fn reopen_truncates_to_resume_point() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("logs/s.jsonl");
        let mut log = JsonlLog::open(&p, 0).unwrap();
        for s in 0..5 {
            log.append(&rec(s)).unwrap();
        }
        drop(log);
        let mut log = JsonlLog::open(&p, 3).unwrap();
        log.append(&rec(3)).unwrap();
        drop(log);
        let steps: Vec<u64> = read_log(&p).unwrap().iter().map(|r| r.step).collect();
        assert_eq!(steps, [0, 1, 2, 3]);
        assert_eq!(read_log(&p).unwrap()[1], rec(1));
    }

    #[test]
    fn moving_average() {
        assert_eq!(smoothed(&[2.0, 4.0, 6.0, 8.0], 2), [2.0, 3.0, 5.0, 7.0]);
    }
}
