//! Tab-separated per-iteration training log.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use crate::TrainError;

pub const METRICS_HEADER: &str = "iteration\ttriplet\tfocal\ttotal\tn_active\tlr";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRecord {
    /// 1-based.
    pub iteration: u64,
    pub triplet: f64,
    pub focal: f64,
    pub total: f64,
    pub n_active: usize,
    pub lr: f64,
}

impl MetricsRecord {
    pub fn to_line(&self) -> String {
        format!(
            "{}\t{:.9e}\t{:.9e}\t{:.9e}\t{}\t{:e}",
            self.iteration, self.triplet, self.focal, self.total, self.n_active, self.lr
        )
    }

    pub fn parse(line: &str) -> Option<Self> {
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 6 {
            return None;
        }
        Some(MetricsRecord {
            iteration: f[0].parse().ok()?,
            triplet: f[1].parse().ok()?,
            focal: f[2].parse().ok()?,
            total: f[3].parse().ok()?,
            n_active: f[4].parse().ok()?,
            lr: f[5].parse().ok()?,
        })
    }
}

/// Append-only writer. Every record is flushed as soon as it is written.
pub struct MetricsLog {
    path: PathBuf,
    file: File,
}

impl MetricsLog {
    /// Opens for appending, writing the header if the file is new or empty.
    pub fn open(path: &Path) -> Result<Self, TrainError> {
        let io = |e| TrainError::Io {
            path: path.to_path_buf(),
            source: e,
        };
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(io)?;
        if file.metadata().map_err(io)?.len() == 0 {
            writeln!(file, "{METRICS_HEADER}").map_err(io)?;
        }
        Ok(MetricsLog {
            path: path.to_path_buf(),
            file,
        })
    }

    pub fn append(&mut self, r: &MetricsRecord) -> Result<(), TrainError> {
        writeln!(self.file, "{}", r.to_line())
            .and_then(|_| self.file.flush())
            .map_err(|e| TrainError::Io {
                path: self.path.clone(),
                source: e,
            })
    }
}

/// Reads every complete record. A truncated final line, as left by a killed
/// run, is ignored; malformed lines elsewhere are errors.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>, TrainError> {
    let file = File::open(path).map_err(|e| TrainError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let lines: Vec<String> = BufReader::new(file)
        .lines()
        .collect::<Result<_, _>>()
        .map_err(|e| TrainError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
    let mut out = Vec::new();
    for (i, line) in lines.iter().enumerate() {
        if line.is_empty() || line == METRICS_HEADER {
            continue;
        }
        match MetricsRecord::parse(line) {
            Some(r) => out.push(r),
            None if i + 1 == lines.len() => break,
            None => {
                return Err(TrainError::Config(format!(
                    "{} line {}: malformed record",
                    path.display(),
                    i + 1
                )))
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsSummary {
    pub iterations: u64,
    pub first_mean_total: f64,
    pub last_mean_total: f64,
    pub min_total: f64,
    pub final_lr: f64,
    pub mean_active_last: f64,
}

/// Means over the first and last `window` records.
pub fn summarize(records: &[MetricsRecord], window: usize) -> Option<MetricsSummary> {
    let last = records.last()?;
    let w = window.clamp(1, records.len());
    let mean = |rs: &[MetricsRecord], f: fn(&MetricsRecord) -> f64| {
        rs.iter().map(f).sum::<f64>() / rs.len() as f64
    };
    let tail = &records[records.len() - w..];
    Some(MetricsSummary {
        iterations: last.iteration,
        first_mean_total: mean(&records[..w], |r| r.total),
        last_mean_total: mean(tail, |r| r.total),
        min_total: records
            .iter()
            .map(|r| r.total)
            .fold(f64::INFINITY, f64::min),
        final_lr: last.lr,
        mean_active_last: mean(tail, |r| r.n_active as f64),
    })
}
