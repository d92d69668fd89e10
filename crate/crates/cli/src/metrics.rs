//! Per-round metrics CSV. Files open with `#` provenance comments, then the
//! fixed header row; readers refuse any other header.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use fedvi_core::federation::RoundReport;

use crate::error::CliError;

pub const METRICS_HEADER: &str = "round,loss,part_acc,nonpart_acc,kl_mean,timestamp";

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub round: usize,
    pub loss: f64,
    pub part_acc: Option<f64>,
    pub nonpart_acc: Option<f64>,
    pub kl_mean: f64,
    /// Cumulative client steps, or seconds since the run started.
    pub timestamp: f64,
}

/// Rows for the evaluated rounds of a run.
pub fn rows_from_reports(reports: &[RoundReport], eval_every: usize, wall_clock: bool) -> Vec<MetricsRow> {
    let last = reports.len();
    let mut elapsed = 0.0;
    let mut rows = Vec::new();
    for r in reports {
        elapsed += r.duration.as_secs_f64();
        if (r.round + 1) % eval_every != 0 && r.round + 1 != last {
            continue;
        }
        rows.push(MetricsRow {
            round: r.round,
            loss: r.mean_loss,
            part_acc: r.part_acc,
            nonpart_acc: r.nonpart_acc,
            kl_mean: r.mean_kl,
            timestamp: if wall_clock { elapsed } else { r.client_steps as f64 },
        });
    }
    rows
}

fn opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

pub struct MetricsWriter {
    w: BufWriter<File>,
}

impl MetricsWriter {
    pub fn create(path: &Path, comments: &[String]) -> Result<Self, CliError> {
        let file = File::create(path).map_err(|e| CliError::io(format!("creating {}", path.display()), e))?;
        let mut me = Self { w: BufWriter::new(file) };
        for c in comments {
            me.line(&format!("# {c}"))?;
        }
        me.line(METRICS_HEADER)?;
        Ok(me)
    }

    fn line(&mut self, s: &str) -> Result<(), CliError> {
        writeln!(self.w, "{s}").map_err(|e| CliError::io("writing metrics", e))
    }

    pub fn append(&mut self, r: &MetricsRow) -> Result<(), CliError> {
        let s = format!(
            "{},{},{},{},{},{}",
            r.round,
            r.loss,
            opt(r.part_acc),
            opt(r.nonpart_acc),
            r.kl_mean,
            r.timestamp
        );
        self.line(&s)
    }

    pub fn finish(mut self) -> Result<(), CliError> {
        self.w.flush().map_err(|e| CliError::io("writing metrics", e))
    }
}

fn field<T: std::str::FromStr>(s: &str, name: &str, line: usize) -> Result<T, CliError> {
    s.parse()
        .map_err(|_| CliError::Format(format!("metrics line {line}: bad {name} `{s}`")))
}

fn opt_field(s: &str, name: &str, line: usize) -> Result<Option<f64>, CliError> {
    if s.is_empty() {
        Ok(None)
    } else {
        field(s, name, line).map(Some)
    }
}

/// Reads a metrics file, returning its comment lines and rows.
pub fn read_metrics(path: &Path) -> Result<(Vec<String>, Vec<MetricsRow>), CliError> {
    let file = File::open(path).map_err(|e| CliError::io(format!("opening {}", path.display()), e))?;
    let mut comments = Vec::new();
    let mut rows = Vec::new();
    let mut header = false;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| CliError::io("reading metrics", e))?;
        let n = i + 1;
        if !header {
            if let Some(c) = line.strip_prefix('#') {
                comments.push(c.trim_start().to_string());
                continue;
            }
            if line != METRICS_HEADER {
                return Err(CliError::Format(format!("unknown metrics schema `{line}`")));
            }
            header = true;
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            return Err(CliError::Format(format!("metrics line {n}: expected 6 fields, got {}", f.len())));
        }
        rows.push(MetricsRow {
            round: field(f[0], "round", n)?,
            loss: field(f[1], "loss", n)?,
            part_acc: opt_field(f[2], "part_acc", n)?,
            nonpart_acc: opt_field(f[3], "nonpart_acc", n)?,
            kl_mean: field(f[4], "kl_mean", n)?,
            timestamp: field(f[5], "timestamp", n)?,
        });
    }
    if !header {
        return Err(CliError::Format("metrics file has no header row".into()));
    }
    Ok((comments, rows))
}
