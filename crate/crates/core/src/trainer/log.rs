//! Append-only JSON-lines training log.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::Phase;
use crate::error::{Error, Result};
use crate::metrics::MetricReport;

/// One line of the log: a training step, or an evaluation after `step` steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub phase: String,
    pub step: u64,
    pub lr: f64,
    pub losses: BTreeMap<String, f64>,
    pub wall_ms: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval: Option<BTreeMap<String, f64>>,
}

impl LogRecord {
    pub fn eval(phase: Phase, step: u64, r: &MetricReport, took: Duration) -> Self {
        let mut m = BTreeMap::from([
            ("epe".to_string(), r.epe),
            ("fl_all".to_string(), r.fl_all),
            ("frac_1px".to_string(), r.frac_1px),
            ("frac_3px".to_string(), r.frac_3px),
            ("frac_5px".to_string(), r.frac_5px),
        ]);
        for (k, v) in [("s0_10", r.s0_10), ("s10_40", r.s10_40), ("s40plus", r.s40plus)] {
            if let Some(v) = v {
                m.insert(k.to_string(), v);
            }
        }
        Self {
            phase: phase.name().into(),
            step,
            lr: 0.0,
            losses: BTreeMap::new(),
            wall_ms: took.as_secs_f64() * 1e3,
            eval: Some(m),
        }
    }

    pub fn is_eval(&self) -> bool {
        self.eval.is_some()
    }
}

pub struct LogWriter {
    path: PathBuf,
    file: File,
}

impl LogWriter {
    /// Opens `path` for appending, creating it if needed.
    pub fn append(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        Ok(Self { path, file })
    }

    pub fn write(&mut self, r: &LogRecord) -> Result<()> {
        let line = serde_json::to_string(r).map_err(|e| Error::Format(e.to_string()))?;
        writeln!(self.file, "{line}").map_err(|e| Error::io(&self.path, e))
    }
}

pub fn read_log(path: impl AsRef<Path>) -> Result<Vec<LogRecord>> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    BufReader::new(f)
        .lines()
        .filter(|l| l.as_ref().map_or(true, |l| !l.trim().is_empty()))
        .enumerate()
        .map(|(i, l)| {
            let l = l.map_err(|e| Error::io(path, e))?;
            serde_json::from_str(&l).map_err(|e| Error::Format(format!("log line {}: {e}", i + 1)))
        })
        .collect()
}
