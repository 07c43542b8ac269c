//! JSONL metrics stream: one `{step, wall_time, kind, values}` object per line.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{CoevoError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub wall_time: Option<f64>,
    pub kind: String,
    pub values: BTreeMap<String, f64>,
}

impl MetricsRecord {
    pub fn new(step: u64, kind: impl Into<String>) -> Self {
        MetricsRecord {
            step,
            wall_time: None,
            kind: kind.into(),
            values: BTreeMap::new(),
        }
    }

    pub fn with(mut self, name: &str, value: f64) -> Self {
        self.values.insert(name.to_string(), value);
        self
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.values.get(name).copied()
    }
}

pub trait MetricsSink {
    fn record(&mut self, record: MetricsRecord) -> Result<()>;
}

impl MetricsSink for Vec<MetricsRecord> {
    fn record(&mut self, record: MetricsRecord) -> Result<()> {
        self.push(record);
        Ok(())
    }
}

/// Append-only writer; each row is flushed as written.
pub struct MetricsWriter {
    path: PathBuf,
    out: BufWriter<File>,
    started: Instant,
    wall_time: bool,
    last_step: u64,
}

impl MetricsWriter {
    /// Creates (truncating) the file.
    pub fn create(path: &Path, wall_time: bool) -> Result<Self> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| CoevoError::io(dir, e))?;
        }
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .truncate(true)
            .open(path)
            .map_err(|e| CoevoError::io(path, e))?;
        Ok(MetricsWriter {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
            started: Instant::now(),
            wall_time,
            last_step: 0,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

impl MetricsSink for MetricsWriter {
    fn record(&mut self, mut record: MetricsRecord) -> Result<()> {
        if record.step < self.last_step {
            return Err(CoevoError::invalid(format!(
                "metrics step {} after {}",
                record.step, self.last_step
            )));
        }
        self.last_step = record.step;
        record.wall_time = self.wall_time.then(|| self.started.elapsed().as_secs_f64());
        let line = serde_json::to_string(&record)?;
        let io = |e| CoevoError::io(&self.path, e);
        writeln!(self.out, "{line}").map_err(io)?;
        self.out.flush().map_err(|e| CoevoError::io(&self.path, e))
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let file = File::open(path).map_err(|e| CoevoError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| CoevoError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: MetricsRecord = serde_json::from_str(&line).map_err(|e| {
            CoevoError::invalid(format!("{}:{}: {e}", path.display(), i + 1))
        })?;
        out.push(rec);
    }
    Ok(out)
}
