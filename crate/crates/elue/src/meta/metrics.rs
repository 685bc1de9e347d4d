//! Line-delimited metric records.
//!
//! One JSON object per line, flushed per record so interrupted runs stay
//! analyzable. Field order is fixed by the struct, which keeps repeated runs
//! byte-identical.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::Result;

#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
pub struct Losses {
    pub embed: Option<f64>,
    pub actor: Option<f64>,
    pub q: Option<f64>,
    pub v: Option<f64>,
}

/// One evaluation or training event.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct MetricRecord {
    pub run_id: String,
    pub phase: String,
    pub iteration: u64,
    pub env_steps: u64,
    /// -1 for records that aggregate over tasks.
    pub task_id: i64,
    /// 1-based episode index; -1 for loss records.
    pub episode_index: i64,
    #[serde(rename = "return")]
    pub episode_return: Option<f64>,
    pub losses: Losses,
    pub belief_std_mean: Option<f64>,
    pub seed: u64,
}

pub trait MetricsSink {
    fn emit(&mut self, record: &MetricRecord) -> Result<()>;
}

/// Appends records to a file, one JSON line each, flushing every record.
pub struct FileSink {
    writer: BufWriter<File>,
}

impl FileSink {
    pub fn create(path: &Path) -> Result<Self> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        Ok(FileSink {
            writer: BufWriter::new(File::create(path)?),
        })
    }
}

impl MetricsSink for FileSink {
    fn emit(&mut self, record: &MetricRecord) -> Result<()> {
        let line = serde_json::to_string(record)
            .map_err(|e| crate::Error::InvalidArgument(format!("metrics encode: {e}")))?;
        self.writer.write_all(line.as_bytes())?;
        self.writer.write_all(b"\n")?;
        self.writer.flush()?;
        Ok(())
    }
}

/// Collects records in memory; used by tests and by `evaluate`.
#[derive(Default)]
pub struct VecSink {
    pub records: Vec<MetricRecord>,
}

impl MetricsSink for VecSink {
    fn emit(&mut self, record: &MetricRecord) -> Result<()> {
        self.records.push(record.clone());
        Ok(())
    }
}

/// Discards everything.
pub struct NullSink;

impl MetricsSink for NullSink {
    fn emit(&mut self, _record: &MetricRecord) -> Result<()> {
        Ok(())
    }
}

/// Fan out to two sinks.
pub struct TeeSink<'a, A: MetricsSink + ?Sized, B: MetricsSink + ?Sized> {
    pub a: &'a mut A,
    pub b: &'a mut B,
}

impl<A: MetricsSink + ?Sized, B: MetricsSink + ?Sized> MetricsSink for TeeSink<'_, A, B> {
    fn emit(&mut self, record: &MetricRecord) -> Result<()> {
        self.a.emit(record)?;
        self.b.emit(record)
    }
}
