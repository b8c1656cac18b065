//! Per-iteration loss records and their CSV export.

use crate::Result;
use serde::{Deserialize, Serialize};
use std::path::Path;
use std::time::Instant;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub epoch: usize,
    pub step: u64,
    pub name: String,
    pub value: f32,
    pub wall_ms: f64,
}

/// Append-only record of named loss components per training iteration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossTrace {
    pub rows: Vec<TraceRow>,
    #[serde(skip, default = "Instant::now")]
    start: Instant,
}

impl Default for LossTrace {
    fn default() -> Self {
        Self::new()
    }
}

impl LossTrace {
    pub fn new() -> Self {
        Self {
            rows: Vec::new(),
            start: Instant::now(),
        }
    }

    pub fn from_rows(rows: Vec<TraceRow>) -> Self {
        Self {
            rows,
            start: Instant::now(),
        }
    }

    pub fn push(&mut self, epoch: usize, step: u64, name: &str, value: f32) {
        self.rows.push(TraceRow {
            epoch,
            step,
            name: name.to_string(),
            value,
            wall_ms: self.start.elapsed().as_secs_f64() * 1e3,
        });
    }

    pub fn values_named<'a>(&'a self, name: &'a str) -> impl Iterator<Item = &'a TraceRow> {
        self.rows.iter().filter(move |r| r.name == name)
    }

    /// Equality on everything except wall time, which is the determinism
    /// contract for repeated runs.
    pub fn same_values(&self, other: &LossTrace) -> bool {
        self.rows.len() == other.rows.len()
            && self.rows.iter().zip(&other.rows).all(|(a, b)| {
                a.epoch == b.epoch && a.step == b.step && a.name == b.name && a.value == b.value
            })
    }

    /// `epoch,step,name,value,wall_ms` CSV.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path.as_ref()).map_err(csv_err)?;
        w.write_record(["epoch", "step", "name", "value", "wall_ms"])
            .map_err(csv_err)?;
        for r in &self.rows {
            w.write_record([
                r.epoch.to_string(),
                r.step.to_string(),
                r.name.clone(),
                format!("{}", r.value),
                format!("{:.3}", r.wall_ms),
            ])
            .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> crate::PipelineError {
    crate::PipelineError::Io(std::io::Error::other(e))
}
