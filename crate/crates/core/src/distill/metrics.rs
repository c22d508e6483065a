use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One training-metrics record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub stage: String,
    pub step: usize,
    /// Mean total loss since the previous record.
    pub loss: f64,
    /// Mean per-exit loss since the previous record; `None` for exits
    /// without a loss term.
    pub exit_loss: Vec<Option<f64>>,
    /// Per-exit accuracy on the evaluation set, when one was given.
    pub exit_accuracy: Option<Vec<f64>>,
    pub learning_rate: f64,
}

/// Metric records kept in memory and optionally appended to a JSON-lines
/// file.
#[derive(Debug, Default)]
pub struct MetricsLog {
    records: Vec<MetricRecord>,
    sink: Option<(BufWriter<File>, std::path::PathBuf)>,
}

impl MetricsLog {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn append_to(path: &Path) -> Result<Self> {
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(MetricsLog {
            records: Vec::new(),
            sink: Some((BufWriter::new(file), path.to_path_buf())),
        })
    }

    pub fn record(&mut self, r: MetricRecord) -> Result<()> {
        if let Some((w, path)) = &mut self.sink {
            let line = serde_json::to_string(&r)?;
            writeln!(w, "{line}")
                .and_then(|_| w.flush())
                .map_err(|e| Error::io(path.as_path(), e))?;
        }
        self.records.push(r);
        Ok(())
    }

    pub fn records(&self) -> &[MetricRecord] {
        &self.records
    }
}
