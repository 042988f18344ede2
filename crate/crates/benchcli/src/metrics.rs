//! Stable-schema CSV metrics: fixed column order, header row, one row per
//! logged step. The wall-time column is left blank unless timing is
//! enabled, so default runs with the same seed produce identical files.

use fptt_core::learning::LossRecord;
use fptt_core::{Error, Result};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

pub const CSV_HEADER: &str =
    "phase,epoch,step,ce,div,reg,total,metric,firing_rate,retained,step_ms,diverged";

#[derive(Debug, Clone)]
pub struct MetricsRow {
    pub phase: &'static str,
    pub epoch: usize,
    pub step: usize,
    pub loss: LossRecord,
    /// Task metric: final-step MSE for regression, accuracy for
    /// classification.
    pub metric: f64,
    pub firing_rate: f64,
    pub retained: usize,
    pub step_ms: Option<f64>,
    pub diverged: bool,
}

pub struct CsvWriter {
    out: BufWriter<File>,
    last: Option<(usize, usize, &'static str)>,
}

impl CsvWriter {
    pub fn create(path: impl AsRef<Path>) -> Result<Self> {
        let mut out = BufWriter::new(File::create(path)?);
        writeln!(out, "{CSV_HEADER}")?;
        Ok(CsvWriter { out, last: None })
    }

    pub fn write(&mut self, row: &MetricsRow) -> Result<()> {
        if let Some((e, s, phase)) = self.last {
            let key = (row.epoch, row.step);
            if key < (e, s) && row.phase == phase {
                return Err(Error::usage(format!(
                    "metrics rows must be monotonically increasing, got {key:?} after ({e}, {s})"
                )));
            }
        }
        self.last = Some((row.epoch, row.step, row.phase));
        let ms = row
            .step_ms
            .map(|v| format!("{v:.4}"))
            .unwrap_or_default();
        writeln!(
            self.out,
            "{},{},{},{:.9},{:.9},{:.9},{:.9},{:.9},{:.6},{},{},{}",
            row.phase,
            row.epoch,
            row.step,
            row.loss.ce,
            row.loss.div,
            row.loss.reg,
            row.loss.total,
            row.metric,
            row.firing_rate,
            row.retained,
            ms,
            u8::from(row.diverged),
        )?;
        // logged rows are sparse; flushing keeps the file tailable
        self.out.flush()?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}
