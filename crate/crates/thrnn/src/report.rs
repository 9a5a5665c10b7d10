//! Line-delimited report, training-log and plot formats.
//!
//! Reports: a header line
//! `{"format":"thrnn-report","version":1,"note":"..."}` followed by
//! `{"kind":"report","source":...,"report":EvalReport}` lines and, when a
//! model was evaluated over several checkpoints,
//! `{"kind":"summary","summary":SeedSummary}` lines.
//!
//! Training logs: one `EpochLine` per epoch.
//!
//! Plot data: CSV with columns `model,bucket_lo_days,bucket_hi_days,mae_days,count`,
//! one row per MAE bucket, empty `mae_days` for empty buckets.

use std::io::Write;

use anyhow::Result;
use serde::{Deserialize, Serialize};
use thrnn_core::evaluation::{EvalReport, SeedSummary};
use thrnn_core::train::EpochReport;

pub const REPORT_FORMAT: &str = "thrnn-report";
pub const REPORT_VERSION: u32 = 1;
pub const SUMMARY_NOTE: &str = "summary values are mean ± population standard deviation over seeds";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportHeader {
    pub format: String,
    pub version: u32,
    pub note: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ReportLine {
    Report {
        /// Checkpoint path, or `baseline`.
        source: String,
        report: EvalReport,
    },
    Summary {
        summary: SeedSummary,
    },
}

pub fn write_reports(mut out: impl Write, lines: &[ReportLine]) -> Result<()> {
    let header = ReportHeader {
        format: REPORT_FORMAT.into(),
        version: REPORT_VERSION,
        note: SUMMARY_NOTE.into(),
    };
    serde_json::to_writer(&mut out, &header)?;
    writeln!(out)?;
    for line in lines {
        serde_json::to_writer(&mut out, line)?;
        writeln!(out)?;
    }
    Ok(())
}

/// One machine-readable training-log record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLine {
    pub epoch: usize,
    pub alpha_exp: f64,
    pub train_loss: f64,
    pub rec_loss: f64,
    pub time_loss: f64,
    pub val_recall_at_5: Option<f64>,
    pub val_mae_days: Option<f64>,
    pub skipped_arrays: usize,
    pub clipped_steps: usize,
}

impl EpochLine {
    pub fn new(r: &EpochReport, alpha_exp: f64) -> Self {
        let val = r.validation.as_ref();
        EpochLine {
            epoch: r.epoch,
            alpha_exp,
            train_loss: r.train_loss,
            rec_loss: r.rec_loss,
            time_loss: r.time_loss,
            val_recall_at_5: val.and_then(|v| v.recall.get(&5).copied()),
            val_mae_days: val.and_then(|v| v.overall_mae_days),
            skipped_arrays: r.skipped_arrays,
            clipped_steps: r.clipped_steps,
        }
    }
}

pub fn write_plot_csv(out: impl Write, reports: &[&EvalReport]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["model", "bucket_lo_days", "bucket_hi_days", "mae_days", "count"])?;
    for r in reports {
        for b in &r.mae_by_bucket {
            w.write_record([
                r.model.clone(),
                b.lo_days.to_string(),
                b.hi_days.to_string(),
                b.mae_days.map(|m| m.to_string()).unwrap_or_default(),
                b.count.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}
