//! The work behind each subcommand, free of argument parsing.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thrnn_core::evaluation::{
    evaluate_mean_gap, evaluate_popularity, hawkes_events, model_events, summarize, EvalConfig, EvalReport,
    EventLog,
};
use thrnn_core::hawkes::FitConfig;
use thrnn_core::pipeline::{self, CorpusStats, DatasetSplit, Session};
use thrnn_core::synthetic::generate_corpus;
use thrnn_core::train::{train_more, Trainer};
use thrnn_core::{QuadratureConfig, Thrnn, SECONDS_PER_DAY};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::ingest::{self, Dataset};
use crate::report::{write_plot_csv, write_reports, EpochLine, ReportLine};
use crate::split_file::{load_split, save_split};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessSummary {
    pub rows: usize,
    pub malformed: usize,
    pub stats: CorpusStats,
}

/// Reads a raw log (or generates the configured synthetic corpus) and writes
/// the split.
pub fn preprocess(dataset: Dataset, input: Option<&Path>, out: &Path, cfg: &RunConfig) -> Result<PreprocessSummary> {
    let (split, rows, malformed, max_len) = match dataset {
        Dataset::Synthetic => {
            let split = generate_corpus(&cfg.synth.to_spec()?, cfg.seed)?;
            let rows = split.num_sessions();
            (split, rows, 0, cfg.synth.max_session_len)
        }
        _ => {
            let input = input.context("this dataset needs an input file")?;
            let raw = ingest::read_log(dataset, input)?;
            let split = pipeline::preprocess(&raw.interactions, &cfg.pipeline)?;
            (split, raw.rows, raw.malformed, cfg.pipeline.max_session_len)
        }
    };
    save_split(out, &split, max_len)?;
    Ok(PreprocessSummary {
        rows,
        malformed,
        stats: CorpusStats::of(&split),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedCheckpoint {
    pub path: PathBuf,
    pub alpha_exp: f64,
    pub epochs_done: usize,
    pub sha256: String,
}

/// `model.ckpt` → `model.alpha0.3.ckpt`.
pub fn sweep_path(out: &Path, alpha: f64) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let name = match out.extension() {
        Some(ext) => format!("{stem}.alpha{alpha}.{}", ext.to_string_lossy()),
        None => format!("{stem}.alpha{alpha}"),
    };
    out.with_file_name(name)
}

fn check_vocabulary(ck: &Checkpoint, split: &DatasetSplit) -> Result<()> {
    ensure!(
        ck.item_ids == split.item_ids && ck.user_ids == split.user_ids,
        "checkpoint vocabulary ({} items, {} users) does not match the split ({} items, {} users)",
        ck.item_ids.len(),
        ck.user_ids.len(),
        split.num_items(),
        split.num_users()
    );
    Ok(())
}

fn run_training(
    mut trainer: Trainer,
    split: &DatasetSplit,
    epochs: usize,
    validation: Option<&EvalConfig>,
    out: &Path,
    log: &mut dyn Write,
) -> Result<TrainedCheckpoint> {
    let alpha = trainer.model().config().alpha_exp;
    for _ in 0..epochs {
        let report = train_more(&mut trainer, split, 1, validation)?.remove(0);
        serde_json::to_writer(&mut *log, &EpochLine::new(&report, alpha))?;
        writeln!(log)?;
    }
    let epochs_done = trainer.epochs_done();
    let seed = trainer.seed();
    let (model, adam) = trainer.into_parts();
    let ck = Checkpoint {
        model,
        adam: Some(adam),
        epochs_done,
        seed,
        item_ids: split.item_ids.clone(),
        user_ids: split.user_ids.clone(),
    };
    let sha256 = ck.save(out)?;
    Ok(TrainedCheckpoint {
        path: out.to_path_buf(),
        alpha_exp: alpha,
        epochs_done,
        sha256,
    })
}

/// Trains one model per exponent (or the configured exponent when `alphas`
/// is `None`); one checkpoint each.
pub fn train(
    split_path: &Path,
    cfg: &RunConfig,
    out: &Path,
    alphas: Option<&[f64]>,
    log: &mut dyn Write,
) -> Result<Vec<TrainedCheckpoint>> {
    let (split, _) = load_split(split_path)?;
    let validation = cfg.validate_each_epoch.then_some(&cfg.evaluation);
    let runs: Vec<(f64, PathBuf)> = match alphas {
        None => vec![(cfg.model.alpha_exp, out.to_path_buf())],
        Some(list) => list.iter().map(|&a| (a, sweep_path(out, a))).collect(),
    };
    let mut done = Vec::with_capacity(runs.len());
    for (alpha, path) in runs {
        let mut model_cfg = cfg.model.clone();
        model_cfg.alpha_exp = alpha;
        model_cfg.validate()?;
        let model = Thrnn::new(model_cfg, split.num_items(), split.num_users(), cfg.seed)?;
        let trainer = Trainer::new(model, cfg.seed)?;
        done.push(
            run_training(trainer, &split, cfg.epochs, validation, &path, log)
                .with_context(|| format!("training with alpha_exp {alpha}"))?,
        );
    }
    Ok(done)
}

/// Continues a checkpoint for `epochs` more epochs; the model configuration
/// and seed come from the checkpoint.
pub fn resume(
    split_path: &Path,
    from: &Path,
    epochs: usize,
    validation: Option<&EvalConfig>,
    out: &Path,
    log: &mut dyn Write,
) -> Result<TrainedCheckpoint> {
    let (split, _) = load_split(split_path)?;
    let ck = Checkpoint::load(from)?;
    check_vocabulary(&ck, &split)?;
    let adam = ck.adam.context("checkpoint has no optimizer state to resume from")?;
    let trainer = Trainer::resume(ck.model, adam, ck.epochs_done, ck.seed)?;
    run_training(trainer, &split, epochs, validation, out, log)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum Baseline {
    HawkesShort,
    HawkesLong,
    MeanGap,
    Popularity,
}

impl Baseline {
    pub const ALL: [Baseline; 4] = [Baseline::HawkesShort, Baseline::HawkesLong, Baseline::MeanGap, Baseline::Popularity];

    pub fn name(self) -> &'static str {
        match self {
            Baseline::HawkesShort => "hawkes_short",
            Baseline::HawkesLong => "hawkes_long",
            Baseline::MeanGap => "mean_gap",
            Baseline::Popularity => "popularity",
        }
    }
}

fn users(split: &DatasetSplit) -> std::ops::Range<usize> {
    0..split.train.len().min(split.test.len())
}

/// Model report with users evaluated in parallel and merged in user order.
pub fn evaluate_model_parallel(model: &Thrnn, split: &DatasetSplit, cfg: &EvalConfig, name: &str) -> Result<EvalReport> {
    cfg.validate()?;
    let logs: Vec<EventLog> = users(split)
        .into_par_iter()
        .map(|u| model_events(model, split, u, cfg))
        .collect::<thrnn_core::Result<_>>()?;
    merged(logs, name, cfg)
}

/// Hawkes report with per-user fits run in parallel.
pub fn evaluate_hawkes_parallel(split: &DatasetSplit, fit_cfg: &FitConfig, cfg: &EvalConfig, name: &str) -> Result<EvalReport> {
    cfg.validate()?;
    fit_cfg.validate()?;
    let logs: Vec<EventLog> = users(split)
        .into_par_iter()
        .map(|u| hawkes_events(split, u, fit_cfg, cfg).map(|(_, log)| log))
        .collect::<thrnn_core::Result<_>>()?;
    merged(logs, name, cfg)
}

fn merged(logs: Vec<EventLog>, name: &str, cfg: &EvalConfig) -> Result<EvalReport> {
    let mut all = EventLog::default();
    for log in logs {
        all.merge(log);
    }
    Ok(all.into_report(name, cfg)?)
}

/// Model name in reports: `hrnn` for the ablation, `thrnn` otherwise.
pub fn model_name(model: &Thrnn) -> &'static str {
    let c = model.config();
    if c.loss_weight_time == 0.0 && !c.use_context {
        "hrnn"
    } else {
        "thrnn"
    }
}

/// Reports for every checkpoint and baseline, plus per-model summaries when
/// a model has several checkpoints (seeds).
pub fn evaluate(
    checkpoints: &[PathBuf],
    split_path: &Path,
    cfg: &RunConfig,
    baselines: &[Baseline],
    report_out: &Path,
    plot_out: Option<&Path>,
) -> Result<Vec<ReportLine>> {
    let (split, _) = load_split(split_path)?;
    let ev = &cfg.evaluation;
    let mut lines = Vec::new();
    let mut by_model: BTreeMap<&str, Vec<EvalReport>> = BTreeMap::new();
    for path in checkpoints {
        let ck = Checkpoint::load(path)?;
        check_vocabulary(&ck, &split).with_context(|| format!("evaluating {}", path.display()))?;
        ensure!(
            ck.model.config().time_unit == ev.time_unit,
            "{}: model time unit differs from the evaluation time unit",
            path.display()
        );
        let name = model_name(&ck.model);
        let report = evaluate_model_parallel(&ck.model, &split, ev, name)?;
        by_model.entry(name).or_default().push(report.clone());
        lines.push(ReportLine::Report {
            source: path.display().to_string(),
            report,
        });
    }
    let mut unique = baselines.to_vec();
    unique.sort();
    unique.dedup();
    for b in unique {
        let report = match b {
            Baseline::HawkesShort => evaluate_hawkes_parallel(&split, &cfg.hawkes_short, ev, b.name())?,
            Baseline::HawkesLong => evaluate_hawkes_parallel(&split, &cfg.hawkes_long, ev, b.name())?,
            Baseline::MeanGap => evaluate_mean_gap(&split, ev)?,
            Baseline::Popularity => evaluate_popularity(&split, ev)?,
        };
        lines.push(ReportLine::Report {
            source: "baseline".into(),
            report,
        });
    }
    for reports in by_model.values().filter(|r| r.len() > 1) {
        lines.push(ReportLine::Summary {
            summary: summarize(reports)?,
        });
    }
    let file = std::fs::File::create(report_out).with_context(|| format!("creating {}", report_out.display()))?;
    let mut w = std::io::BufWriter::new(file);
    write_reports(&mut w, &lines)?;
    w.flush()?;
    if let Some(plot) = plot_out {
        let reports: Vec<&EvalReport> = lines
            .iter()
            .filter_map(|l| match l {
                ReportLine::Report { report, .. } if !report.mae_by_bucket.is_empty() => Some(report),
                _ => None,
            })
            .collect();
        let file = std::fs::File::create(plot).with_context(|| format!("creating {}", plot.display()))?;
        write_plot_csv(std::io::BufWriter::new(file), &reports)?;
    }
    Ok(lines)
}

/// A user's observed sessions in raw ids, oldest first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HistoryFile {
    pub user: String,
    pub sessions: Vec<HistorySession>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HistorySession {
    pub items: Vec<String>,
    /// Seconds since the epoch.
    pub start_time: i64,
    pub end_time: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub user: String,
    pub k: usize,
    pub items: Vec<String>,
    pub return_time_seconds: f64,
    pub return_time_days: f64,
}

pub fn predict(ck: &Checkpoint, history: &HistoryFile, k: usize, q: &QuadratureConfig) -> Result<PredictionRecord> {
    ensure!(k > 0, "k must be positive");
    let user = ck
        .user_ids
        .iter()
        .position(|u| *u == history.user)
        .with_context(|| format!("unknown user {:?}", history.user))?;
    let index: BTreeMap<&str, usize> = ck.item_ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let unknown: Vec<&str> = history
        .sessions
        .iter()
        .flat_map(|s| &s.items)
        .map(String::as_str)
        .filter(|i| !index.contains_key(i))
        .collect();
    if !unknown.is_empty() {
        bail!("unknown items in history: {}", unknown.join(", "));
    }
    let mut sessions: Vec<Session> = history
        .sessions
        .iter()
        .map(|s| Session {
            items: s.items.iter().map(|i| index[i.as_str()]).collect(),
            start_time: s.start_time,
            end_time: s.end_time,
            gap_before: 0,
            gap_masked: false,
        })
        .collect();
    for (i, s) in sessions.iter().enumerate() {
        ensure!(!s.items.is_empty(), "session {i} has no items");
        ensure!(s.end_time >= s.start_time, "session {i} ends before it starts");
        if i > 0 {
            ensure!(s.start_time >= sessions[i - 1].end_time, "sessions overlap or are out of order at {i}");
        }
    }
    pipeline::assign_gaps(&mut sessions);
    let p = ck.model.predict(user, &sessions, k, q)?;
    Ok(PredictionRecord {
        user: history.user.clone(),
        k,
        items: p.top_items.iter().map(|&i| ck.item_ids[i].clone()).collect(),
        return_time_seconds: p.return_time_seconds,
        return_time_days: p.return_time_seconds / SECONDS_PER_DAY,
    })
}

pub fn load_history(path: &Path) -> Result<HistoryFile> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sweep_paths() {
        assert_eq!(sweep_path(Path::new("out/m.ckpt"), 0.3), Path::new("out/m.alpha0.3.ckpt"));
        assert_eq!(sweep_path(Path::new("m"), 1.0), Path::new("m.alpha1"));
    }

    #[test]
    fn baseline_names() {
        let names: Vec<&str> = Baseline::ALL.iter().map(|b| b.name()).collect();
        assert_eq!(names, ["hawkes_short", "hawkes_long", "mean_gap", "popularity"]);
    }
}
