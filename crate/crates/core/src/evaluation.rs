//! Evaluation harness shared by the model and the baselines.
//!
//! Every predictor walks each user's training sessions as context and then
//! the test sessions in order, teacher-forced: each test session is scored
//! and then appended to the context of the next. A test session yields one
//! ranking event per within-session transition and one gap event unless its
//! gap is masked.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::hawkes::{self, FitConfig, HawkesFit};
use crate::math;
use crate::metrics::{self, MaeBucket};
use crate::model::{SessionRep, Thrnn};
use crate::pipeline::{DatasetSplit, Session};
use crate::point_process::QuadratureConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub ks: Vec<usize>,
    pub quadrature: QuadratureConfig,
    /// MAE bucket edges in days.
    pub bucket_edges_days: Vec<f64>,
    /// Seconds per model time unit, for the Hawkes baselines.
    pub time_unit: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        let quadrature = QuadratureConfig::default();
        EvalConfig {
            ks: alloc::vec![5, 10, 20],
            bucket_edges_days: metrics::day_edges(quadrature.cutoff as usize),
            quadrature,
            time_unit: crate::SECONDS_PER_DAY,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ks.is_empty() || self.ks.contains(&0) {
            return Err(invalid("evaluation needs positive k values"));
        }
        if !(self.time_unit > 0.0) {
            return Err(invalid("time_unit must be positive"));
        }
        self.quadrature.validate()
    }
}

/// Raw per-event outcomes, merged across users before reporting.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EventLog {
    pub ranks: Vec<usize>,
    pub gap_predictions_s: Vec<f64>,
    pub gap_targets_s: Vec<f64>,
}

impl EventLog {
    pub fn merge(&mut self, other: EventLog) {
        self.ranks.extend(other.ranks);
        self.gap_predictions_s.extend(other.gap_predictions_s);
        self.gap_targets_s.extend(other.gap_targets_s);
    }

    fn push_gap(&mut self, prediction_s: f64, target_s: f64) {
        self.gap_predictions_s.push(prediction_s);
        self.gap_targets_s.push(target_s);
    }

    pub fn into_report(self, model: &str, cfg: &EvalConfig) -> Result<EvalReport> {
        let mut recall = BTreeMap::new();
        let mut mrr = BTreeMap::new();
        if !self.ranks.is_empty() {
            for &k in &cfg.ks {
                recall.insert(k, metrics::recall_at_k(&self.ranks, k)?);
                mrr.insert(k, metrics::mrr_at_k(&self.ranks, k)?);
            }
        }
        let (mae_by_bucket, overall_mae_days) = if self.gap_targets_s.is_empty() {
            (Vec::new(), None)
        } else {
            metrics::mae_by_bucket(&self.gap_predictions_s, &self.gap_targets_s, &cfg.bucket_edges_days)?
        };
        Ok(EvalReport {
            model: model.into(),
            recall,
            mrr,
            mae_by_bucket,
            overall_mae_days,
            rank_events: self.ranks.len(),
            gap_events: self.gap_targets_s.len(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    /// Empty for predictors that do not rank items.
    pub recall: BTreeMap<usize, f64>,
    pub mrr: BTreeMap<usize, f64>,
    /// Empty for predictors that do not predict gaps.
    pub mae_by_bucket: Vec<MaeBucket>,
    pub overall_mae_days: Option<f64>,
    pub rank_events: usize,
    pub gap_events: usize,
}

/// Ranks of the within-session targets given one score vector per step.
fn push_ranks(log: &mut EventLog, scores: &[Vec<f64>], session: &Session) -> Result<()> {
    for (s, &target) in scores.iter().zip(&session.items[1..]) {
        log.ranks.push(metrics::rank_of_target(s, target)?);
    }
    Ok(())
}

fn check_user(split: &DatasetSplit, user: usize) -> Result<()> {
    if user >= split.train.len() || user >= split.test.len() {
        return Err(Error::IndexOutOfRange {
            what: "user",
            index: user,
            len: split.train.len().min(split.test.len()),
        });
    }
    Ok(())
}

/// Events of one user (position in `split.train`) under the model.
pub fn model_events(model: &Thrnn, split: &DatasetSplit, user: usize, cfg: &EvalConfig) -> Result<EventLog> {
    check_user(split, user)?;
    let id = split.train[user].user_index;
    let max_reps = model.config().max_session_reps;
    let mut reps: Vec<SessionRep> = Vec::new();
    let remember = |reps: &mut Vec<SessionRep>, rep| {
        reps.push(rep);
        if reps.len() > max_reps {
            reps.remove(0);
        }
    };
    for s in &split.train[user].sessions {
        let rep = model.observe(id, &reps, s)?.rep;
        remember(&mut reps, rep);
    }
    let mut log = EventLog::default();
    for s in &split.test[user].sessions {
        let out = model.observe(id, &reps, s)?;
        if !s.gap_masked && !reps.is_empty() {
            let pred = model.expected_return_seconds(&out.inter_state, &cfg.quadrature)?;
            log.push_gap(pred, s.gap_before as f64);
        }
        push_ranks(&mut log, &out.item_scores, s)?;
        remember(&mut reps, out.rep);
    }
    Ok(log)
}

pub fn evaluate_model(model: &Thrnn, split: &DatasetSplit, cfg: &EvalConfig, name: &str) -> Result<EvalReport> {
    cfg.validate()?;
    let mut log = EventLog::default();
    for u in 0..split.train.len().min(split.test.len()) {
        log.merge(model_events(model, split, u, cfg)?);
    }
    log.into_report(name, cfg)
}

/// Training-set item frequencies.
pub fn popularity_scores(split: &DatasetSplit) -> Vec<f64> {
    let mut counts = alloc::vec![0.0; split.num_items()];
    for s in split.train.iter().flat_map(|u| &u.sessions) {
        for &i in &s.items {
            if let Some(c) = counts.get_mut(i) {
                *c += 1.0;
            }
        }
    }
    counts
}

pub fn evaluate_popularity(split: &DatasetSplit, cfg: &EvalConfig) -> Result<EvalReport> {
    cfg.validate()?;
    let scores = popularity_scores(split);
    let mut log = EventLog::default();
    for s in split.test.iter().flat_map(|u| &u.sessions) {
        let per_step = alloc::vec![scores.clone(); s.items.len().saturating_sub(1)];
        push_ranks(&mut log, &per_step, s)?;
    }
    log.into_report("popularity", cfg)
}

/// Gaps that count as observed: not masked and not a user's first session.
fn observed_gaps(sessions: &[Session]) -> impl Iterator<Item = f64> + '_ {
    sessions
        .iter()
        .enumerate()
        .filter(|(i, s)| *i > 0 && !s.gap_masked)
        .map(|(_, s)| s.gap_before as f64)
}

/// Mean observed training gap in seconds over all users.
pub fn global_mean_gap(split: &DatasetSplit) -> Result<f64> {
    let mut gaps: Vec<f64> = split.train.iter().flat_map(|u| observed_gaps(&u.sessions)).collect();
    if gaps.is_empty() {
        return Err(Error::Empty("no observed training gaps"));
    }
    gaps.sort_by(f64::total_cmp);
    Ok(gaps.iter().sum::<f64>() / gaps.len() as f64)
}

/// Gap events of the test sessions with their targets, in order.
fn test_gap_targets(split: &DatasetSplit, user: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
    split.test[user]
        .sessions
        .iter()
        .enumerate()
        .filter(|(_, s)| !s.gap_masked)
        .map(|(i, s)| (i, s.gap_before as f64))
}

pub fn evaluate_mean_gap(split: &DatasetSplit, cfg: &EvalConfig) -> Result<EvalReport> {
    cfg.validate()?;
    let mean = global_mean_gap(split)?;
    let mut log = EventLog::default();
    for u in 0..split.train.len().min(split.test.len()) {
        for (_, target) in test_gap_targets(split, u) {
            log.push_gap(mean, target);
        }
    }
    log.into_report("mean_gap", cfg)
}

/// Per-user Hawkes fit on the training timeline, in model time units.
pub fn fit_user_hawkes(split: &DatasetSplit, user: usize, fit_cfg: &FitConfig, cfg: &EvalConfig) -> Result<HawkesFit> {
    check_user(split, user)?;
    let sessions = &split.train[user].sessions;
    let events = hawkes::timeline(sessions.iter().map(|s| (s.gap_before as f64 / cfg.time_unit, s.gap_masked)));
    let gaps: Vec<f64> = observed_gaps(sessions).collect();
    let mean_s = if gaps.is_empty() {
        global_mean_gap(split)?
    } else {
        gaps.iter().sum::<f64>() / gaps.len() as f64
    };
    hawkes::fit(&events, fit_cfg, cfg.time_unit / mean_s)
}

/// Gap events of one user under a Hawkes process fitted to its training
/// sessions. Test events extend the history as they are observed; the
/// prediction conditions on the same window the fit used.
pub fn hawkes_events(split: &DatasetSplit, user: usize, fit_cfg: &FitConfig, cfg: &EvalConfig) -> Result<(HawkesFit, EventLog)> {
    let fit = fit_user_hawkes(split, user, fit_cfg, cfg)?;
    let mut events = hawkes::timeline(
        split.train[user]
            .sessions
            .iter()
            .map(|s| (s.gap_before as f64 / cfg.time_unit, s.gap_masked)),
    );
    let mut log = EventLog::default();
    for (_, target) in test_gap_targets(split, user) {
        let context = fit_cfg.select(&events);
        let pred = hawkes::hawkes_predict_next(context, &fit.params, &cfg.quadrature)?;
        log.push_gap(pred * cfg.time_unit, target);
        let last = events.last().copied().unwrap_or(0.0);
        events.push(last + target / cfg.time_unit);
    }
    Ok((fit, log))
}

pub fn evaluate_hawkes(split: &DatasetSplit, fit_cfg: &FitConfig, cfg: &EvalConfig, name: &str) -> Result<EvalReport> {
    cfg.validate()?;
    fit_cfg.validate()?;
    let mut log = EventLog::default();
    for u in 0..split.train.len().min(split.test.len()) {
        log.merge(hawkes_events(split, u, fit_cfg, cfg)?.1);
    }
    log.into_report(name, cfg)
}

/// Mean and population standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Empty("no values to summarize"));
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Ok(MeanStd {
            mean,
            std: math::sqrt(var),
        })
    }
}

/// Reports of one model over several seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub model: String,
    pub seeds: usize,
    pub recall: BTreeMap<usize, MeanStd>,
    pub mrr: BTreeMap<usize, MeanStd>,
    pub overall_mae_days: Option<MeanStd>,
}

pub fn summarize(reports: &[EvalReport]) -> Result<SeedSummary> {
    let first = reports.first().ok_or(Error::Empty("no reports to summarize"))?;
    let collect = |get: &dyn Fn(&EvalReport) -> Option<f64>| -> Result<Option<MeanStd>> {
        let vals: Option<Vec<f64>> = reports.iter().map(get).collect();
        vals.map(|v| MeanStd::of(&v)).transpose()
    };
    let mut recall = BTreeMap::new();
    let mut mrr = BTreeMap::new();
    for &k in first.recall.keys() {
        if let Some(s) = collect(&|r| r.recall.get(&k).copied())? {
            recall.insert(k, s);
        }
        if let Some(s) = collect(&|r| r.mrr.get(&k).copied())? {
            mrr.insert(k, s);
        }
    }
    Ok(SeedSummary {
        model: first.model.clone(),
        seeds: reports.len(),
        recall,
        mrr,
        overall_mae_days: collect(&|r| r.overall_mae_days)?,
    })
}
