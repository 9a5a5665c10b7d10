//! Ranking and return-time metrics.
//!
//! The rank of a target is `1 +` the number of items with a strictly greater
//! score, so ties never push a target down. Top-k lists break ties by the
//! lower item index.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::SECONDS_PER_DAY;

pub fn rank_of_target(scores: &[f64], target: usize) -> Result<usize> {
    let t = *scores.get(target).ok_or(Error::IndexOutOfRange {
        what: "target item",
        index: target,
        len: scores.len(),
    })?;
    Ok(1 + scores.iter().filter(|&&s| s > t).count())
}

/// Indices of the `k` highest scores, best first.
pub fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

fn check_ranks(ranks: &[usize]) -> Result<()> {
    if ranks.is_empty() {
        return Err(Error::Empty("no ranked events"));
    }
    if ranks.contains(&0) {
        return Err(invalid("ranks start at 1"));
    }
    Ok(())
}

pub fn recall_at_k(ranks: &[usize], k: usize) -> Result<f64> {
    check_ranks(ranks)?;
    Ok(ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64)
}

pub fn mrr_at_k(ranks: &[usize], k: usize) -> Result<f64> {
    check_ranks(ranks)?;
    let mut sorted = ranks.to_vec();
    sorted.sort_unstable();
    let sum: f64 = sorted
        .iter()
        .filter(|&&r| r <= k)
        .map(|&r| 1.0 / r as f64)
        .sum();
    Ok(sum / ranks.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaeBucket {
    pub lo_days: f64,
    pub hi_days: f64,
    /// `None` when the bucket is empty.
    pub mae_days: Option<f64>,
    pub count: usize,
}

/// `[0, 1, 2, ..., cutoff]` day edges.
pub fn day_edges(cutoff_days: usize) -> Vec<f64> {
    (0..=cutoff_days.max(1)).map(|d| d as f64).collect()
}

/// Mean absolute error per target-gap bucket, in days.
///
/// Bucket `i` holds targets in `[edges[i], edges[i+1])`; targets beyond the
/// last edge fall in the last bucket. Returns the rows and the overall MAE
/// (`None` without events).
pub fn mae_by_bucket(
    predictions_s: &[f64],
    targets_s: &[f64],
    edges_days: &[f64],
) -> Result<(Vec<MaeBucket>, Option<f64>)> {
    if predictions_s.len() != targets_s.len() {
        return Err(Error::Shape {
            op: "mae_by_bucket",
            expected: alloc::format!("{} predictions", targets_s.len()),
            got: alloc::format!("{}", predictions_s.len()),
        });
    }
    if edges_days.len() < 2 || edges_days.windows(2).any(|w| w[1] <= w[0]) {
        return Err(invalid("bucket edges must be increasing with at least two entries"));
    }
    let n_buckets = edges_days.len() - 1;
    let mut errors: Vec<Vec<f64>> = alloc::vec![Vec::new(); n_buckets];
    for (&p, &t) in predictions_s.iter().zip(targets_s) {
        if !(p.is_finite() && t.is_finite()) {
            return Err(Error::NonFinite("gap prediction or target".into()));
        }
        let t_days = t / SECONDS_PER_DAY;
        let b = edges_days[1..]
            .iter()
            .position(|&hi| t_days < hi)
            .unwrap_or(n_buckets - 1);
        errors[b].push((p - t).abs() / SECONDS_PER_DAY);
    }
    let mut total = 0.0;
    let mut count = 0;
    let rows = errors
        .into_iter()
        .enumerate()
        .map(|(i, mut e)| {
            e.sort_by(f64::total_cmp);
            let sum: f64 = e.iter().sum();
            total += sum;
            count += e.len();
            MaeBucket {
                lo_days: edges_days[i],
                hi_days: edges_days[i + 1],
                mae_days: (!e.is_empty()).then(|| sum / e.len() as f64),
                count: e.len(),
            }
        })
        .collect();
    Ok((rows, (count > 0).then(|| total / count as f64)))
}
