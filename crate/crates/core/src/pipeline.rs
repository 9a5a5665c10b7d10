//! Raw interactions to sessionized, split per-user histories.
//!
//! Per user the steps run in this order: [`sessionize`] →
//! [`collapse_repeats`] → [`enforce_length`] → [`assign_gaps`]. Collapsing
//! before the length check only ever shortens sessions, so it avoids splits
//! that would otherwise be needed.
//!
//! Gaps are measured from the end of the previous session to the start of
//! the next one. A session longer than `L` is split in two; the first half
//! ends at the original start time and the second half starts there too, so
//! the gap between the halves is `0` and is flagged `gap_masked`.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::math;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawInteraction {
    pub user_id: String,
    pub item_id: String,
    /// Seconds since the epoch.
    pub timestamp: i64,
}

impl RawInteraction {
    pub fn new(user_id: impl Into<String>, item_id: impl Into<String>, timestamp: i64) -> Result<Self> {
        let r = RawInteraction {
            user_id: user_id.into(),
            item_id: item_id.into(),
            timestamp,
        };
        if r.user_id.is_empty() || r.item_id.is_empty() {
            return Err(invalid("interaction ids must be non-empty"));
        }
        if timestamp < 0 {
            return Err(invalid(format!("negative timestamp {timestamp}")));
        }
        Ok(r)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Session {
    pub items: Vec<usize>,
    pub start_time: i64,
    pub end_time: i64,
    /// Seconds since the previous session ended. `0` for a user's first
    /// session and for the second half of a split session.
    pub gap_before: i64,
    /// Set only on the second half of a split session.
    pub gap_masked: bool,
}

impl Session {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserHistory {
    pub user_index: usize,
    pub sessions: Vec<Session>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BucketScheme {
    Uniform,
    Log,
}

/// Maps a gap in seconds to an embedding / reporting bucket.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GapBucketizer {
    /// Seconds; larger gaps are clipped to this bound.
    pub upper_bound: f64,
    pub num_buckets: usize,
    pub scheme: BucketScheme,
}

impl GapBucketizer {
    pub fn new(upper_bound: f64, num_buckets: usize, scheme: BucketScheme) -> Result<Self> {
        let b = GapBucketizer {
            upper_bound,
            num_buckets,
            scheme,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.upper_bound.is_finite() && self.upper_bound > 0.0) {
            return Err(invalid("bucketizer upper bound must be positive"));
        }
        if self.num_buckets == 0 {
            return Err(invalid("bucketizer needs at least one bucket"));
        }
        Ok(())
    }

    pub fn bucket(&self, gap: f64) -> usize {
        let gap = gap.max(0.0).min(self.upper_bound);
        let (x, bound) = match self.scheme {
            BucketScheme::Uniform => (gap, self.upper_bound),
            BucketScheme::Log => (math::ln_1p(gap), math::ln_1p(self.upper_bound)),
        };
        let idx = math::floor(x * self.num_buckets as f64 / bound) as usize;
        idx.min(self.num_buckets - 1)
    }
}

impl Default for GapBucketizer {
    /// 30 days in one-day buckets.
    fn default() -> Self {
        GapBucketizer {
            upper_bound: 30.0 * crate::SECONDS_PER_DAY,
            num_buckets: 30,
            scheme: BucketScheme::Uniform,
        }
    }
}

pub fn bucketize_gap(gap: f64, b: &GapBucketizer) -> usize {
    b.bucket(gap)
}

/// Per-user histories split chronologically into train and test parts.
///
/// `train[i]` and `test[i]` both belong to user `i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<UserHistory>,
    pub test: Vec<UserHistory>,
    /// Raw item id of each dense item index.
    pub item_ids: Vec<String>,
    /// Raw user id of each dense user index.
    pub user_ids: Vec<String>,
}

impl DatasetSplit {
    pub fn num_items(&self) -> usize {
        self.item_ids.len()
    }

    pub fn num_users(&self) -> usize {
        self.user_ids.len()
    }

    pub fn item_vocabulary(&self) -> BTreeMap<&str, usize> {
        self.item_ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.as_str(), i))
            .collect()
    }

    pub fn num_sessions(&self) -> usize {
        self.train
            .iter()
            .chain(&self.test)
            .map(|h| h.sessions.len())
            .sum()
    }

    /// A user's train and test sessions in order.
    pub fn sessions_of(&self, user: usize) -> impl Iterator<Item = &Session> {
        self.train[user].sessions.iter().chain(&self.test[user].sessions)
    }

    /// Checks the structural invariants of a split.
    pub fn validate(&self, max_session_len: usize) -> Result<()> {
        if self.train.len() != self.user_ids.len() || self.test.len() != self.user_ids.len() {
            return Err(invalid("train/test/user counts disagree"));
        }
        for (u, (tr, te)) in self.train.iter().zip(&self.test).enumerate() {
            if tr.user_index != u || te.user_index != u {
                return Err(invalid(format!("user index mismatch at {u}")));
            }
            let all: Vec<&Session> = tr.sessions.iter().chain(&te.sessions).collect();
            for (j, s) in all.iter().enumerate() {
                check_session(s, max_session_len, self.num_items())?;
                if j > 0 {
                    let prev = all[j - 1];
                    if s.start_time < prev.start_time {
                        return Err(invalid(format!("user {u}: sessions out of order")));
                    }
                    if !s.gap_masked && s.gap_before != s.start_time - prev.end_time {
                        return Err(invalid(format!("user {u}: inconsistent gap at session {j}")));
                    }
                }
            }
        }
        Ok(())
    }
}

fn check_session(s: &Session, max_len: usize, num_items: usize) -> Result<()> {
    if s.items.is_empty() || s.items.len() > max_len {
        return Err(invalid(format!("session length {} outside [1, {max_len}]", s.items.len())));
    }
    if s.end_time < s.start_time {
        return Err(invalid("session ends before it starts"));
    }
    if s.items.windows(2).any(|w| w[0] == w[1]) {
        return Err(invalid("consecutive repeated items"));
    }
    if let Some(&bad) = s.items.iter().find(|&&i| i >= num_items) {
        return Err(Error::IndexOutOfRange {
            what: "item",
            index: bad,
            len: num_items,
        });
    }
    if s.gap_masked && s.gap_before != 0 {
        return Err(invalid("masked gap must be zero"));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    /// Inactivity limit in seconds separating two sessions.
    pub gap_threshold: i64,
    pub max_session_len: usize,
    pub train_fraction: f64,
    pub min_sessions: usize,
}

impl PipelineConfig {
    pub fn lastfm() -> Self {
        PipelineConfig {
            gap_threshold: 3600,
            ..Self::default()
        }
    }

    pub fn reddit() -> Self {
        PipelineConfig {
            gap_threshold: 1800,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.gap_threshold <= 0 {
            return Err(invalid("gap threshold must be positive"));
        }
        if self.max_session_len == 0 {
            return Err(invalid("maximum session length must be positive"));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(invalid("train fraction must lie in (0, 1)"));
        }
        Ok(())
    }
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            gap_threshold: 3600,
            max_session_len: 20,
            train_fraction: 0.8,
            min_sessions: 3,
        }
    }
}

/// Groups one user's `(timestamp, item)` events into sessions.
///
/// Consecutive events share a session when the later one is at most
/// `gap_threshold` seconds after the earlier one.
pub fn sessionize(events: &[(i64, usize)], gap_threshold: i64) -> Result<Vec<Session>> {
    if gap_threshold <= 0 {
        return Err(invalid("gap threshold must be positive"));
    }
    if let Some(p) = events.windows(2).position(|w| w[1].0 < w[0].0) {
        return Err(Error::Unsorted { position: p + 1 });
    }
    let mut sessions: Vec<Session> = Vec::new();
    let mut last_t: Option<i64> = None;
    for &(t, item) in events {
        match (sessions.last_mut(), last_t) {
            (Some(s), Some(prev)) if t <= prev + gap_threshold => {
                s.items.push(item);
                s.end_time = t;
            }
            _ => sessions.push(Session {
                items: alloc::vec![item],
                start_time: t,
                end_time: t,
                gap_before: 0,
                gap_masked: false,
            }),
        }
        last_t = Some(t);
    }
    Ok(sessions)
}

/// Replaces each run of equal consecutive items by a single occurrence.
pub fn collapse_repeats(mut session: Session) -> Session {
    session.items.dedup();
    session
}

/// Splits sessions longer than `max_len` (up to `2·max_len`) in two and
/// drops anything longer.
pub fn enforce_length(sessions: Vec<Session>, max_len: usize) -> Vec<Session> {
    let mut out = Vec::with_capacity(sessions.len());
    for s in sessions {
        let n = s.items.len();
        if n <= max_len {
            out.push(s);
        } else if n <= 2 * max_len {
            let mut first = s.items;
            let second = first.split_off(max_len);
            out.push(Session {
                items: first,
                start_time: s.start_time,
                end_time: s.start_time,
                gap_before: s.gap_before,
                gap_masked: s.gap_masked,
            });
            out.push(Session {
                items: second,
                start_time: s.start_time,
                end_time: s.end_time,
                gap_before: 0,
                gap_masked: true,
            });
        }
    }
    out
}

/// Fills `gap_before` of every unmasked session from its predecessor.
pub fn assign_gaps(sessions: &mut [Session]) {
    for i in 0..sessions.len() {
        if sessions[i].gap_masked || i == 0 {
            sessions[i].gap_before = 0;
        } else {
            sessions[i].gap_before = sessions[i].start_time - sessions[i - 1].end_time;
        }
    }
}

/// Sessionizes, collapses, enforces length and assigns gaps for one user.
pub fn build_sessions(events: &[(i64, usize)], cfg: &PipelineConfig) -> Result<Vec<Session>> {
    let sessions = sessionize(events, cfg.gap_threshold)?
        .into_iter()
        .map(collapse_repeats)
        .collect();
    let mut sessions = enforce_length(sessions, cfg.max_session_len);
    assign_gaps(&mut sessions);
    Ok(sessions)
}

/// Splits each user's sessions chronologically and compacts the vocabulary.
///
/// `histories[i].user_index` indexes `user_ids`; items index `item_ids`.
/// Users with fewer than `min_sessions` sessions, or whose split would leave
/// either side empty, are dropped. Surviving users and items are renumbered
/// densely, preserving their relative order.
pub fn split_train_test(
    histories: Vec<UserHistory>,
    user_ids: &[String],
    item_ids: &[String],
    train_fraction: f64,
    min_sessions: usize,
) -> Result<DatasetSplit> {
    if histories.is_empty() {
        return Err(Error::Empty("corpus has no users"));
    }
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(invalid("train fraction must lie in (0, 1)"));
    }
    let mut kept = Vec::new();
    for h in histories {
        let n = h.sessions.len();
        let n_train = math::floor(train_fraction * n as f64) as usize;
        if n < min_sessions || n_train == 0 || n_train == n {
            continue;
        }
        if h.user_index >= user_ids.len() {
            return Err(Error::IndexOutOfRange {
                what: "user",
                index: h.user_index,
                len: user_ids.len(),
            });
        }
        kept.push((h, n_train));
    }
    if kept.is_empty() {
        return Err(Error::Empty("no user has enough sessions"));
    }

    let used: BTreeSet<usize> = kept
        .iter()
        .flat_map(|(h, _)| h.sessions.iter().flat_map(|s| s.items.iter().copied()))
        .collect();
    if let Some(&bad) = used.iter().next_back().filter(|&&i| i >= item_ids.len()) {
        return Err(Error::IndexOutOfRange {
            what: "item",
            index: bad,
            len: item_ids.len(),
        });
    }
    let remap: BTreeMap<usize, usize> = used.iter().enumerate().map(|(new, &old)| (old, new)).collect();
    let new_items = used.iter().map(|&old| item_ids[old].clone()).collect();

    let mut train = Vec::with_capacity(kept.len());
    let mut test = Vec::with_capacity(kept.len());
    let mut new_users = Vec::with_capacity(kept.len());
    for (u, (mut h, n_train)) in kept.into_iter().enumerate() {
        new_users.push(user_ids[h.user_index].clone());
        for s in &mut h.sessions {
            s.items.iter_mut().for_each(|i| *i = remap[i]);
        }
        let test_sessions = h.sessions.split_off(n_train);
        train.push(UserHistory {
            user_index: u,
            sessions: h.sessions,
        });
        test.push(UserHistory {
            user_index: u,
            sessions: test_sessions,
        });
    }
    Ok(DatasetSplit {
        train,
        test,
        item_ids: new_items,
        user_ids: new_users,
    })
}

/// Corpus statistics after preprocessing, before the split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub users: usize,
    pub sessions: usize,
    pub items: usize,
    pub sessions_per_user: f64,
    pub mean_session_length: f64,
}

impl CorpusStats {
    pub fn of(split: &DatasetSplit) -> Self {
        let sessions = split.num_sessions();
        let events: usize = split
            .train
            .iter()
            .chain(&split.test)
            .flat_map(|h| h.sessions.iter().map(Session::len))
            .sum();
        CorpusStats {
            users: split.num_users(),
            sessions,
            items: split.num_items(),
            sessions_per_user: sessions as f64 / split.num_users().max(1) as f64,
            mean_session_length: events as f64 / sessions.max(1) as f64,
        }
    }
}

/// Full preprocessing of raw interactions from any source.
///
/// Interactions may arrive in any order; each user's events are stably
/// sorted by timestamp first. Item indices follow the lexicographic order of
/// the raw item ids.
pub fn preprocess(interactions: &[RawInteraction], cfg: &PipelineConfig) -> Result<DatasetSplit> {
    cfg.validate()?;
    if interactions.is_empty() {
        return Err(Error::Empty("no interactions"));
    }
    let item_set: BTreeSet<&str> = interactions.iter().map(|r| r.item_id.as_str()).collect();
    let item_index: BTreeMap<&str, usize> = item_set.iter().enumerate().map(|(i, &id)| (id, i)).collect();
    let mut per_user: BTreeMap<&str, Vec<(i64, usize)>> = BTreeMap::new();
    for r in interactions {
        per_user
            .entry(r.user_id.as_str())
            .or_default()
            .push((r.timestamp, item_index[r.item_id.as_str()]));
    }
    let mut user_ids = Vec::with_capacity(per_user.len());
    let mut histories = Vec::with_capacity(per_user.len());
    for (u, (user, mut events)) in per_user.into_iter().enumerate() {
        events.sort_by_key(|e| e.0);
        user_ids.push(String::from(user));
        histories.push(UserHistory {
            user_index: u,
            sessions: build_sessions(&events, cfg)?,
        });
    }
    let item_ids: Vec<String> = item_set.into_iter().map(String::from).collect();
    split_train_test(histories, &user_ids, &item_ids, cfg.train_fraction, cfg.min_sessions)
}
