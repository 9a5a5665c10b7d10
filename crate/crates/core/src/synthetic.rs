//! Synthetic corpora and sampling oracles.
//!
//! [`generate_corpus`] emits already-sessionized users: items follow a
//! first-order Markov chain inside each session, and the gap after a
//! session is drawn from an exponential mixture. With a
//! [`ContextCoupling`], every session first draws a latent mixture
//! component; that component restricts the session's items to its item set
//! and also draws the following gap, so the items just seen carry
//! information about the next return time.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::hawkes::HawkesParams;
use crate::math;
use crate::pipeline::{split_train_test, DatasetSplit, Session, UserHistory};
use crate::point_process::{QuadratureConfig, TimeHeadParams, MAX_EXPONENT, SMALL_W};

/// Seconds between consecutive items of a generated session.
pub const ITEM_SPACING: i64 = 60;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GapComponent {
    pub weight: f64,
    /// Mean of the exponential gap, in seconds.
    pub mean_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContextCoupling {
    /// Items a session may contain under each mixture component.
    pub item_sets: Vec<Vec<usize>>,
    /// Probability that a session keeps the previous session's component
    /// instead of drawing a fresh one.
    #[serde(default)]
    pub persistence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub num_users: usize,
    pub sessions_per_user: usize,
    pub min_session_len: usize,
    pub max_session_len: usize,
    /// Row-stochastic transition matrix over the item vocabulary.
    pub item_transition: Vec<Vec<f64>>,
    pub gap_mixture: Vec<GapComponent>,
    #[serde(default)]
    pub context_coupling: Option<ContextCoupling>,
    pub train_fraction: f64,
    /// Start of every user's first session, seconds since the epoch.
    #[serde(default)]
    pub start_time: i64,
}

impl SynthSpec {
    pub fn num_items(&self) -> usize {
        self.item_transition.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.num_items();
        if n < 2 {
            return Err(invalid("need at least two items"));
        }
        for (r, row) in self.item_transition.iter().enumerate() {
            if row.len() != n {
                return Err(invalid(format!("transition row {r} has {} entries, expected {n}", row.len())));
            }
            if row.iter().any(|&p| !(p >= 0.0 && p.is_finite())) {
                return Err(invalid(format!("transition row {r} has a negative or non-finite entry")));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(invalid(format!("transition row {r} sums to {s}")));
            }
        }
        if self.gap_mixture.is_empty() {
            return Err(invalid("gap mixture is empty"));
        }
        if self
            .gap_mixture
            .iter()
            .any(|c| !(c.weight >= 0.0 && c.mean_seconds > 0.0 && c.mean_seconds.is_finite()))
        {
            return Err(invalid("mixture weights must be non-negative and means positive"));
        }
        let w: f64 = self.gap_mixture.iter().map(|c| c.weight).sum();
        if (w - 1.0).abs() > 1e-9 {
            return Err(invalid(format!("mixture weights sum to {w}")));
        }
        if self.num_users == 0 {
            return Err(invalid("num_users must be positive"));
        }
        if self.min_session_len == 0 || self.min_session_len > self.max_session_len {
            return Err(invalid("session length range must satisfy 1 <= min <= max"));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(invalid("train_fraction must lie in (0, 1)"));
        }
        let n_train = math::floor(self.train_fraction * self.sessions_per_user as f64) as usize;
        if n_train == 0 || n_train >= self.sessions_per_user {
            return Err(invalid("sessions_per_user leaves the train or test side empty"));
        }
        if let Some(c) = &self.context_coupling {
            if c.item_sets.len() != self.gap_mixture.len() {
                return Err(invalid("one item set per mixture component required"));
            }
            if c.item_sets.iter().any(|s| s.is_empty() || s.iter().any(|&i| i >= n)) {
                return Err(invalid("item sets must be non-empty and inside the vocabulary"));
            }
            if !(0.0..=1.0).contains(&c.persistence) {
                return Err(invalid("persistence must lie in [0, 1]"));
            }
        }
        Ok(())
    }
}

/// Exponential draw with the given mean.
pub fn exponential<R: Rng + ?Sized>(rng: &mut R, mean: f64) -> f64 {
    -mean * math::ln(1.0 - rng.random::<f64>())
}

fn categorical<R: Rng + ?Sized>(rng: &mut R, weights: impl Iterator<Item = f64> + Clone) -> usize {
    let total: f64 = weights.clone().sum();
    let mut u = rng.random::<f64>() * total;
    let mut last = 0;
    for (i, w) in weights.enumerate() {
        if w > 0.0 {
            last = i;
            if u < w {
                return i;
            }
            u -= w;
        }
    }
    last
}

fn draw_items<R: Rng + ?Sized>(spec: &SynthSpec, allowed: Option<&[usize]>, rng: &mut R) -> Vec<usize> {
    let len = rng.random_range(spec.min_session_len..=spec.max_session_len);
    let all: Vec<usize>;
    let allowed = match allowed {
        Some(a) => a,
        None => {
            all = (0..spec.num_items()).collect();
            &all
        }
    };
    let mut items = Vec::with_capacity(len);
    items.push(allowed[rng.random_range(0..allowed.len())]);
    while items.len() < len {
        let row = &spec.item_transition[*items.last().unwrap()];
        let weights = allowed.iter().map(|&j| row[j]);
        let next = if weights.clone().sum::<f64>() > 0.0 {
            allowed[categorical(rng, weights)]
        } else {
            allowed[rng.random_range(0..allowed.len())]
        };
        items.push(next);
    }
    items.dedup();
    items
}

fn generate_user(spec: &SynthSpec, user: usize, seed: u64) -> UserHistory {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(user as u64);
    let mix = || spec.gap_mixture.iter().map(|c| c.weight);
    let mut sessions = Vec::with_capacity(spec.sessions_per_user);
    let mut start = spec.start_time;
    let mut gap_before = 0;
    let mut component = categorical(&mut rng, mix());
    for j in 0..spec.sessions_per_user {
        if j > 0 {
            let keep = spec
                .context_coupling
                .as_ref()
                .is_some_and(|c| rng.random::<f64>() < c.persistence);
            if !keep {
                component = categorical(&mut rng, mix());
            }
        }
        let allowed = spec
            .context_coupling
            .as_ref()
            .map(|c| c.item_sets[component].as_slice());
        let items = draw_items(spec, allowed, &mut rng);
        let end = start + ITEM_SPACING * (items.len() as i64 - 1);
        sessions.push(Session {
            items,
            start_time: start,
            end_time: end,
            gap_before,
            gap_masked: false,
        });
        let gap_component = if spec.context_coupling.is_some() {
            component
        } else {
            categorical(&mut rng, mix())
        };
        let gap = exponential(&mut rng, spec.gap_mixture[gap_component].mean_seconds);
        gap_before = (math::floor(gap + 0.5) as i64).max(1);
        start = end + gap_before;
    }
    UserHistory {
        user_index: user,
        sessions,
    }
}

/// Deterministic corpus from `seed`; user `u` draws from its own stream.
pub fn generate_corpus(spec: &SynthSpec, seed: u64) -> Result<DatasetSplit> {
    spec.validate()?;
    let histories: Vec<UserHistory> = (0..spec.num_users).map(|u| generate_user(spec, u, seed)).collect();
    let user_ids: Vec<String> = (0..spec.num_users).map(|u| format!("u{u}")).collect();
    let item_ids: Vec<String> = (0..spec.num_items()).map(|i| format!("i{i}")).collect();
    split_train_test(histories, &user_ids, &item_ids, spec.train_fraction, 2)
}

/// Transition matrix with `stay` on a ring successor and the rest spread
/// uniformly over the other non-self items. The diagonal is zero, so
/// collapsing repeats leaves the chain unchanged.
pub fn ring_transition(n: usize, stay: f64) -> Vec<Vec<f64>> {
    (0..n)
        .map(|i| {
            let rest = (1.0 - stay) / (n - 2) as f64;
            (0..n)
                .map(|j| {
                    if j == i {
                        0.0
                    } else if j == (i + 1) % n {
                        stay
                    } else {
                        rest
                    }
                })
                .collect()
        })
        .collect()
}

/// Ogata thinning from an empty history at time zero.
pub fn simulate_hawkes<R: Rng + ?Sized>(p: &HawkesParams, n_events: usize, rng: &mut R) -> Result<Vec<f64>> {
    p.validate()?;
    let mut events = Vec::with_capacity(n_events);
    let (mut t, mut last, mut s) = (0.0, 0.0, 0.0);
    while events.len() < n_events {
        let (gap, s_new) = thinning_step(p, t, last, s, rng);
        t = gap;
        last = t;
        s = s_new;
        events.push(t);
    }
    Ok(events)
}

/// Time of the next accepted event after `now`, given the excitation sum
/// `s` at `last`; returns it with the updated sum.
fn thinning_step<R: Rng + ?Sized>(p: &HawkesParams, now: f64, last: f64, s: f64, rng: &mut R) -> (f64, f64) {
    let mut t = now;
    loop {
        let bound = p.gamma0 + p.excitation * s * math::exp(-p.decay * (t - last));
        t += exponential(rng, 1.0 / bound);
        let decayed = s * math::exp(-p.decay * (t - last));
        let lambda = p.gamma0 + p.excitation * decayed;
        if rng.random::<f64>() * bound <= lambda {
            return (t, decayed + 1.0);
        }
    }
}

/// Gap from the last event of `history` to the next simulated event.
pub fn simulate_next_gap<R: Rng + ?Sized>(history: &[f64], p: &HawkesParams, rng: &mut R) -> Result<f64> {
    p.validate()?;
    let (last, s) = match history.split_first() {
        None => (0.0, 0.0),
        Some((&first, rest)) => rest.iter().fold((first, 1.0), |(prev, s), &t| {
            (t, s * math::exp(-p.decay * (t - prev)) + 1.0)
        }),
    };
    let (t, _) = thinning_step(p, last, last, s, rng);
    Ok(t - last)
}

/// `F(t) = 1 − exp(−e^a (e^{w t} − 1) / w)` with its `w → 0` limit.
pub fn model_gap_cdf(a: f64, w: f64, t: f64) -> f64 {
    let ea = math::exp(a);
    let integrated = if w.abs() < SMALL_W {
        ea * t
    } else {
        ea * math::expm1(w * t) / w
    };
    -math::expm1(-integrated)
}

/// Inverse-transform draw from the model's gap density at state `h`.
///
/// Requires at most 1e-3 of survival mass past the quadrature cutoff. A
/// draw that lands in the defective mass of a `w < 0` density (no event at
/// all) is returned as `f64::INFINITY`.
pub fn sample_gap_from_model_density<R: Rng + ?Sized>(
    h: &[f64],
    p: &TimeHeadParams,
    q: &QuadratureConfig,
    rng: &mut R,
) -> Result<f64> {
    let a = p.history_term(h)?;
    if a > MAX_EXPONENT {
        return Err(Error::ExponentOverflow {
            context: "model gap sampling",
            value: a,
        });
    }
    let survival = 1.0 - model_gap_cdf(a, p.w, q.cutoff);
    if !(survival <= 1e-3) {
        return Err(invalid(format!(
            "density keeps {survival:.3e} of its mass past the cutoff"
        )));
    }
    let e = exponential(rng, 1.0);
    let scaled = e * math::exp(-a);
    if p.w.abs() < SMALL_W {
        return Ok(scaled);
    }
    let arg = p.w * scaled;
    if arg <= -1.0 {
        return Ok(f64::INFINITY);
    }
    Ok(math::ln_1p(arg) / p.w)
}
