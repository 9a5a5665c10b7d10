//! Per-user exponential-kernel Hawkes process.
//!
//! `λ(t) = γ0 + excitation · Σ_{t_j < t} exp(−decay · (t − t_j))`
//!
//! The excitation multiplies the kernel directly, so the branching ratio is
//! `excitation / decay`. Fitted parameters always keep it below one.
//!
//! Event times are in model time units. A user's events are the points of
//! the gap timeline: the first session sits at zero and every later,
//! unmasked session adds its `gap_before`.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::math;
use crate::point_process::{trapezoid, QuadratureConfig};

/// Largest branching ratio a fit may reach.
pub const MAX_BRANCHING: f64 = 0.999;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HawkesParams {
    pub gamma0: f64,
    pub excitation: f64,
    pub decay: f64,
}

impl HawkesParams {
    pub fn new(gamma0: f64, excitation: f64, decay: f64) -> Result<Self> {
        let p = HawkesParams {
            gamma0,
            excitation,
            decay,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn poisson(rate: f64) -> Result<Self> {
        Self::new(rate, 0.0, 1.0)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.gamma0 > 0.0
            && self.gamma0.is_finite()
            && self.excitation >= 0.0
            && self.excitation.is_finite()
            && self.decay > 0.0
            && self.decay.is_finite();
        if !ok {
            return Err(invalid(alloc::format!("invalid Hawkes parameters {self:?}")));
        }
        Ok(())
    }

    pub fn branching_ratio(&self) -> f64 {
        self.excitation / self.decay
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitWindow {
    LastK(usize),
    FullHistory,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitConfig {
    pub window: FitWindow,
    pub max_iterations: usize,
    /// Stop when the relative change of the NLL falls below this.
    pub tolerance: f64,
}

impl FitConfig {
    /// Fit on the last 15 events.
    pub fn short_window() -> Self {
        FitConfig {
            window: FitWindow::LastK(15),
            max_iterations: 20_000,
            tolerance: 1e-12,
        }
    }

    pub fn long_term() -> Self {
        FitConfig {
            window: FitWindow::FullHistory,
            ..Self::short_window()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let FitWindow::LastK(k) = self.window {
            if k < 2 {
                return Err(invalid("fit window needs at least two events"));
            }
        }
        if self.max_iterations == 0 || !(self.tolerance > 0.0) {
            return Err(invalid("fit needs iterations and a positive tolerance"));
        }
        Ok(())
    }

    pub fn select<'a>(&self, history: &'a [f64]) -> &'a [f64] {
        match self.window {
            FitWindow::LastK(k) => &history[history.len().saturating_sub(k)..],
            FitWindow::FullHistory => history,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HawkesFit {
    pub params: HawkesParams,
    /// NLL per event at the returned parameters (`NaN` for the fallback).
    pub nll_per_event: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Too few events; `params` is the Poisson fallback.
    pub fallback: bool,
}

fn check_sorted(events: &[f64]) -> Result<()> {
    if let Some(p) = events.windows(2).position(|w| w[1] < w[0]) {
        return Err(Error::Unsorted { position: p + 1 });
    }
    Ok(())
}

/// Intensity at `t` after `history` (sorted, all `<= t`), via the
/// exponential-kernel recursion.
pub fn hawkes_intensity(t: f64, history: &[f64], p: &HawkesParams) -> f64 {
    match excitation_state(history, p.decay) {
        Some((last, s)) => p.gamma0 + p.excitation * s * math::exp(-p.decay * (t - last)),
        None => p.gamma0,
    }
}

/// `(t_n, Σ_j exp(−decay (t_n − t_j)))`, the sum including `t_n` itself.
fn excitation_state(history: &[f64], decay: f64) -> Option<(f64, f64)> {
    let (&first, rest) = history.split_first()?;
    let mut s = 1.0;
    let mut last = first;
    for &t in rest {
        s = s * math::exp(-decay * (t - last)) + 1.0;
        last = t;
    }
    Some((last, s))
}

/// Negative log-likelihood of `events` on `[0, horizon]`.
pub fn hawkes_nll(events: &[f64], p: &HawkesParams, horizon: f64) -> Result<f64> {
    p.validate()?;
    check_sorted(events)?;
    if events.first().is_some_and(|&t| t < 0.0) || events.last().is_some_and(|&t| t > horizon) {
        return Err(invalid("events must lie within [0, horizon]"));
    }
    Ok(nll_and_grad(events, p, horizon).0)
}

/// NLL and its gradient with respect to `(ln γ0, ln excitation, ln decay)`.
fn nll_and_grad(events: &[f64], p: &HawkesParams, horizon: f64) -> (f64, [f64; 3]) {
    let (g0, a, beta) = (p.gamma0, p.excitation, p.decay);
    let mut log_sum = 0.0;
    let (mut d_g0, mut d_a, mut d_beta) = (0.0, 0.0, 0.0);
    // kern = Σ_{i<j} exp(−β (t_j − t_i)), dkern its derivative in β
    let (mut kern, mut dkern) = (0.0, 0.0);
    let mut prev: Option<f64> = None;
    for &t in events {
        if let Some(tp) = prev {
            let dt = t - tp;
            let e = math::exp(-beta * dt);
            dkern = e * (dkern - dt * (kern + 1.0));
            kern = e * (kern + 1.0);
        }
        prev = Some(t);
        let lambda = g0 + a * kern;
        log_sum += math::ln(lambda);
        d_g0 -= 1.0 / lambda;
        d_a -= kern / lambda;
        d_beta -= a * dkern / lambda;
    }
    let mut tail = 0.0;
    let mut dtail = 0.0;
    for &t in events {
        let tau = horizon - t;
        let e = math::exp(-beta * tau);
        tail += 1.0 - e;
        dtail += tau * e;
    }
    let compensator = g0 * horizon + a / beta * tail;
    d_g0 += horizon;
    d_a += tail / beta;
    d_beta += -a / (beta * beta) * tail + a / beta * dtail;
    (
        compensator - log_sum,
        [d_g0 * g0, d_a * a, d_beta * beta],
    )
}

fn from_log(theta: [f64; 3]) -> HawkesParams {
    HawkesParams {
        gamma0: math::exp(theta[0]),
        excitation: math::exp(theta[1]),
        decay: math::exp(theta[2]),
    }
}

/// Keeps the branching ratio at most [`MAX_BRANCHING`].
fn project(mut theta: [f64; 3]) -> [f64; 3] {
    let cap = theta[2] + math::ln(MAX_BRANCHING);
    if theta[1] > cap {
        theta[1] = cap;
    }
    theta
}

/// Maximum-likelihood fit over the configured window.
///
/// Gradient descent in log-parameter space with a backtracking step; the
/// NLL is non-increasing across accepted iterations. With fewer than two
/// events in the window, returns a Poisson process at `fallback_rate`.
pub fn fit(history: &[f64], cfg: &FitConfig, fallback_rate: f64) -> Result<HawkesFit> {
    cfg.validate()?;
    check_sorted(history)?;
    let window = cfg.select(history);
    let span = match (window.first(), window.last()) {
        (Some(&a), Some(&b)) => b - a,
        _ => 0.0,
    };
    if window.len() < 2 || !(span > 0.0) {
        return Ok(HawkesFit {
            params: HawkesParams::poisson(fallback_rate)?,
            nll_per_event: f64::NAN,
            iterations: 0,
            converged: true,
            fallback: true,
        });
    }
    let origin = window[0];
    let events: Vec<f64> = window.iter().map(|t| t - origin).collect();
    let n = events.len() as f64;
    let rate = n / span;
    let decay0 = rate.max(1e-6);
    let mut theta = project([
        math::ln(0.7 * rate),
        math::ln(0.3 * decay0),
        math::ln(decay0),
    ]);
    let objective = |th: [f64; 3]| {
        let (f, g) = nll_and_grad(&events, &from_log(th), span);
        (f / n, [g[0] / n, g[1] / n, g[2] / n])
    };
    let (mut f, mut g) = objective(theta);
    let mut step = 0.1;
    let mut converged = false;
    let mut iterations = 0;
    while iterations < cfg.max_iterations {
        iterations += 1;
        let candidate = project([
            theta[0] - step * g[0],
            theta[1] - step * g[1],
            theta[2] - step * g[2],
        ]);
        let (f_new, g_new) = objective(candidate);
        if f_new.is_finite() && f_new <= f {
            let rel = (f - f_new) / f.abs().max(1.0);
            theta = candidate;
            f = f_new;
            g = g_new;
            step *= 1.5;
            if rel < cfg.tolerance {
                converged = true;
                break;
            }
        } else {
            step *= 0.5;
            if step < 1e-14 {
                converged = true;
                break;
            }
        }
    }
    Ok(HawkesFit {
        params: from_log(theta),
        nll_per_event: f,
        iterations,
        converged,
        fallback: false,
    })
}

/// Expected time from the last event in `history` to the next one,
/// truncated at the quadrature cutoff.
pub fn hawkes_predict_next(history: &[f64], p: &HawkesParams, q: &QuadratureConfig) -> Result<f64> {
    p.validate()?;
    check_sorted(history)?;
    let s = excitation_state(history, p.decay).map_or(0.0, |(_, s)| s);
    let boost = p.excitation * s;
    trapezoid(0.0, q.cutoff, q.num_points, |t| {
        let decayed = math::exp(-p.decay * t);
        let lambda = p.gamma0 + boost * decayed;
        let integrated = p.gamma0 * t + boost * (1.0 - decayed) / p.decay;
        Ok(t * lambda * math::exp(-integrated))
    })
}

/// Events of a gap series: `0, g1, g1+g2, ...`, skipping masked gaps.
pub fn timeline(gaps: impl IntoIterator<Item = (f64, bool)>) -> Vec<f64> {
    let mut out = Vec::new();
    let mut t = 0.0;
    for (i, (gap, masked)) in gaps.into_iter().enumerate() {
        if i == 0 {
            out.push(0.0);
        } else if !masked {
            t += gap;
            out.push(t);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn p(g: f64, a: f64, b: f64) -> HawkesParams {
        HawkesParams::new(g, a, b).unwrap()
    }

    #[test]
    fn intensity_examples() {
        assert_eq!(hawkes_intensity(3.0, &[], &p(0.7, 0.5, 1.0)), 0.7);
        assert_eq!(hawkes_intensity(3.0, &[0.0, 1.0, 2.5], &p(0.7, 0.0, 1.0)), 0.7);
        let l = hawkes_intensity(1.0, &[0.0], &p(1.0, 0.5, 1.0));
        assert!((l - (1.0 + 0.5 * (-1f64).exp())).abs() < 1e-15);
        assert!((l - 1.18394).abs() < 1e-5);
    }

    #[test]
    fn poisson_nll() {
        let events = [0.5, 1.0, 4.0, 7.5];
        let nll = hawkes_nll(&events, &p(0.6, 0.0, 2.0), 10.0).unwrap();
        assert!((nll - (-4.0 * 0.6f64.ln() + 6.0)).abs() < 1e-12);
        let closer = hawkes_nll(&events, &p(0.5, 0.0, 2.0), 10.0).unwrap();
        assert!(closer < nll);
        let mle = hawkes_nll(&events, &p(0.4, 0.0, 2.0), 10.0).unwrap();
        assert!(mle < closer);
    }

    #[test]
    fn nll_rejects_bad_input() {
        assert!(hawkes_nll(&[1.0, 0.5], &p(1.0, 0.1, 1.0), 2.0).is_err());
        assert!(hawkes_nll(&[1.0, 3.0], &p(1.0, 0.1, 1.0), 2.0).is_err());
        let bad = HawkesParams {
            gamma0: -1.0,
            excitation: 0.0,
            decay: 1.0,
        };
        assert!(hawkes_nll(&[1.0], &bad, 2.0).is_err());
    }

    #[test]
    fn analytic_gradient_matches_differences() {
        let events = [0.0, 0.3, 0.35, 1.2, 2.0, 2.1, 2.15, 4.0];
        let theta = [0.2f64.ln(), 0.9f64.ln(), 1.7f64.ln()];
        let (_, g) = nll_and_grad(&events, &from_log(theta), 5.0);
        for k in 0..3 {
            let h = 1e-6;
            let mut up = theta;
            let mut dn = theta;
            up[k] += h;
            dn[k] -= h;
            let fd = (nll_and_grad(&events, &from_log(up), 5.0).0
                - nll_and_grad(&events, &from_log(dn), 5.0).0)
                / (2.0 * h);
            assert!((fd - g[k]).abs() < 1e-6 * fd.abs().max(1.0), "k={k}");
        }
    }

    #[test]
    fn predict_poisson_mean() {
        let q = QuadratureConfig::new(60.0, 8192).unwrap();
        let m = hawkes_predict_next(&[], &p(0.5, 0.0, 1.0), &q).unwrap();
        assert!((m - 2.0).abs() < 1e-3);
        let m2 = hawkes_predict_next(&[0.0, 0.2, 3.0], &p(2.0, 0.0, 1.0), &q).unwrap();
        assert!((m2 - 0.5).abs() < 1e-4);
    }

    #[test]
    fn fallback_for_short_windows() {
        let f = fit(&[3.0], &FitConfig::short_window(), 0.25).unwrap();
        assert!(f.fallback);
        assert_eq!(f.params, HawkesParams::poisson(0.25).unwrap());
        assert!(fit(&[], &FitConfig::long_term(), 0.25).unwrap().fallback);
    }

    #[test]
    fn window_selection() {
        let h: Vec<f64> = (0..40).map(|i| i as f64).collect();
        assert_eq!(FitConfig::short_window().select(&h), &h[25..]);
        assert_eq!(FitConfig::long_term().select(&h).len(), 40);
    }

    #[test]
    fn timeline_skips_masked() {
        let t = timeline(vec![(0.0, false), (1.5, false), (0.0, true), (2.0, false)]);
        assert_eq!(t, vec![0.0, 1.5, 3.5]);
    }
}
