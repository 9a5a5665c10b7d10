//! Inter-session time model.
//!
//! Given the inter-session state `h`, the intensity of the next session start
//! at elapsed time `g` is `exp(v·h + w·g + b)`. Writing `a = v·h + b`, the
//! conditional density of the gap is
//!
//! ```text
//! log f(g) = a + w·g + (exp(a) − exp(a + w·g)) / w
//! ```
//!
//! which has a removable singularity at `w = 0` (the exponential
//! distribution with rate `exp(a)`). For `w < 0` the density is defective:
//! `1 − exp(exp(a) / w)` is the total mass, the rest never arrives.
//!
//! All times here are in model units (seconds divided by
//! [`TimeLossConfig::time_unit`]).

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::math;

/// Below this `|w|` the exponential-limit formulas are used.
pub const SMALL_W: f64 = 1e-6;
/// Largest natural-log exponent accepted before reporting divergence.
pub const MAX_EXPONENT: f64 = 700.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeHeadParams {
    pub v: Vec<f64>,
    pub w: f64,
    pub b: f64,
}

impl TimeHeadParams {
    /// `v·h + b`, the history contribution to the log-intensity.
    pub fn history_term(&self, h: &[f64]) -> Result<f64> {
        if h.len() != self.v.len() {
            return Err(Error::Shape {
                op: "time head",
                expected: alloc::format!("hidden state of length {}", self.v.len()),
                got: alloc::format!("{}", h.len()),
            });
        }
        Ok(math::dot(&self.v, h) + self.b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuadratureConfig {
    /// Upper integration limit, in model time units.
    pub cutoff: f64,
    /// Number of uniformly spaced trapezoid nodes, endpoints included.
    pub num_points: usize,
}

impl QuadratureConfig {
    pub fn new(cutoff: f64, num_points: usize) -> Result<Self> {
        let q = QuadratureConfig { cutoff, num_points };
        q.validate()?;
        Ok(q)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.cutoff.is_finite() && self.cutoff > 0.0) {
            return Err(invalid("quadrature cutoff must be positive"));
        }
        if self.num_points < 64 {
            return Err(invalid("quadrature needs at least 64 nodes"));
        }
        Ok(())
    }
}

impl Default for QuadratureConfig {
    /// 30 days at the default one-day time unit.
    fn default() -> Self {
        QuadratureConfig {
            cutoff: 30.0,
            num_points: 2048,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeLossConfig {
    /// Power applied to the target gap inside the loss, in `(0, 1]`.
    pub alpha_exp: f64,
    /// Seconds per model time unit.
    pub time_unit: f64,
}

impl TimeLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha_exp > 0.0 && self.alpha_exp <= 1.0) {
            return Err(invalid(alloc::format!(
                "alpha_exp must lie in (0, 1], got {}",
                self.alpha_exp
            )));
        }
        if !(self.time_unit.is_finite() && self.time_unit > 0.0) {
            return Err(invalid("time_unit must be positive"));
        }
        Ok(())
    }
}

impl Default for TimeLossConfig {
    fn default() -> Self {
        TimeLossConfig {
            alpha_exp: 1.0,
            time_unit: crate::SECONDS_PER_DAY,
        }
    }
}

/// Log-density and its partial derivatives with respect to `a = v·h + b`
/// and `w`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogDensityParts {
    pub value: f64,
    pub d_history: f64,
    pub d_w: f64,
}

fn check_exponent(value: f64, context: &'static str) -> Result<()> {
    if value > MAX_EXPONENT || value.is_nan() {
        return Err(Error::ExponentOverflow { context, value });
    }
    Ok(())
}

fn check_gap(g: f64) -> Result<()> {
    if !(g >= 0.0 && g.is_finite()) {
        return Err(invalid(alloc::format!("gap must be finite and >= 0, got {g}")));
    }
    Ok(())
}

/// Log-density at gap `g` from the scalar history term `a`.
pub fn log_density_parts(a: f64, w: f64, g: f64) -> Result<LogDensityParts> {
    check_gap(g)?;
    check_exponent(a, "log-density")?;
    check_exponent(a + w * g, "log-density")?;
    if !w.is_finite() {
        return Err(Error::NonFinite("time weight w".into()));
    }
    let ea = math::exp(a);
    if w.abs() < SMALL_W {
        // second-order series of expm1(wg)/w; equals a − g·e^a at w = 0
        let g2 = g * g;
        let growth = g + w * g2 / 2.0 + w * w * g2 * g / 6.0;
        return Ok(LogDensityParts {
            value: a + w * g - ea * growth,
            d_history: 1.0 - ea * growth,
            d_w: g - ea * (g2 / 2.0 + w * g2 * g / 3.0),
        });
    }
    let wg = w * g;
    let growth = math::expm1(wg) / w;
    let d_growth = (g * math::exp(wg) * w - math::expm1(wg)) / (w * w);
    Ok(LogDensityParts {
        value: a + wg - ea * growth,
        d_history: 1.0 - ea * growth,
        d_w: g - ea * d_growth,
    })
}

/// `−log S(g)`, the integrated intensity over `[0, g]`.
pub fn cumulative_intensity(a: f64, w: f64, g: f64) -> Result<f64> {
    check_gap(g)?;
    check_exponent(a + w * g, "cumulative intensity")?;
    let ea = math::exp(a);
    if w.abs() < SMALL_W {
        Ok(ea * (g + w * g * g / 2.0 + w * w * g * g * g / 6.0))
    } else {
        Ok(ea * math::expm1(w * g) / w)
    }
}

pub fn intensity(h: &[f64], g: f64, p: &TimeHeadParams) -> Result<f64> {
    check_gap(g)?;
    let e = p.history_term(h)? + p.w * g;
    check_exponent(e, "intensity")?;
    Ok(math::exp(e))
}

pub fn log_density(h: &[f64], g: f64, p: &TimeHeadParams) -> Result<f64> {
    Ok(log_density_parts(p.history_term(h)?, p.w, g)?.value)
}

/// Negative log-density at `g_target^alpha_exp`; zero when masked.
pub fn time_loss(
    h: &[f64],
    g_target: f64,
    p: &TimeHeadParams,
    cfg: &TimeLossConfig,
    masked: bool,
) -> Result<f64> {
    if masked {
        return Ok(0.0);
    }
    check_gap(g_target)?;
    let g = math::powf(g_target, cfg.alpha_exp);
    Ok(-log_density_parts(p.history_term(h)?, p.w, g)?.value)
}

/// Composite trapezoid rule on `num_points` uniform nodes over `[lo, hi]`.
pub fn trapezoid<F>(lo: f64, hi: f64, num_points: usize, mut f: F) -> Result<f64>
where
    F: FnMut(f64) -> Result<f64>,
{
    if num_points < 2 {
        return Err(invalid("trapezoid rule needs at least two nodes"));
    }
    let step = (hi - lo) / (num_points - 1) as f64;
    let mut acc = 0.5 * (f(lo)? + f(hi)?);
    for i in 1..num_points - 1 {
        acc += f(lo + step * i as f64)?;
    }
    Ok(acc * step)
}

/// Truncated mean `∫₀^cutoff t·f(t) dt` from the scalar history term.
pub fn expected_gap(a: f64, w: f64, q: &QuadratureConfig) -> Result<f64> {
    trapezoid(0.0, q.cutoff, q.num_points, |t| {
        Ok(t * math::exp(log_density_parts(a, w, t)?.value))
    })
}

/// `∫₀^cutoff f(t) dt`.
pub fn density_mass(a: f64, w: f64, q: &QuadratureConfig) -> Result<f64> {
    trapezoid(0.0, q.cutoff, q.num_points, |t| {
        Ok(math::exp(log_density_parts(a, w, t)?.value))
    })
}

pub fn expected_return_time(h: &[f64], p: &TimeHeadParams, q: &QuadratureConfig) -> Result<f64> {
    expected_gap(p.history_term(h)?, p.w, q)
}
