//! Adam with named parameter groups, each with its own learning rate and an
//! optional gradient-norm clip.

use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{invalid, Result};
use crate::math;
use crate::tape::{Gradients, ParamId, ParamStore};
use crate::tensor::Array2;

#[derive(Debug, Clone, PartialEq)]
pub struct ParamGroup {
    pub name: String,
    pub params: Vec<ParamId>,
    pub learning_rate: f64,
    /// Rescale this group's gradient to at most this L2 norm.
    pub clip_norm: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments per parameter plus the shared step count.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Array2>,
    pub v: Vec<Array2>,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros = || {
            store
                .iter()
                .map(|(_, _, a)| Array2::zeros(a.rows(), a.cols()))
                .collect::<Vec<_>>()
        };
        AdamState {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepReport {
    /// Arrays whose gradient was not finite; left unchanged this step.
    pub skipped: Vec<ParamId>,
    /// Groups whose gradient was rescaled by the clip.
    pub clipped: Vec<String>,
}

pub fn validate_groups(store: &ParamStore, groups: &[ParamGroup]) -> Result<()> {
    let mut seen = alloc::vec![false; store.len()];
    for g in groups {
        if !(g.learning_rate > 0.0 && g.learning_rate.is_finite()) {
            return Err(invalid(alloc::format!(
                "group {:?} needs a positive learning rate",
                g.name
            )));
        }
        if groups.iter().filter(|o| o.name == g.name).count() > 1 {
            return Err(invalid(alloc::format!("duplicate group name {:?}", g.name)));
        }
        for p in &g.params {
            if p.index() >= store.len() || seen[p.index()] {
                return Err(invalid(alloc::format!(
                    "parameter {} missing or in several groups",
                    p.index()
                )));
            }
            seen[p.index()] = true;
        }
    }
    Ok(())
}

pub fn adam_step(
    store: &mut ParamStore,
    groups: &[ParamGroup],
    grads: &Gradients,
    state: &mut AdamState,
    hyper: &AdamConfig,
) -> Result<StepReport> {
    if state.m.len() != store.len() || grads.len() != store.len() {
        return Err(invalid("optimizer state does not match the parameter store"));
    }
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - math::powf(hyper.beta1, t);
    let bc2 = 1.0 - math::powf(hyper.beta2, t);
    let mut report = StepReport::default();

    for group in groups {
        let finite: Vec<ParamId> = group
            .params
            .iter()
            .copied()
            .filter(|&p| {
                let ok = grads.get(p).is_finite();
                if !ok {
                    report.skipped.push(p);
                }
                ok
            })
            .collect();
        let mut scale = 1.0;
        if let Some(max_norm) = group.clip_norm {
            let norm = math::sqrt(finite.iter().map(|&p| grads.get(p).sq_norm()).sum());
            if norm > max_norm {
                scale = max_norm / norm;
                report.clipped.push(group.name.clone());
            }
        }
        for p in finite {
            let g = grads.get(p).data();
            let m = state.m[p.index()].data_mut();
            let v = state.v[p.index()].data_mut();
            let x = store.get_mut(p).data_mut();
            for i in 0..g.len() {
                let gi = g[i] * scale;
                m[i] = hyper.beta1 * m[i] + (1.0 - hyper.beta1) * gi;
                v[i] = hyper.beta2 * v[i] + (1.0 - hyper.beta2) * gi * gi;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                x[i] -= group.learning_rate * m_hat / (math::sqrt(v_hat) + hyper.eps);
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn scalar_store(n: usize) -> ParamStore {
        let mut s = ParamStore::new();
        for i in 0..n {
            s.add(&alloc::format!("p{i}"), Array2::column(vec![1.0])).unwrap();
        }
        s
    }

    fn group(name: &str, ids: &[usize], lr: f64) -> ParamGroup {
        ParamGroup {
            name: name.into(),
            params: ids.iter().map(|&i| ParamId(i)).collect(),
            learning_rate: lr,
            clip_norm: None,
        }
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut s = scalar_store(1);
        let mut st = AdamState::new(&s);
        let grads = s.zero_grads();
        adam_step(&mut s, &[group("all", &[0], 0.001)], &grads, &mut st, &AdamConfig::default()).unwrap();
        assert_eq!(s.get(ParamId(0)).data(), &[1.0]);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut s = scalar_store(1);
        let mut st = AdamState::new(&s);
        let mut grads = s.zero_grads();
        grads.get_mut(ParamId(0)).data_mut()[0] = 1.0;
        adam_step(&mut s, &[group("all", &[0], 0.001)], &grads, &mut st, &AdamConfig::default()).unwrap();
        let delta = 1.0 - s.get(ParamId(0)).data()[0];
        assert!((delta - 0.001).abs() < 1e-8);
    }

    #[test]
    fn group_learning_rates_scale_updates() {
        let mut s = scalar_store(2);
        let mut st = AdamState::new(&s);
        let groups = [group("main", &[0], 0.001), group("time", &[1], 0.0001)];
        let mut grads = s.zero_grads();
        for step in 0..20 {
            let g = 0.3 + 0.1 * (step as f64).sin();
            grads.get_mut(ParamId(0)).data_mut()[0] = g;
            grads.get_mut(ParamId(1)).data_mut()[0] = g;
            adam_step(&mut s, &groups, &grads, &mut st, &AdamConfig::default()).unwrap();
        }
        let d0 = 1.0 - s.get(ParamId(0)).data()[0];
        let d1 = 1.0 - s.get(ParamId(1)).data()[0];
        assert!((d0 / d1 - 10.0).abs() < 1e-9);
    }

    #[test]
    fn non_finite_gradient_is_skipped_and_reported() {
        let mut s = scalar_store(2);
        let mut st = AdamState::new(&s);
        let mut grads = s.zero_grads();
        grads.get_mut(ParamId(0)).data_mut()[0] = f64::NAN;
        grads.get_mut(ParamId(1)).data_mut()[0] = 1.0;
        let r = adam_step(&mut s, &[group("all", &[0, 1], 0.01)], &grads, &mut st, &AdamConfig::default()).unwrap();
        assert_eq!(r.skipped, vec![ParamId(0)]);
        assert_eq!(s.get(ParamId(0)).data(), &[1.0]);
        assert!(s.get(ParamId(1)).data()[0] < 1.0);
    }

    #[test]
    fn clip_limits_group_norm() {
        let mut s = scalar_store(1);
        let mut st = AdamState::new(&s);
        let mut grads = s.zero_grads();
        grads.get_mut(ParamId(0)).data_mut()[0] = 50.0;
        let mut g = group("time", &[0], 0.1);
        g.clip_norm = Some(5.0);
        let r = adam_step(&mut s, &[g], &grads, &mut st, &AdamConfig::default()).unwrap();
        assert_eq!(r.clipped, vec![String::from("time")]);
        assert!((st.m[0].data()[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn group_validation() {
        let s = scalar_store(2);
        assert!(validate_groups(&s, &[group("a", &[0], 0.1), group("b", &[1], 0.1)]).is_ok());
        assert!(validate_groups(&s, &[group("a", &[0], 0.0)]).is_err());
        assert!(validate_groups(&s, &[group("a", &[0], 0.1), group("a", &[1], 0.1)]).is_err());
        assert!(validate_groups(&s, &[group("a", &[0, 0], 0.1)]).is_err());
    }
}
