//! Oracles shared by the integration tests: a hierarchical GRU written out
//! directly from the documented gate formulas, finite differences, and the
//! tiny configurations used by the gradient checks.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thrnn_core::model::{SessionRep, Thrnn};
use thrnn_core::pipeline::{BucketScheme, GapBucketizer};
use thrnn_core::tape::ParamStore;
use thrnn_core::ModelConfig;

pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        item_embedding_dim: 3,
        user_embedding_dim: 2,
        gap_embedding_dim: 2,
        hidden_dim_inter: 4,
        hidden_dim_intra: 4,
        max_session_reps: 15,
        dropout_rate: 0.0,
        batch_size: 2,
        gap_buckets: GapBucketizer::new(10.0 * 86_400.0, 5, BucketScheme::Uniform).unwrap(),
        ..ModelConfig::lastfm()
    }
}

/// Adds uniform noise to every array so that zero-initialized biases and
/// the time head take generic values.
pub fn jitter(model: &mut Thrnn, scale: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = model.store().ids().collect();
    for id in ids {
        for x in model.store_mut().get_mut(id).data_mut() {
            *x += rng.random_range(-scale..scale);
        }
    }
}

fn arr<'a>(store: &'a ParamStore, name: &str) -> &'a thrnn_core::Array2 {
    store.get(store.id(name).unwrap_or_else(|| panic!("missing {name}")))
}

fn matvec(store: &ParamStore, name: &str, x: &[f64]) -> Vec<f64> {
    let a = arr(store, name);
    (0..a.rows())
        .map(|r| (0..a.cols()).map(|c| a.get(r, c) * x[c]).sum())
        .collect()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `r = σ(W_r x + U_r h + b_r)`, `z = σ(W_z x + U_z h + b_z)`,
/// `h̃ = tanh(W_h x + U_h (r∘h) + b_h)`, `h' = (1 − z)∘h + z∘h̃`.
pub fn gru_step(store: &ParamStore, prefix: &str, x: &[f64], h: &[f64]) -> Vec<f64> {
    let gate = |w: &str, u: &str, b: &str, hh: &[f64]| -> Vec<f64> {
        let wx = matvec(store, &format!("{prefix}.{w}"), x);
        let uh = matvec(store, &format!("{prefix}.{u}"), hh);
        let bias = arr(store, &format!("{prefix}.{b}")).data();
        (0..h.len()).map(|i| wx[i] + uh[i] + bias[i]).collect()
    };
    let r: Vec<f64> = gate("w_r", "u_r", "b_r", h).into_iter().map(sigmoid).collect();
    let z: Vec<f64> = gate("w_z", "u_z", "b_z", h).into_iter().map(sigmoid).collect();
    let rh: Vec<f64> = r.iter().zip(h).map(|(a, b)| a * b).collect();
    let cand: Vec<f64> = gate("w_h", "u_h", "b_h", &rh).into_iter().map(f64::tanh).collect();
    (0..h.len()).map(|i| (1.0 - z[i]) * h[i] + z[i] * cand[i]).collect()
}

pub fn embedding(store: &ParamStore, name: &str, row: usize) -> Vec<f64> {
    arr(store, name).row(row).unwrap().to_vec()
}

/// Reference forward pass: per-step item scores, the inter state and the
/// final intra state of one session.
pub fn reference_session(
    store: &ParamStore,
    max_reps: usize,
    user: usize,
    history: &[SessionRep],
    items: &[usize],
) -> (Vec<Vec<f64>>, Vec<f64>, Vec<f64>) {
    let hidden = arr(store, "inter.b_r").rows();
    let mut h = vec![0.0; hidden];
    for rep in &history[history.len().saturating_sub(max_reps)..] {
        let mut x = rep.hidden.clone();
        x.extend(embedding(store, "gap_embedding", rep.gap_bucket));
        x.extend(embedding(store, "user_embedding", user));
        h = gru_step(store, "inter", &x, &h);
    }
    let inter = h.clone();
    let mut scores = Vec::new();
    for (i, &item) in items.iter().enumerate() {
        let x = embedding(store, "item_embedding", item);
        h = gru_step(store, "intra", &x, &h);
        if i + 1 < items.len() {
            let mut s = matvec(store, "output.w", &h);
            let b = arr(store, "output.b").data();
            s.iter_mut().zip(b).for_each(|(a, b)| *a += b);
            scores.push(s);
        }
    }
    (scores, inter, h)
}

pub fn rep(seed: f64, bucket: usize, dim: usize) -> SessionRep {
    SessionRep {
        hidden: (0..dim).map(|i| ((i as f64 + seed) * 0.9).sin() * 0.6).collect(),
        gap_bucket: bucket,
    }
}

/// Relative error used by the gradient checks.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}
