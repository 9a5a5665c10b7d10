//! The joint hierarchical model.
//!
//! An inter-session GRU reads up to `max_session_reps` past session
//! representations, oldest first, from a zero state. Its final state `h_j`
//! seeds the intra-session GRU, which reads the current session's item
//! embeddings; a linear head turns every intra step into scores over all
//! items. The same `h_j` drives the point-process time head.
//!
//! A session representation is the concatenation of the intra GRU's final
//! state for that session (stored as a plain vector, so no gradient flows
//! back through it), the embedding of the session's `gap_before` bucket and
//! the user embedding. Because of that cut, item embeddings only ever
//! receive gradient from the recommendation loss.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::math;
use crate::metrics;
use crate::nn::{self, Gru, Linear};
use crate::optim::ParamGroup;
use crate::pipeline::{GapBucketizer, Session};
use crate::point_process::{self, QuadratureConfig, TimeHeadParams, TimeLossConfig};
use crate::tape::{masked_softmax_xent, Gradients, ParamId, ParamStore, Tape, Var};
use crate::tensor::Array2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub item_embedding_dim: usize,
    pub user_embedding_dim: usize,
    pub gap_embedding_dim: usize,
    pub hidden_dim_inter: usize,
    pub hidden_dim_intra: usize,
    pub max_session_reps: usize,
    pub dropout_rate: f64,
    pub loss_weight_time: f64,
    pub loss_weight_rec: f64,
    pub alpha_exp: f64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub learning_rate_time: f64,
    /// Gradient-norm clip applied to the time-head group.
    pub time_grad_clip: f64,
    /// Seconds per model time unit.
    pub time_unit: f64,
    pub gap_buckets: GapBucketizer,
    /// `false` zeroes and freezes the gap and user embeddings (HRNN
    /// ablation).
    pub use_context: bool,
    /// Starting value of the elapsed-time weight `w`.
    pub initial_time_weight: f64,
}

impl ModelConfig {
    pub fn lastfm() -> Self {
        ModelConfig {
            item_embedding_dim: 100,
            user_embedding_dim: 10,
            gap_embedding_dim: 5,
            hidden_dim_inter: 100,
            hidden_dim_intra: 100,
            max_session_reps: 15,
            dropout_rate: 0.2,
            loss_weight_time: 0.45,
            loss_weight_rec: 0.45,
            alpha_exp: 1.0,
            batch_size: 100,
            learning_rate: 0.001,
            learning_rate_time: 0.0001,
            time_grad_clip: 5.0,
            time_unit: crate::SECONDS_PER_DAY,
            gap_buckets: GapBucketizer::default(),
            use_context: true,
            initial_time_weight: -0.1,
        }
    }

    pub fn reddit() -> Self {
        ModelConfig {
            item_embedding_dim: 50,
            hidden_dim_inter: 50,
            hidden_dim_intra: 50,
            dropout_rate: 0.0,
            ..Self::lastfm()
        }
    }

    /// Plain hierarchical GRU: no time loss, no context embeddings.
    pub fn hrnn_ablation(mut self) -> Self {
        self.loss_weight_time = 0.0;
        self.use_context = false;
        self
    }

    pub fn time_loss_config(&self) -> TimeLossConfig {
        TimeLossConfig {
            alpha_exp: self.alpha_exp,
            time_unit: self.time_unit,
        }
    }

    pub fn representation_dim(&self) -> usize {
        self.hidden_dim_intra + self.gap_embedding_dim + self.user_embedding_dim
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("item_embedding_dim", self.item_embedding_dim),
            ("user_embedding_dim", self.user_embedding_dim),
            ("gap_embedding_dim", self.gap_embedding_dim),
            ("hidden_dim_inter", self.hidden_dim_inter),
            ("hidden_dim_intra", self.hidden_dim_intra),
            ("max_session_reps", self.max_session_reps),
            ("batch_size", self.batch_size),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(invalid(format!("{name} must be positive")));
            }
        }
        if self.hidden_dim_inter != self.hidden_dim_intra {
            return Err(invalid("inter- and intra-session hidden dims must be equal"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(invalid("dropout_rate must lie in [0, 1)"));
        }
        for (name, v) in [
            ("loss_weight_time", self.loss_weight_time),
            ("loss_weight_rec", self.loss_weight_rec),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(invalid(format!("{name} must be non-negative")));
            }
        }
        for (name, v) in [
            ("learning_rate", self.learning_rate),
            ("learning_rate_time", self.learning_rate_time),
            ("time_grad_clip", self.time_grad_clip),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(invalid(format!("{name} must be positive")));
            }
        }
        if !self.initial_time_weight.is_finite() {
            return Err(invalid("initial_time_weight must be finite"));
        }
        self.time_loss_config().validate()?;
        self.gap_buckets.validate()
    }
}

/// Parameter handles of a [`Thrnn`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub item_embedding: ParamId,
    pub user_embedding: ParamId,
    pub gap_embedding: ParamId,
    pub inter: Gru,
    pub intra: Gru,
    pub output: Linear,
    pub time_v: ParamId,
    pub time_w: ParamId,
    pub time_b: ParamId,
}

/// A past session as seen by the inter-session GRU.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionRep {
    /// Final intra-session hidden state, detached.
    pub hidden: Vec<f64>,
    pub gap_bucket: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub user: usize,
    /// Chronological; only the newest `max_session_reps` are read.
    pub history: Vec<SessionRep>,
    /// Inputs are `items[..n-1]`, targets `items[1..]`.
    pub items: Vec<usize>,
    /// Gap before this session, in seconds.
    pub gap_seconds: i64,
    /// Excludes the gap from the time loss (split halves, first sessions).
    pub gap_masked: bool,
}

impl TrainingExample {
    /// Gap in model time units.
    pub fn gap_target(&self, time_unit: f64) -> f64 {
        self.gap_seconds as f64 / time_unit
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    /// One score vector per step; step `i` predicts `items[i + 1]`.
    pub item_scores: Vec<Vec<f64>>,
    /// `h_j`, the inter-session state before this session.
    pub inter_state: Vec<f64>,
    /// This session's representation for later sessions.
    pub rep: SessionRep,
}

/// Scalar loss node of one batch plus its components.
pub struct BatchLoss {
    pub loss: Var,
    pub rec_loss: f64,
    pub rec_count: usize,
    pub time_loss: f64,
    pub time_count: usize,
    pub reps: Vec<SessionRep>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub top_items: Vec<usize>,
    pub return_time_seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Thrnn {
    config: ModelConfig,
    num_items: usize,
    num_users: usize,
    store: ParamStore,
    layout: Layout,
}

pub(crate) const ITEM_EMBEDDING: &str = "item_embedding";
pub(crate) const USER_EMBEDDING: &str = "user_embedding";
pub(crate) const GAP_EMBEDDING: &str = "gap_embedding";

impl Thrnn {
    /// Fresh parameters; all randomness flows from `seed`.
    pub fn new(config: ModelConfig, num_items: usize, num_users: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if num_items < 2 || num_users == 0 {
            return Err(invalid("need at least two items and one user"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rng = &mut rng;
        let mut store = ParamStore::new();
        let h = config.hidden_dim_intra;
        store.add(ITEM_EMBEDDING, Array2::uniform(num_items, config.item_embedding_dim, 0.05, rng))?;
        let ctx = |rows, cols, rng: &mut ChaCha8Rng| {
            if config.use_context {
                Array2::uniform(rows, cols, 0.05, rng)
            } else {
                Array2::zeros(rows, cols)
            }
        };
        store.add(USER_EMBEDDING, ctx(num_users, config.user_embedding_dim, rng))?;
        store.add(GAP_EMBEDDING, ctx(config.gap_buckets.num_buckets, config.gap_embedding_dim, rng))?;
        Gru::register(&mut store, "inter", config.representation_dim(), h, rng)?;
        Gru::register(&mut store, "intra", config.item_embedding_dim, h, rng)?;
        Linear::register(&mut store, "output", h, num_items, rng)?;
        store.add("time.v", Array2::xavier(1, h, rng))?;
        store.add("time.w", Array2::column(vec![config.initial_time_weight]))?;
        store.add("time.b", Array2::zeros(1, 1))?;
        Self::from_store(config, num_items, num_users, store)
    }

    /// Wraps existing parameters, checking every name and shape.
    pub fn from_store(config: ModelConfig, num_items: usize, num_users: usize, store: ParamStore) -> Result<Self> {
        config.validate()?;
        let h = config.hidden_dim_intra;
        let layout = Layout {
            item_embedding: nn::resolve(&store, ITEM_EMBEDDING, num_items, config.item_embedding_dim)?,
            user_embedding: nn::resolve(&store, USER_EMBEDDING, num_users, config.user_embedding_dim)?,
            gap_embedding: nn::resolve(
                &store,
                GAP_EMBEDDING,
                config.gap_buckets.num_buckets,
                config.gap_embedding_dim,
            )?,
            inter: Gru::from_store(&store, "inter", config.representation_dim(), h)?,
            intra: Gru::from_store(&store, "intra", config.item_embedding_dim, h)?,
            output: Linear::from_store(&store, "output", h, num_items)?,
            time_v: nn::resolve(&store, "time.v", 1, h)?,
            time_w: nn::resolve(&store, "time.w", 1, 1)?,
            time_b: nn::resolve(&store, "time.b", 1, 1)?,
        };
        if store.len() != 26 {
            return Err(invalid(format!("expected 26 parameter arrays, found {}", store.len())));
        }
        Ok(Thrnn {
            config,
            num_items,
            num_users,
            store,
            layout,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    pub fn num_users(&self) -> usize {
        self.num_users
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn hidden_dim(&self) -> usize {
        self.config.hidden_dim_intra
    }

    pub fn time_head(&self) -> TimeHeadParams {
        TimeHeadParams {
            v: self.store.get(self.layout.time_v).data().to_vec(),
            w: self.store.get(self.layout.time_w).data()[0],
            b: self.store.get(self.layout.time_b).data()[0],
        }
    }

    pub fn time_head_ids(&self) -> [ParamId; 3] {
        [self.layout.time_v, self.layout.time_w, self.layout.time_b]
    }

    pub fn zero_context_embeddings(&mut self) {
        self.store.get_mut(self.layout.user_embedding).fill(0.0);
        self.store.get_mut(self.layout.gap_embedding).fill(0.0);
    }

    /// Optimizer groups: the time head at its own rate with a norm clip, and
    /// everything else. Frozen context tables are left out.
    pub fn param_groups(&self) -> Vec<ParamGroup> {
        let time = self.time_head_ids();
        let frozen = if self.config.use_context {
            vec![]
        } else {
            vec![self.layout.user_embedding, self.layout.gap_embedding]
        };
        let main = self
            .store
            .ids()
            .filter(|id| !time.contains(id) && !frozen.contains(id))
            .collect();
        vec![
            ParamGroup {
                name: "main".into(),
                params: main,
                learning_rate: self.config.learning_rate,
                clip_norm: None,
            },
            ParamGroup {
                name: "time".into(),
                params: time.to_vec(),
                learning_rate: self.config.learning_rate_time,
                clip_norm: Some(self.config.time_grad_clip),
            },
        ]
    }

    fn check_items(&self, items: &[usize]) -> Result<()> {
        match items.iter().find(|&&i| i >= self.num_items) {
            Some(&bad) => Err(Error::IndexOutOfRange {
                what: "item",
                index: bad,
                len: self.num_items,
            }),
            None => Ok(()),
        }
    }

    fn dropout(&self, tape: &mut Tape, x: Var, rng: &mut Option<&mut dyn RngCore>) -> Result<Var> {
        let p = self.config.dropout_rate;
        match rng {
            Some(r) if p > 0.0 => {
                let keep = 1.0 / (1.0 - p);
                let mask = (0..tape.value(x).len())
                    .map(|_| if r.random::<f64>() < p { 0.0 } else { keep })
                    .collect();
                tape.mul_const(x, mask)
            }
            _ => Ok(x),
        }
    }

    /// Inter-session GRU over the newest `max_session_reps` entries.
    pub fn inter_state(
        &self,
        tape: &mut Tape,
        user: usize,
        history: &[SessionRep],
        rng: &mut Option<&mut dyn RngCore>,
    ) -> Result<Var> {
        let c = &self.config;
        if user >= self.num_users {
            return Err(Error::IndexOutOfRange {
                what: "user",
                index: user,
                len: self.num_users,
            });
        }
        let mut h = tape.constant(vec![0.0; c.hidden_dim_inter]);
        let start = history.len().saturating_sub(c.max_session_reps);
        for rep in &history[start..] {
            if rep.hidden.len() != c.hidden_dim_intra {
                return Err(Error::Shape {
                    op: "session representation",
                    expected: format!("length {}", c.hidden_dim_intra),
                    got: format!("{}", rep.hidden.len()),
                });
            }
            let hidden = tape.constant(rep.hidden.clone());
            let (gap, user_emb) = if c.use_context {
                (
                    tape.lookup(self.layout.gap_embedding, rep.gap_bucket)?,
                    tape.lookup(self.layout.user_embedding, user)?,
                )
            } else {
                (
                    tape.constant(vec![0.0; c.gap_embedding_dim]),
                    tape.constant(vec![0.0; c.user_embedding_dim]),
                )
            };
            let x = tape.concat(&[hidden, gap, user_emb]);
            let x = self.dropout(tape, x, rng)?;
            h = self.layout.inter.step(tape, x, h)?;
        }
        Ok(h)
    }

    /// Intra-session GRU from `h0`. Returns score nodes (one per item, or one
    /// per item except the last when `score_last` is false) and the final
    /// hidden state.
    pub fn intra_pass(
        &self,
        tape: &mut Tape,
        h0: Var,
        items: &[usize],
        score_last: bool,
        rng: &mut Option<&mut dyn RngCore>,
    ) -> Result<(Vec<Var>, Var)> {
        self.check_items(items)?;
        let mut h = h0;
        let mut scores = Vec::with_capacity(items.len());
        for (i, &item) in items.iter().enumerate() {
            let x = tape.lookup(self.layout.item_embedding, item)?;
            let x = self.dropout(tape, x, rng)?;
            h = self.layout.intra.step(tape, x, h)?;
            if score_last || i + 1 < items.len() {
                scores.push(self.layout.output.forward(tape, h)?);
            }
        }
        Ok((scores, h))
    }

    /// `(v·h + b, w)` as scalar nodes.
    pub fn time_terms(&self, tape: &mut Tape, h: Var) -> Result<(Var, Var)> {
        let v = tape.param(self.layout.time_v);
        let vh = tape.dot(v, h)?;
        let b = tape.param(self.layout.time_b);
        let a = tape.add(vh, b)?;
        let w = tape.param(self.layout.time_w);
        Ok((a, w))
    }

    fn bucket(&self, gap_seconds: i64) -> usize {
        self.config.gap_buckets.bucket(gap_seconds as f64)
    }

    /// Mean-reduced joint loss of a batch.
    ///
    /// `loss = loss_weight_time · mean time NLL + loss_weight_rec · mean
    /// cross-entropy`, each mean over unmasked entries only. A term whose
    /// weight is zero is left off the tape entirely.
    pub fn batch_loss(
        &self,
        tape: &mut Tape,
        batch: &[TrainingExample],
        mut rng: Option<&mut dyn RngCore>,
    ) -> Result<BatchLoss> {
        let c = &self.config;
        let mut rec_terms = Vec::new();
        let mut time_terms = Vec::new();
        let mut reps = Vec::with_capacity(batch.len());
        for ex in batch {
            let h = self.inter_state(tape, ex.user, &ex.history, &mut rng)?;
            let (scores, last) = self.intra_pass(tape, h, &ex.items, false, &mut rng)?;
            for (s, &target) in scores.iter().zip(&ex.items[1..]) {
                rec_terms.push(tape.softmax_xent(*s, target)?);
            }
            if !ex.gap_masked {
                let (a, w) = self.time_terms(tape, h)?;
                let g = math::powf(ex.gap_target(c.time_unit), c.alpha_exp);
                time_terms.push(tape.time_nll(a, w, g)?);
            }
            reps.push(SessionRep {
                hidden: tape.value(last).to_vec(),
                gap_bucket: self.bucket(ex.gap_seconds),
            });
        }
        let mean = |tape: &mut Tape, terms: &[Var]| -> Option<(Var, f64)> {
            if terms.is_empty() {
                return None;
            }
            let s = tape.sum(terms);
            let m = tape.scale(s, 1.0 / terms.len() as f64);
            let v = tape.scalar(m);
            Some((m, v))
        };
        let rec = mean(tape, &rec_terms);
        let time = mean(tape, &time_terms);
        let mut parts = Vec::new();
        if let (Some((m, _)), true) = (rec, c.loss_weight_rec > 0.0) {
            parts.push(tape.scale(m, c.loss_weight_rec));
        }
        if let (Some((m, _)), true) = (time, c.loss_weight_time > 0.0) {
            parts.push(tape.scale(m, c.loss_weight_time));
        }
        let loss = tape.sum(&parts);
        Ok(BatchLoss {
            loss,
            rec_loss: rec.map_or(0.0, |r| r.1),
            rec_count: rec_terms.len(),
            time_loss: time.map_or(0.0, |t| t.1),
            time_count: time_terms.len(),
            reps,
        })
    }

    /// Batch loss and exact gradients with dropout disabled.
    pub fn loss_and_gradients(&self, batch: &[TrainingExample]) -> Result<(f64, Gradients)> {
        let mut tape = Tape::new(&self.store);
        let out = self.batch_loss(&mut tape, batch, None)?;
        let mut grads = self.store.zero_grads();
        tape.backward(out.loss, &mut grads)?;
        Ok((tape.scalar(out.loss), grads))
    }

    /// Inference forward pass over one session.
    ///
    /// `gap_before` is the session's gap in seconds, used only for the
    /// bucket of the returned representation.
    pub fn forward(&self, user: usize, history: &[SessionRep], items: &[usize], gap_before: i64) -> Result<ForwardOutput> {
        self.forward_scored(user, history, items, gap_before, false)
    }

    fn forward_scored(
        &self,
        user: usize,
        history: &[SessionRep],
        items: &[usize],
        gap_before: i64,
        score_last: bool,
    ) -> Result<ForwardOutput> {
        let mut tape = Tape::new(&self.store);
        let mut none = None;
        let h = self.inter_state(&mut tape, user, history, &mut none)?;
        let (scores, last) = self.intra_pass(&mut tape, h, items, score_last, &mut none)?;
        Ok(ForwardOutput {
            item_scores: scores.iter().map(|&s| tape.value(s).to_vec()).collect(),
            inter_state: tape.value(h).to_vec(),
            rep: SessionRep {
                hidden: tape.value(last).to_vec(),
                gap_bucket: self.bucket(gap_before),
            },
        })
    }

    /// Representation of `session` given the preceding ones.
    pub fn observe(&self, user: usize, history: &[SessionRep], session: &Session) -> Result<ForwardOutput> {
        self.forward(user, history, &session.items, session.gap_before)
    }

    /// Inter-session state after `history`, without running a session.
    pub fn inter_state_value(&self, user: usize, history: &[SessionRep]) -> Result<Vec<f64>> {
        let mut tape = Tape::new(&self.store);
        let h = self.inter_state(&mut tape, user, history, &mut None)?;
        Ok(tape.value(h).to_vec())
    }

    /// Joint loss of a single session from already computed outputs.
    pub fn joint_loss(
        &self,
        item_scores: &[Vec<f64>],
        targets: &[usize],
        inter_state: &[f64],
        gap_target: f64,
        gap_masked: bool,
    ) -> Result<f64> {
        if item_scores.len() != targets.len() {
            return Err(invalid("one score vector per target required"));
        }
        let mut rec = Vec::with_capacity(targets.len());
        for (s, &t) in item_scores.iter().zip(targets) {
            rec.push(masked_softmax_xent(s, t, false)?.0);
        }
        let rec = (!rec.is_empty()).then(|| rec.iter().sum::<f64>() / rec.len() as f64);
        let time = if gap_masked {
            None
        } else {
            Some(point_process::time_loss(
                inter_state,
                gap_target,
                &self.time_head(),
                &self.config.time_loss_config(),
                false,
            )?)
        };
        Ok(combine_losses(time, rec, &self.config))
    }

    /// Expected return time in seconds from an inter-session state.
    pub fn expected_return_seconds(&self, inter_state: &[f64], q: &QuadratureConfig) -> Result<f64> {
        let t = point_process::expected_return_time(inter_state, &self.time_head(), q)?;
        Ok(t * self.config.time_unit)
    }

    /// Top-`k` next items after the last session's last item, and the
    /// expected gap after that session.
    pub fn predict(&self, user: usize, sessions: &[Session], k: usize, q: &QuadratureConfig) -> Result<Prediction> {
        let (current, past) = sessions
            .split_last()
            .ok_or(Error::Empty("prediction needs at least one session"))?;
        let mut reps = Vec::with_capacity(sessions.len());
        for s in past {
            reps.push(self.observe(user, &reps, s)?.rep);
        }
        let out = self.forward_scored(user, &reps, &current.items, current.gap_before, true)?;
        let scores = out.item_scores.last().ok_or(Error::Empty("session has no items"))?;
        let top_items = metrics::top_k(scores, k);
        reps.push(out.rep);
        let h = self.inter_state_value(user, &reps)?;
        Ok(Prediction {
            top_items,
            return_time_seconds: self.expected_return_seconds(&h, q)?,
        })
    }
}

/// `loss_weight_time · time + loss_weight_rec · rec`, absent terms skipped.
pub fn combine_losses(time: Option<f64>, rec: Option<f64>, cfg: &ModelConfig) -> f64 {
    cfg.loss_weight_time * time.unwrap_or(0.0) + cfg.loss_weight_rec * rec.unwrap_or(0.0)
}

/// Name of every parameter array in creation order.
pub fn parameter_names() -> Vec<String> {
    let mut names: Vec<String> = [ITEM_EMBEDDING, USER_EMBEDDING, GAP_EMBEDDING]
        .iter()
        .map(|s| String::from(*s))
        .collect();
    for prefix in ["inter", "intra"] {
        for s in ["w_r", "w_z", "w_h", "u_r", "u_z", "u_h", "b_r", "b_z", "b_h"] {
            names.push(format!("{prefix}.{s}"));
        }
    }
    for s in ["output.w", "output.b", "time.v", "time.w", "time.b"] {
        names.push(String::from(s));
    }
    names
}
