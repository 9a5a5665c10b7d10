//! Mini-batch training of [`Thrnn`].
//!
//! Each epoch shuffles the training users and fills `batch_size` slots with
//! them. Every slot contributes its user's next training session to the
//! batch; a user leaves its slot after its last session and the next user
//! in the shuffled order takes the slot over. Session representations are
//! recomputed from scratch every epoch by this walk, so nothing but the
//! parameters and the optimizer moments carries from one epoch to the next.
//!
//! Sessions in a batch keep their own lengths; the per-step losses are
//! averaged over the steps that exist, which is what padding to the batch
//! maximum with masked steps would compute.

use alloc::collections::VecDeque;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::{self, EvalConfig, EvalReport};
use crate::model::{ModelConfig, SessionRep, Thrnn, TrainingExample};
use crate::optim::{adam_step, AdamConfig, AdamState, ParamGroup};
use crate::pipeline::DatasetSplit;
use crate::tape::Tape;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    /// 1-based.
    pub epoch: usize,
    /// Mean joint loss over the epoch's batches (with dropout).
    pub train_loss: f64,
    pub rec_loss: f64,
    pub time_loss: f64,
    pub batches: usize,
    /// Parameter arrays whose gradient was non-finite and skipped.
    pub skipped_arrays: usize,
    /// Optimizer steps where the time head was clipped.
    pub clipped_steps: usize,
    pub validation: Option<EvalReport>,
}

/// Training state that survives between epochs.
#[derive(Debug, Clone, PartialEq)]
pub struct Trainer {
    model: Thrnn,
    adam: AdamState,
    groups: Vec<ParamGroup>,
    hyper: AdamConfig,
    seed: u64,
    epochs_done: usize,
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

impl Trainer {
    pub fn new(model: Thrnn, seed: u64) -> Result<Self> {
        let adam = AdamState::new(model.store());
        Self::resume(model, adam, 0, seed)
    }

    /// Continues after `epochs_done` completed epochs.
    pub fn resume(model: Thrnn, adam: AdamState, epochs_done: usize, seed: u64) -> Result<Self> {
        let groups = model.param_groups();
        crate::optim::validate_groups(model.store(), &groups)?;
        let shapes_match = adam.m.len() == model.store().len()
            && adam.v.len() == model.store().len()
            && model
                .store()
                .iter()
                .zip(adam.m.iter().zip(&adam.v))
                .all(|((_, _, p), (m, v))| p.same_shape(m) && p.same_shape(v));
        if !shapes_match {
            return Err(crate::error::invalid("optimizer state does not match the model"));
        }
        Ok(Trainer {
            model,
            adam,
            groups,
            hyper: AdamConfig::default(),
            seed,
            epochs_done,
        })
    }

    pub fn model(&self) -> &Thrnn {
        &self.model
    }

    pub fn adam(&self) -> &AdamState {
        &self.adam
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn epochs_done(&self) -> usize {
        self.epochs_done
    }

    pub fn into_parts(self) -> (Thrnn, AdamState) {
        (self.model, self.adam)
    }

    /// One pass over the training sessions with parameter updates.
    pub fn run_epoch(&mut self, split: &DatasetSplit) -> Result<EpochReport> {
        let epoch = self.epochs_done + 1;
        let mut rng = epoch_rng(self.seed, epoch);
        let mut users: Vec<usize> = (0..split.train.len())
            .filter(|&u| !split.train[u].sessions.is_empty())
            .collect();
        users.shuffle(&mut rng);
        if users.is_empty() {
            return Err(Error::Empty("training set has no sessions"));
        }
        let batch_size = self.model.config().batch_size;
        let max_reps = self.model.config().max_session_reps;
        let mut queue: VecDeque<usize> = users.into();
        // (position in split.train, next session index, recent reps)
        let mut slots: Vec<(usize, usize, Vec<SessionRep>)> = Vec::with_capacity(batch_size);
        let (mut loss_sum, mut rec_sum, mut time_sum) = (0.0, 0.0, 0.0);
        let mut report = EpochReport {
            epoch,
            train_loss: 0.0,
            rec_loss: 0.0,
            time_loss: 0.0,
            batches: 0,
            skipped_arrays: 0,
            clipped_steps: 0,
            validation: None,
        };
        let mut grads = self.model.store().zero_grads();
        loop {
            while slots.len() < batch_size {
                match queue.pop_front() {
                    Some(u) => slots.push((u, 0, Vec::new())),
                    None => break,
                }
            }
            if slots.is_empty() {
                break;
            }
            let batch: Vec<TrainingExample> = slots
                .iter()
                .map(|(u, idx, reps)| {
                    let s = &split.train[*u].sessions[*idx];
                    TrainingExample {
                        user: split.train[*u].user_index,
                        history: reps.clone(),
                        items: s.items.clone(),
                        gap_seconds: s.gap_before,
                        gap_masked: s.gap_masked || *idx == 0,
                    }
                })
                .collect();
            let (loss, out_reps) = {
                let mut tape = Tape::new(self.model.store());
                let diverged = |loss| Error::Diverged {
                    epoch,
                    batch: report.batches + 1,
                    loss,
                };
                let out = match self.model.batch_loss(&mut tape, &batch, Some(&mut rng as &mut dyn RngCore)) {
                    Err(Error::NonFinite(_) | Error::ExponentOverflow { .. }) => return Err(diverged(f64::NAN)),
                    other => other?,
                };
                let loss = tape.scalar(out.loss);
                if !loss.is_finite() {
                    return Err(diverged(loss));
                }
                grads.clear();
                if out.rec_count + out.time_count > 0 {
                    tape.backward(out.loss, &mut grads)?;
                }
                rec_sum += out.rec_loss;
                time_sum += out.time_loss;
                (loss, out.reps)
            };
            let step = adam_step(
                self.model.store_mut(),
                &self.groups,
                &grads,
                &mut self.adam,
                &self.hyper,
            )?;
            report.skipped_arrays += step.skipped.len();
            report.clipped_steps += usize::from(!step.clipped.is_empty());
            report.batches += 1;
            loss_sum += loss;

            for (slot, rep) in slots.iter_mut().zip(out_reps) {
                slot.2.push(rep);
                if slot.2.len() > max_reps {
                    slot.2.remove(0);
                }
                slot.1 += 1;
            }
            slots.retain(|(u, idx, _)| *idx < split.train[*u].sessions.len());
        }
        let n = report.batches as f64;
        report.train_loss = loss_sum / n;
        report.rec_loss = rec_sum / n;
        report.time_loss = time_sum / n;
        self.epochs_done = epoch;
        Ok(report)
    }
}

/// Mean joint loss over every training session, without dropout or
/// updates. Each session counts with its own mean, like a batch of one.
pub fn full_train_loss(model: &Thrnn, split: &DatasetSplit) -> Result<f64> {
    let max_reps = model.config().max_session_reps;
    let mut total = 0.0;
    let mut count = 0usize;
    for user in &split.train {
        let mut reps: Vec<SessionRep> = Vec::new();
        for (idx, s) in user.sessions.iter().enumerate() {
            let ex = TrainingExample {
                user: user.user_index,
                history: reps.clone(),
                items: s.items.clone(),
                gap_seconds: s.gap_before,
                gap_masked: s.gap_masked || idx == 0,
            };
            let mut tape = Tape::new(model.store());
            let out = model.batch_loss(&mut tape, core::slice::from_ref(&ex), None)?;
            if out.rec_count + out.time_count > 0 {
                total += tape.scalar(out.loss);
                count += 1;
            }
            reps.extend(out.reps);
            if reps.len() > max_reps {
                reps.remove(0);
            }
        }
    }
    if count == 0 {
        return Err(Error::Empty("training set has no loss terms"));
    }
    Ok(total / count as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOptions {
    pub epochs: usize,
    pub seed: u64,
    /// Evaluate on the test sessions after every epoch.
    pub validation: Option<EvalConfig>,
}

/// Fresh model trained for `opts.epochs` epochs.
pub fn train(split: &DatasetSplit, cfg: ModelConfig, opts: &TrainOptions) -> Result<(Thrnn, Vec<EpochReport>)> {
    let model = Thrnn::new(cfg, split.num_items(), split.num_users(), opts.seed)?;
    let mut trainer = Trainer::new(model, opts.seed)?;
    let reports = train_more(&mut trainer, split, opts.epochs, opts.validation.as_ref())?;
    Ok((trainer.into_parts().0, reports))
}

/// Runs `epochs` more epochs, evaluating after each when `validation` is set.
pub fn train_more(
    trainer: &mut Trainer,
    split: &DatasetSplit,
    epochs: usize,
    validation: Option<&EvalConfig>,
) -> Result<Vec<EpochReport>> {
    let mut reports = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        let mut r = trainer.run_epoch(split)?;
        if let Some(cfg) = validation {
            r.validation = Some(evaluation::evaluate_model(trainer.model(), split, cfg, "thrnn")?);
        }
        reports.push(r);
    }
    Ok(reports)
}
