//! Learning-rate schedules, Adam and the CTC training loop.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::ctc::{edit_distance, greedy_decode};
use crate::model::{Component, Model, Track};
use crate::numerics::{ops, Tape};
use crate::seeding::keyed_rng;
use crate::synthdata::{Dataset, Utterance};
use crate::transfer::{apply_policy, TransferPolicy};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScheduleKind {
    /// Linear warmup to the peak, then linear decay to zero.
    BiStage { warmup_frac: f64 },
    /// Linear warmup, constant hold, then exponential decay reaching
    /// `final_scale × peak` at the last step.
    TriStage {
        warmup_frac: f64,
        hold_frac: f64,
        final_scale: f64,
    },
}

impl ScheduleKind {
    pub fn bi_stage() -> Self {
        ScheduleKind::BiStage { warmup_frac: 0.1 }
    }

    pub fn tri_stage() -> Self {
        ScheduleKind::TriStage {
            warmup_frac: 0.1,
            hold_frac: 0.4,
            final_scale: 0.05,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub kind: ScheduleKind,
    pub peak_lr: f64,
    pub total_steps: usize,
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        let unit = |field: &str, v: f64| {
            if v > 0.0 && v < 1.0 {
                Ok(())
            } else {
                Err(Error::config(field, format!("must lie in (0, 1), got {v}")))
            }
        };
        match self.kind {
            ScheduleKind::BiStage { warmup_frac } => unit("warmup_frac", warmup_frac)?,
            ScheduleKind::TriStage {
                warmup_frac,
                hold_frac,
                final_scale,
            } => {
                unit("warmup_frac", warmup_frac)?;
                unit("hold_frac", hold_frac)?;
                if warmup_frac + hold_frac > 1.0 {
                    return Err(Error::config("hold_frac", "warmup_frac + hold_frac must be <= 1"));
                }
                if !(final_scale > 0.0 && final_scale <= 1.0) {
                    return Err(Error::config("final_scale", "must lie in (0, 1]"));
                }
            }
        }
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return Err(Error::config("peak_lr", "must be > 0"));
        }
        if self.total_steps == 0 {
            return Err(Error::config("total_steps", "must be >= 1"));
        }
        Ok(())
    }

    pub fn lr_at(&self, step: usize) -> Result<f64> {
        lr_at(self, step)
    }
}

/// Learning rate at `step ∈ [0, total_steps]`.
pub fn lr_at(schedule: &Schedule, step: usize) -> Result<f64> {
    let total = schedule.total_steps;
    if step > total {
        return Err(Error::StepOutOfRange { step, total });
    }
    let (s, n, peak) = (step as f64, total as f64, schedule.peak_lr);
    Ok(match schedule.kind {
        ScheduleKind::BiStage { warmup_frac } => {
            let w = warmup_frac * n;
            if s <= w {
                peak * s / w
            } else {
                peak * (n - s) / (n - w)
            }
        }
        ScheduleKind::TriStage {
            warmup_frac,
            hold_frac,
            final_scale,
        } => {
            let w = warmup_frac * n;
            let hold_end = (warmup_frac + hold_frac) * n;
            if s <= w {
                peak * s / w
            } else if s <= hold_end {
                peak
            } else {
                let progress = (s - hold_end) / (n - hold_end);
                peak * (final_scale.ln() * progress).exp()
            }
        }
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub policy: TransferPolicy,
    pub schedule: Schedule,
    pub batch_size: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    /// Global gradient-norm clip; off when `None`.
    pub grad_clip: Option<f64>,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be >= 1"));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::config("grad_clip", "must be > 0"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    /// L2 norm over all trainable gradients, before clipping.
    pub grad_norm: f64,
    /// The part of `grad_norm` from the transformer body (every block,
    /// projection and positional parameter).
    pub body_grad_norm: f64,
}

#[derive(Clone, Debug, Default)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

fn is_body(c: Component) -> bool {
    !matches!(c, Component::Head | Component::Frontend)
}

/// Owns the optimizer state; the sole mutator of model parameters.
#[derive(Clone, Debug)]
pub struct Trainer {
    config: TrainConfig,
    moments: HashMap<String, Moments>,
    step: usize,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        Ok(Trainer {
            config,
            moments: HashMap::new(),
            step: 0,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// Index of the next step.
    pub fn step(&self) -> usize {
        self.step
    }

    /// One update: apply the policy for this step, mean CTC loss over the
    /// batch, backward, Adam on trainable parameters only.
    pub fn train_step(&mut self, model: &mut Model, batch: &[&Utterance]) -> Result<StepReport> {
        if batch.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let step = self.step;
        apply_policy(model, &self.config.policy, step)?;
        let lr = self.config.schedule.lr_at(step.min(self.config.schedule.total_steps))?;

        let (loss, grads) = batch_gradients(model, batch)?;
        let mut sq = 0.0;
        let mut body_sq = 0.0;
        for (p, g) in model.params().iter().zip(&grads) {
            if let Some(g) = g {
                let s: f64 = g.iter().map(|x| x * x).sum();
                sq += s;
                if is_body(p.spec().component) {
                    body_sq += s;
                }
            }
        }
        let grad_norm = sq.sqrt();
        if !loss.is_finite() || !grad_norm.is_finite() {
            return Err(Error::NonFinite { step, lr, grad_norm });
        }
        let clip_scale = match self.config.grad_clip {
            Some(c) if grad_norm > c => c / grad_norm,
            _ => 1.0,
        };

        let AdamConfig { beta1, beta2, eps } = self.config.adam;
        for (p, g) in model.params_mut().iter_mut().zip(grads) {
            if !p.trainable() {
                continue;
            }
            let n = p.tensor().numel();
            let g = g.unwrap_or_else(|| vec![0.0; n]);
            let st = self.moments.entry(p.path().to_string()).or_insert_with(|| Moments {
                m: vec![0.0; n],
                v: vec![0.0; n],
                t: 0,
            });
            st.t += 1;
            let bc1 = 1.0 - beta1.powi(st.t);
            let bc2 = 1.0 - beta2.powi(st.t);
            let data = p.tensor_mut().data_mut();
            for j in 0..n {
                let gj = g[j] * clip_scale;
                st.m[j] = beta1 * st.m[j] + (1.0 - beta1) * gj;
                st.v[j] = beta2 * st.v[j] + (1.0 - beta2) * gj * gj;
                let mhat = st.m[j] / bc1;
                let vhat = st.v[j] / bc2;
                data[j] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }

        self.step += 1;
        Ok(StepReport {
            step,
            loss,
            lr,
            grad_norm,
            body_grad_norm: body_sq.sqrt(),
        })
    }
}

/// Mean CTC loss over `batch` and its gradient for every trainable
/// parameter (`None` for frozen ones).
pub fn batch_gradients(model: &Model, batch: &[&Utterance]) -> Result<(f64, Vec<Option<Vec<f64>>>)> {
    let scale = 1.0 / batch.len() as f64;
    let mut total = 0.0;
    let mut grads: Vec<Option<Vec<f64>>> = vec![None; model.params().len()];
    for utt in batch {
        let mut tape = Tape::new();
        let vars = model.bind(&mut tape, Track::Trainable);
        let logits = model.forward_on(&mut tape, &vars, &utt.frames)?;
        let logp = tape.log_softmax(logits);
        let loss = tape.ctc_loss(logp, &utt.labels)?;
        let loss = tape.scale(loss, scale);
        total += tape.value(loss).item();
        tape.backward(loss)?;
        for (slot, &v) in grads.iter_mut().zip(&vars) {
            if let Some(g) = tape.grad(v) {
                match slot {
                    Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
                    None => *slot = Some(g.to_vec()),
                }
            }
        }
    }
    Ok((total, grads))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalReport {
    pub mean_loss: f64,
    /// Corpus-level: total edits over total reference tokens.
    pub wer: f64,
    pub edits: usize,
    pub reference_tokens: usize,
}

/// Greedy-decodes every utterance; never mutates the model.
pub fn evaluate(model: &Model, dataset: &Dataset) -> Result<EvalReport> {
    evaluate_utterances(model, &dataset.utterances)
}

pub fn evaluate_utterances(model: &Model, utterances: &[Utterance]) -> Result<EvalReport> {
    if utterances.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut loss = 0.0;
    let mut edits = 0;
    let mut reference_tokens = 0;
    for u in utterances {
        let logits = model.forward(&u.frames)?;
        let logp = ops::log_softmax(&logits);
        loss += crate::ctc::ctc_loss(&logp, &u.labels)?;
        let hyp = greedy_decode(&logits);
        edits += edit_distance(u.labels.tokens(), &hyp.tokens);
        reference_tokens += u.labels.len();
    }
    if reference_tokens == 0 {
        return Err(Error::UndefinedMetric("WER over empty references"));
    }
    Ok(EvalReport {
        mean_loss: loss / utterances.len() as f64,
        wer: edits as f64 / reference_tokens as f64,
        edits,
        reference_tokens,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalRow {
    pub step: usize,
    pub split: &'static str,
    pub wer: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub steps: Vec<StepReport>,
    pub evals: Vec<EvalRow>,
}

/// Runs `schedule.total_steps` steps over shuffled epochs of `train`.
/// With `eval_every > 0`, records an eval row on `eval` every that many
/// steps and after the last one.
pub fn fit(
    model: &mut Model,
    trainer: &mut Trainer,
    train: &Dataset,
    eval: Option<&Dataset>,
    eval_every: usize,
) -> Result<TrainLog> {
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let total = trainer.config.schedule.total_steps;
    let bs = trainer.config.batch_size;
    let seed = trainer.config.seed;
    let mut log = TrainLog::default();
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut epoch = 0u64;
    while trainer.step < total {
        if cursor + bs > order.len() {
            order = (0..train.len()).collect();
            order.shuffle(&mut keyed_rng(seed, &["shuffle", &epoch.to_string()]));
            epoch += 1;
            cursor = 0;
        }
        let end = (cursor + bs).min(order.len());
        let batch: Vec<&Utterance> = order[cursor..end].iter().map(|&i| &train.utterances[i]).collect();
        cursor = end;
        log.steps.push(trainer.train_step(model, &batch)?);
        let done = trainer.step;
        if let Some(ev) = eval {
            if eval_every > 0 && (done.is_multiple_of(eval_every) || done == total) {
                let r = evaluate(model, ev)?;
                log.evals.push(EvalRow {
                    step: done,
                    split: "eval",
                    wer: r.wer,
                });
            }
        }
    }
    Ok(log)
}
