//! Mini-batch training and evaluation of a [`StackConfig`] classifier.
//!
//! Each batch is cut into micro-batches that run on separate tapes, in
//! parallel when `workers > 1`. Their gradients are summed in micro-batch
//! order, so a fixed seed gives the same loss curve for any worker count.

use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{AdamConfig, AdamState, ParamStore, Tape};
use crate::error::{Result, SsmError};
use crate::exec;
use crate::rng;
use crate::scaffold::{stack_tape_forward, StackConfig};
use crate::tasks::TaskSample;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    Constant,
    #[default]
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Samples per tape; the unit of parallel work.
    pub micro_batch: usize,
    pub adam: AdamConfig,
    pub schedule: Schedule,
    /// Linear ramp from zero over the first steps.
    pub warmup_steps: usize,
    /// Emit a metrics record every this many steps; 0 logs epoch ends only.
    pub log_every: usize,
    /// Stop after this many optimizer steps.
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 1,
            batch_size: 32,
            micro_batch: 8,
            adam: AdamConfig::default(),
            schedule: Schedule::Cosine,
            warmup_steps: 0,
            log_every: 50,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.adam.validate()?;
        if self.batch_size == 0 || self.micro_batch == 0 {
            return Err(SsmError::InvalidArgument("batch sizes must be ≥ 1".into()));
        }
        Ok(())
    }

    /// Multiplier on the base learning rates at optimizer step `t` (0-based).
    pub fn lr_factor(&self, t: usize, total: usize) -> f64 {
        let warm = if self.warmup_steps > 0 && t < self.warmup_steps {
            (t + 1) as f64 / self.warmup_steps as f64
        } else {
            1.0
        };
        let decay = match self.schedule {
            Schedule::Constant => 1.0,
            Schedule::Cosine => {
                let span = total.saturating_sub(self.warmup_steps).max(1) as f64;
                let pos = t.saturating_sub(self.warmup_steps) as f64 / span;
                0.5 * (1.0 + (std::f64::consts::PI * pos.min(1.0)).cos())
            }
        };
        warm * decay
    }
}

/// One JSON-lines record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    pub accuracy: f64,
    pub grad_norm: f64,
    pub wall_s: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub loss: f64,
    pub accuracy: f64,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps: usize,
    /// Per-step mean batch loss.
    pub losses: Vec<f64>,
    pub wall_s: f64,
}

/// Padded token block of a slice of samples.
struct Batch {
    tokens: Vec<usize>,
    lengths: Vec<usize>,
    labels: Vec<usize>,
    seq_len: usize,
}

fn make_batch(samples: &[&TaskSample], pad: usize) -> Batch {
    let seq_len = samples.iter().map(|s| s.tokens.len()).max().unwrap_or(0);
    let mut tokens = Vec::with_capacity(seq_len * samples.len());
    for s in samples {
        tokens.extend_from_slice(&s.tokens);
        tokens.extend(std::iter::repeat_n(pad, seq_len - s.tokens.len()));
    }
    Batch {
        tokens,
        lengths: samples.iter().map(|s| s.tokens.len()).collect(),
        labels: samples.iter().map(|s| s.label).collect(),
        seq_len,
    }
}

fn correct(logits: &ndarray::Array2<f64>, labels: &[usize]) -> usize {
    logits
        .rows()
        .into_iter()
        .zip(labels)
        .filter(|(row, &l)| {
            let best = row
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) });
            best.0 == l
        })
        .count()
}

/// Loss, correct count and flat gradient of one micro-batch, weighted by `weight`.
fn micro_grad(cfg: &StackConfig, store: &ParamStore, b: &Batch, weight: f64) -> Result<(f64, usize, Vec<f64>)> {
    let mut tape = Tape::new();
    let logits = stack_tape_forward(cfg, &mut tape, store, &b.tokens, b.seq_len, &b.lengths)?;
    let n_correct = correct(tape.value(logits), &b.labels);
    let loss = tape.cross_entropy(logits, &b.labels)?;
    let loss = tape.scale(loss, weight);
    let grads = tape.backward(loss)?;
    let mut local = store.clone();
    local.zero_grads();
    tape.accumulate_into(&grads, &mut local);
    Ok((tape.scalar(loss), n_correct, local.grads().to_vec()))
}

fn run_parallel<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> T {
    match exec::pool(workers) {
        Some(p) => p.install(f),
        None => f(),
    }
}

/// Mean cross-entropy and accuracy over `samples`.
pub fn evaluate(
    cfg: &StackConfig,
    store: &ParamStore,
    samples: &[TaskSample],
    pad: usize,
    batch: usize,
    workers: usize,
) -> Result<EvalResult> {
    if samples.is_empty() {
        return Ok(EvalResult { loss: 0.0, accuracy: 0.0, count: 0 });
    }
    let refs: Vec<&TaskSample> = samples.iter().collect();
    let chunks: Vec<&[&TaskSample]> = refs.chunks(batch.max(1)).collect();
    let parts = run_parallel(workers, || {
        chunks
            .par_iter()
            .map(|c| {
                let b = make_batch(c, pad);
                let mut tape = Tape::new();
                let logits = stack_tape_forward(cfg, &mut tape, store, &b.tokens, b.seq_len, &b.lengths)?;
                let n = correct(tape.value(logits), &b.labels);
                let loss = tape.cross_entropy(logits, &b.labels)?;
                Ok((tape.scalar(loss) * c.len() as f64, n))
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let (loss, n) = parts.iter().fold((0.0, 0), |(l, n), &(a, b)| (l + a, n + b));
    let count = samples.len();
    Ok(EvalResult { loss: loss / count as f64, accuracy: n as f64 / count as f64, count })
}

/// Trains `store` in place. `on_metric` receives every logged record.
pub fn train(
    cfg: &StackConfig,
    tcfg: &TrainConfig,
    store: &mut ParamStore,
    samples: &[TaskSample],
    pad: usize,
    seed: u64,
    workers: usize,
    mut on_metric: impl FnMut(&Metrics),
) -> Result<TrainSummary> {
    cfg.validate()?;
    tcfg.validate()?;
    let started = Instant::now();
    let mut adam = AdamState::new(tcfg.adam.clone(), store)?;
    let (base_lr, base_lr_dyn) = (tcfg.adam.lr, tcfg.adam.lr_dynamics);
    let per_epoch = samples.len().div_ceil(tcfg.batch_size);
    let total = tcfg.max_steps.unwrap_or(usize::MAX).min(per_epoch * tcfg.epochs);
    let mut losses = Vec::with_capacity(total);
    let mut step = 0;
    'epochs: for epoch in 0..tcfg.epochs {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut rng::substream(seed, &format!("shuffle-{epoch}")));
        let (mut ep_loss, mut ep_correct, mut ep_seen, mut last_norm) = (0.0, 0, 0, 0.0);
        for batch_idx in order.chunks(tcfg.batch_size) {
            if step >= total {
                break 'epochs;
            }
            let bs = batch_idx.len();
            let micros: Vec<Batch> = batch_idx
                .chunks(tcfg.micro_batch)
                .map(|c| make_batch(&c.iter().map(|&i| &samples[i]).collect::<Vec<_>>(), pad))
                .collect();
            let store_ref: &ParamStore = store;
            let results = run_parallel(workers, || {
                micros
                    .par_iter()
                    .map(|m| micro_grad(cfg, store_ref, m, m.labels.len() as f64 / bs as f64))
                    .collect::<Result<Vec<_>>>()
            })?;
            store.zero_grads();
            let mut loss = 0.0;
            let mut n_correct = 0;
            for (l, c, g) in &results {
                loss += l;
                n_correct += c;
                store.add_grads_from(g);
            }
            if !loss.is_finite() {
                return Err(SsmError::Divergence { step });
            }
            let f = tcfg.lr_factor(step, total);
            adam.config.lr = base_lr * f;
            adam.config.lr_dynamics = base_lr_dyn * f;
            let info = adam.step(store)?;
            store.check_finite().map_err(|_| SsmError::Divergence { step })?;
            store.step += 1;
            step += 1;
            losses.push(loss);
            ep_loss += loss * bs as f64;
            ep_correct += n_correct;
            ep_seen += bs;
            last_norm = info.grad_norm;
            if tcfg.log_every > 0 && step % tcfg.log_every == 0 {
                on_metric(&Metrics {
                    epoch,
                    step,
                    loss,
                    accuracy: n_correct as f64 / bs as f64,
                    grad_norm: info.grad_norm,
                    wall_s: started.elapsed().as_secs_f64(),
                });
            }
        }
        if ep_seen > 0 {
            on_metric(&Metrics {
                epoch,
                step,
                loss: ep_loss / ep_seen as f64,
                accuracy: ep_correct as f64 / ep_seen as f64,
                grad_norm: last_norm,
                wall_s: started.elapsed().as_secs_f64(),
            });
        }
    }
    Ok(TrainSummary { steps: step, losses, wall_s: started.elapsed().as_secs_f64() })
}
