use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::model::{Batch, Seq2Seq};
use crate::bytedata::ParallelPair;
use crate::error::{Error, Result};
use crate::numcore::{lr_schedule, optimizer_step, GradBuffer, Graph, ParamStore, TrainHyper};

/// Loss and gradients of one teacher-forced batch. `dropout_seed` enables
/// dropout.
pub fn batch_gradients(
    model: &Seq2Seq,
    store: &ParamStore,
    batch: &Batch,
    smoothing: f64,
    dropout_seed: Option<u64>,
) -> Result<(f64, GradBuffer)> {
    let mut g = Graph::<f32>::new(store);
    if let Some(seed) = dropout_seed {
        g = g.with_dropout(seed);
    }
    let logits = model.logits(&mut g, batch);
    let loss = g.smoothed_ce(logits, &batch.targets, smoothing)?;
    let value = g.value(loss).item() as f64;
    let back = g.backward(loss);
    let mut buf = GradBuffer::zeros_like(store);
    for (id, grad) in back.params() {
        buf.accumulate(id, grad);
    }
    Ok((value, buf))
}

/// Mean unsmoothed cross-entropy per target character, without dropout.
pub fn corpus_loss(model: &Seq2Seq, store: &ParamStore, pairs: &[ParallelPair], batch_size: usize) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in pairs.chunks(batch_size.max(1)) {
        let batch = Batch::new(model, chunk);
        let n = batch.targets.iter().flatten().count();
        let mut g = Graph::<f32>::new(store);
        let logits = model.logits(&mut g, &batch);
        let loss = g.smoothed_ce(logits, &batch.targets, 0.0)?;
        total += g.value(loss).item() as f64 * n as f64;
        count += n;
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}

/// Per-step training losses and validation evaluations.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub step_losses: Vec<f64>,
    /// Learning rate applied at each step.
    pub learning_rates: Vec<f64>,
    /// Seconds since the start of training, after each step.
    pub elapsed_s: Vec<f64>,
    /// `(step, validation loss)` after each evaluation.
    pub validation: Vec<(usize, f64)>,
    pub best_step: usize,
    pub epochs: usize,
    pub stopped_early: bool,
}

fn clip(grads: &mut GradBuffer, max_norm: Option<f64>) {
    if let Some(max) = max_norm {
        let norm = grads.global_norm();
        if norm > max {
            grads.scale((max / norm) as f32);
        }
    }
}

/// Teacher-forced training with smoothed cross-entropy. Validation loss is
/// measured every `eval_every` steps (once per epoch by default); training
/// stops after `patience` evaluations without improvement or at the step or
/// epoch cap, and the best parameters are restored.
pub fn train_translation(
    model: &Seq2Seq,
    store: ParamStore,
    train: &[ParallelPair],
    valid: &[ParallelPair],
    hyper: &TrainHyper,
) -> Result<(Checkpoint, TrainLog)> {
    hyper.validate()?;
    if train.is_empty() || valid.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut store = store;
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = TrainLog::default();
    let mut best = (f64::INFINITY, store.clone());
    let mut since_best = 0usize;
    let mut step = 0usize;
    let started = Instant::now();
    let max_steps = hyper.max_steps.unwrap_or(usize::MAX);
    let max_epochs = hyper.max_epochs.unwrap_or(usize::MAX);
    'epochs: while log.epochs < max_epochs && step < max_steps {
        order.shuffle(&mut rng);
        for chunk in order.chunks(hyper.batch_size) {
            let pairs: Vec<ParallelPair> = chunk.iter().map(|&i| train[i].clone()).collect();
            let batch = Batch::new(model, &pairs);
            step += 1;
            let dropout_seed = hyper.seed.wrapping_mul(0x2545_f491_4f6c_dd1d).wrapping_add(step as u64);
            let (loss, mut grads) = batch_gradients(model, &store, &batch, hyper.label_smoothing, Some(dropout_seed))?;
            if !loss.is_finite() {
                return Err(Error::Diverged { step, loss });
            }
            clip(&mut grads, hyper.grad_clip);
            optimizer_step(&mut store, &grads, hyper, step)?;
            log.step_losses.push(loss);
            log.learning_rates.push(hyper.learning_rate * lr_schedule(step, hyper));
            log.elapsed_s.push(started.elapsed().as_secs_f64());
            let epoch_end = chunk.as_ptr_range().end == order.as_ptr_range().end;
            let due = match hyper.eval_every {
                Some(k) => step % k == 0,
                None => epoch_end,
            };
            if due || step >= max_steps {
                let v = corpus_loss(model, &store, valid, hyper.batch_size)?;
                if !v.is_finite() {
                    return Err(Error::Diverged { step, loss: v });
                }
                log.validation.push((step, v));
                if v < best.0 {
                    best = (v, store.clone());
                    log.best_step = step;
                    since_best = 0;
                } else {
                    since_best += 1;
                    if hyper.patience.is_some_and(|p| since_best >= p) {
                        log.stopped_early = true;
                        log.epochs += usize::from(epoch_end);
                        break 'epochs;
                    }
                }
            }
            if step >= max_steps {
                log.epochs += usize::from(epoch_end);
                break 'epochs;
            }
        }
        log.epochs += 1;
    }
    let checkpoint = Checkpoint {
        config: model.config.clone(),
        store: best.1,
        step,
        validation_history: log.validation.iter().map(|&(_, v)| v).collect(),
    };
    Ok((checkpoint, log))
}

/// Teacher-forced next-character accuracy, split by position within the
/// decoder block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OffsetAccuracy {
    /// `(hits, total)` per within-block offset.
    pub per_offset: Vec<(u64, u64)>,
}

impl OffsetAccuracy {
    pub fn offset(&self, k: usize) -> f64 {
        let (h, n) = self.per_offset[k];
        if n == 0 {
            0.0
        } else {
            h as f64 / n as f64
        }
    }

    pub fn overall(&self) -> f64 {
        let (h, n) = self.per_offset.iter().fold((0, 0), |(a, b), &(h, n)| (a + h, b + n));
        if n == 0 {
            0.0
        } else {
            h as f64 / n as f64
        }
    }

    /// Accuracy pooled over the listed offsets.
    pub fn pooled(&self, offsets: &[usize]) -> f64 {
        let (h, n) = offsets
            .iter()
            .map(|&k| self.per_offset[k])
            .fold((0, 0), |(a, b), (h, n)| (a + h, b + n));
        if n == 0 {
            0.0
        } else {
            h as f64 / n as f64
        }
    }
}

pub fn teacher_forced_accuracy(
    model: &Seq2Seq,
    store: &ParamStore,
    pairs: &[ParallelPair],
    batch_size: usize,
) -> OffsetAccuracy {
    let delta = model.delta();
    let mut per_offset = vec![(0u64, 0u64); delta];
    for chunk in pairs.chunks(batch_size.max(1)) {
        let batch = Batch::new(model, chunk);
        let mut g = Graph::<f32>::new(store);
        let logits = model.logits(&mut g, &batch);
        let lv = g.value(logits);
        let mut row = 0;
        for &n in &batch.tgt_lens {
            for t in 0..n {
                if let Some(target) = batch.targets[row + t] {
                    let slot = &mut per_offset[t % delta];
                    slot.1 += 1;
                    if lv.argmax_row(row + t) == target {
                        slot.0 += 1;
                    }
                }
            }
            row += n;
        }
    }
    OffsetAccuracy { per_offset }
}
