use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::generate::{decode, Feedback};
use super::model::{build_model, Batch};
use super::train::batch_gradients;
use crate::bytedata::{ByteSequence, ParallelPair};
use crate::error::{Error, Result};
use crate::numcore::{optimizer_step, TrainHyper};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub label: String,
    pub ms_per_step: f64,
    pub ms_per_generation: f64,
    pub steps: usize,
    pub generations: usize,
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.total_cmp(b));
    let n = xs.len();
    if n == 0 {
        0.0
    } else if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    }
}

/// Median wall-clock time of an optimizer step on `batch_size` pairs and of
/// one greedy generation, per configuration. Every variant sees the same
/// batches in the same order, and steps are taken round-robin across the
/// configurations so that machine drift hits them alike.
pub fn benchmark_step_time(
    configs: &[ModelConfig],
    corpus: &[ParallelPair],
    hyper: &TrainHyper,
    steps: usize,
    generations: usize,
    max_len: usize,
) -> Result<Vec<BenchRow>> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut models = Vec::with_capacity(configs.len());
    for cfg in configs {
        models.push(build_model(cfg, hyper.seed)?);
    }
    let mut times = vec![Vec::with_capacity(steps); configs.len()];
    for step in 1..=steps {
        let start = (step - 1) * hyper.batch_size % corpus.len();
        let pairs: Vec<ParallelPair> = (0..hyper.batch_size)
            .map(|k| corpus[(start + k) % corpus.len()].clone())
            .collect();
        for ((model, store), t) in models.iter_mut().zip(&mut times) {
            let t0 = Instant::now();
            let batch = Batch::new(model, &pairs);
            let (_, grads) = batch_gradients(model, store, &batch, hyper.label_smoothing, Some(step as u64))?;
            optimizer_step(store, &grads, hyper, step)?;
            t.push(t0.elapsed().as_secs_f64() * 1e3);
        }
    }
    let mut gen_times = vec![Vec::with_capacity(generations); configs.len()];
    for k in 0..generations {
        let src: ByteSequence = corpus[k % corpus.len()].src.clone();
        for ((model, store), t) in models.iter().zip(&mut gen_times) {
            let t0 = Instant::now();
            decode::<f32>(
                model,
                store,
                std::slice::from_ref(&src),
                max_len,
                Feedback::Greedy,
                false,
            );
            t.push(t0.elapsed().as_secs_f64() * 1e3);
        }
    }
    Ok(configs
        .iter()
        .zip(times.into_iter().zip(gen_times))
        .map(|(cfg, (t, gt))| BenchRow {
            label: cfg.label(),
            ms_per_step: median(t),
            ms_per_generation: median(gt),
            steps,
            generations,
        })
        .collect())
}
