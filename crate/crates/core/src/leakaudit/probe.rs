use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::binom::binom_pvalue;
use super::report::{LeakReport, PositionStat};
use crate::bytedata::{sample_probe_pair, ProbePair, ProbeSpec, BYTE_OFFSET};
use crate::downsamplers::{Downsampler, DownsamplerConfig, Upsampler};
use crate::error::{Error, Result};
use crate::numcore::Real;
use crate::numcore::{optimizer_step, GradBuffer, Graph, ParamStore, RowMix, Segments, TrainHyper, Var};

/// Downsampler followed by the linear upsampler, predicting random targets.
#[derive(Clone, Debug)]
pub struct ProbeModel {
    pub spec: ProbeSpec,
    pub downsampler: Downsampler,
    pub upsampler: Upsampler,
    pub store: ParamStore,
}

/// Streams used by a probe run, derived from one seed.
fn stream(seed: u64, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(salt))
}

impl ProbeModel {
    /// The downsampler's vocabulary is resized to cover the probe ids.
    pub fn new(config: &DownsamplerConfig, spec: &ProbeSpec) -> Result<Self> {
        spec.validate()?;
        if config.delta != spec.delta {
            return Err(Error::Config(format!(
                "downsampler delta {} differs from probe delta {}",
                config.delta, spec.delta
            )));
        }
        let config = DownsamplerConfig {
            vocab_size: BYTE_OFFSET as usize + spec.probe_vocab,
            ..config.clone()
        };
        let mut store = ParamStore::new();
        let mut rng = stream(spec.seed, 1);
        let downsampler = Downsampler::new(&config, "probe.ds", &mut store, &mut rng)?;
        let upsampler = Upsampler::new(
            config.model_dim,
            spec.delta,
            spec.probe_vocab,
            "probe.up",
            &mut store,
            &mut rng,
        );
        Ok(Self {
            spec: spec.clone(),
            downsampler,
            upsampler,
            store,
        })
    }

    /// Logits `[batch · seq_len, probe_vocab]` for a batch of pairs.
    pub fn logits<T: Real>(&self, g: &mut Graph<'_, T>, pairs: &[ProbePair]) -> Var {
        let delta = self.spec.delta;
        let in_len = self.spec.input_len();
        let ids: Vec<usize> = pairs
            .iter()
            .flat_map(|p| p.input.ids.iter().map(|&i| i as usize))
            .collect();
        let segs = Segments::from_lengths(&vec![in_len; pairs.len()]);
        let blocks = self.downsampler.forward(g, &ids, &segs);
        let per_in = in_len / delta;
        let per_out = self.spec.seq_len / delta;
        let keep = RowMix::gather((0..pairs.len()).flat_map(|s| (0..per_out).map(move |b| s * per_in + b)));
        let blocks = g.row_mix(blocks, Arc::new(keep));
        self.upsampler.forward(g, blocks)
    }

    fn targets(pairs: &[ProbePair]) -> Vec<Option<usize>> {
        pairs
            .iter()
            .flat_map(|p| p.target.ids.iter().map(|&t| Some((t - BYTE_OFFSET) as usize)))
            .collect()
    }

    pub fn sample_batch(&self, rng: &mut ChaCha8Rng, size: usize) -> Vec<ProbePair> {
        (0..size).map(|_| sample_probe_pair(&self.spec, rng)).collect()
    }
}

/// Trains a fresh probe on freshly sampled batches. Loss is cross-entropy
/// over every target position. Returns the model and the per-step losses.
pub fn train_probe(config: &DownsamplerConfig, spec: &ProbeSpec, hyper: &TrainHyper) -> Result<(ProbeModel, Vec<f32>)> {
    hyper.validate()?;
    let mut model = ProbeModel::new(config, spec)?;
    let steps = hyper.max_steps.unwrap_or(5000);
    let mut data_rng = stream(spec.seed, 2);
    let mut losses = Vec::with_capacity(steps);
    for step in 1..=steps {
        let batch = model.sample_batch(&mut data_rng, hyper.batch_size);
        let (loss, grads) = {
            let mut g = Graph::<f32>::new(&model.store);
            let logits = model.logits(&mut g, &batch);
            let loss = g.smoothed_ce(logits, &ProbeModel::targets(&batch), hyper.label_smoothing)?;
            let value = g.value(loss).item();
            let back = g.backward(loss);
            let mut buf = GradBuffer::zeros_like(&model.store);
            for (id, grad) in back.params() {
                buf.accumulate(id, grad);
            }
            (value, buf)
        };
        if !loss.is_finite() {
            return Err(Error::Diverged {
                step,
                loss: loss as f64,
            });
        }
        optimizer_step(&mut model.store, &grads, hyper, step)?;
        losses.push(loss);
    }
    Ok((model, losses))
}

/// Per-position accuracy over `n_batches · batch_size` fresh samples drawn
/// from `eval_seed`.
pub fn eval_probe(model: &ProbeModel, n_batches: usize, batch_size: usize, eval_seed: u64) -> LeakReport {
    let spec = &model.spec;
    let mut rng = stream(eval_seed, 3);
    let mut hits = vec![0u64; spec.seq_len];
    let mut n = 0u64;
    for _ in 0..n_batches {
        let batch = model.sample_batch(&mut rng, batch_size);
        let mut g = Graph::<f32>::new(&model.store);
        let logits = model.logits(&mut g, &batch);
        let lv = g.value(logits);
        for (s, pair) in batch.iter().enumerate() {
            for (t, &target) in pair.target.ids.iter().enumerate() {
                if lv.argmax_row(s * spec.seq_len + t) == (target - BYTE_OFFSET) as usize {
                    hits[t] += 1;
                }
            }
        }
        n += batch_size as u64;
    }
    let chance = spec.chance();
    let positions = hits
        .iter()
        .enumerate()
        .map(|(t, &k)| PositionStat::new(t + 1, k, n, binom_pvalue(k, n, chance)))
        .collect();
    LeakReport::new(model.downsampler.config(), spec, chance, positions)
}
