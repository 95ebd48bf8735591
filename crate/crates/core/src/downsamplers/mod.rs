//! Block downsamplers: GBST and its causal variants, the Lee convolutional
//! downsampler, positional signals, and the linear upsampler.

pub mod candidates;
pub mod config;
pub mod gbst;
pub mod lee;
pub mod positions;
pub mod upsample;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub use candidates::{masked_ngram_candidates, ngram_candidates};
pub use config::{default_orders, kept_orders, DownsamplerConfig, PosEmbedding, Variant};
pub use gbst::Gbst;
pub use lee::Lee;
pub use positions::sinusoidal_table;
pub use upsample::Upsampler;

use crate::bytedata::BOS;
use crate::error::{Error, Result};
use crate::numcore::{Graph, ParamId, ParamSource, ParamStore, Real, Segments, Tensor, Var};

/// Per-block representations; block `b` covers positions `[bδ, (b+1)δ)`.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockTensor {
    pub blocks: Tensor<f32>,
    pub delta: usize,
}

#[derive(Clone, Debug)]
pub enum Downsampler {
    Gbst(Gbst),
    Lee(Lee),
}

impl Downsampler {
    pub fn new(config: &DownsamplerConfig, prefix: &str, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        Ok(match config.variant {
            Variant::Lee => Downsampler::Lee(Lee::new(config, prefix, store, rng)),
            _ => Downsampler::Gbst(Gbst::new(config, prefix, store, rng)),
        })
    }

    pub fn config(&self) -> &DownsamplerConfig {
        match self {
            Downsampler::Gbst(m) => &m.config,
            Downsampler::Lee(m) => &m.config,
        }
    }

    pub fn delta(&self) -> usize {
        self.config().delta
    }

    pub fn embedding(&self) -> ParamId {
        match self {
            Downsampler::Gbst(m) => m.embedding,
            Downsampler::Lee(m) => m.embedding,
        }
    }

    /// Embedded rows (token embedding plus any additive positional table).
    pub fn embed<T: Real>(&self, g: &mut Graph<'_, T>, ids: &[usize], segs: &Segments) -> Var {
        match self {
            Downsampler::Gbst(m) => m.embed(g, ids, segs),
            Downsampler::Lee(m) => m.embed(g, ids, segs),
        }
    }

    pub fn forward_embedded<T: Real>(&self, g: &mut Graph<'_, T>, e: Var, segs: &Segments) -> Var {
        match self {
            Downsampler::Gbst(m) => m.forward_embedded(g, e, segs),
            Downsampler::Lee(m) => m.forward_embedded(g, e, segs),
        }
    }

    /// Packed ids to packed blocks `[Σ len_i / δ, d]`. Every segment length
    /// must be a multiple of δ.
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, ids: &[usize], segs: &Segments) -> Var {
        let e = self.embed(g, ids, segs);
        self.forward_embedded(g, e, segs)
    }

    /// Single-sequence convenience wrapper.
    pub fn downsample(&self, params: &dyn ParamSource<f32>, tokens: &[u32]) -> Result<BlockTensor> {
        let delta = self.delta();
        if tokens.len() % delta != 0 {
            return Err(Error::NotBlockAligned {
                len: tokens.len(),
                delta,
            });
        }
        let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let vocab = self.config().vocab_size;
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::TargetOutOfRange { id: bad, vocab });
        }
        let mut g = Graph::new(params);
        let out = self.forward(&mut g, &ids, &Segments::single(ids.len()));
        Ok(BlockTensor {
            blocks: g.value(out).clone(),
            delta,
        })
    }
}

/// Decoder input for gold `tokens`: `BOS × (p·δ)` followed by all but the last
/// block of `tokens`, where `p` is the variant's pad multiplier.
///
/// The result has `|tokens| + (p−1)·δ` positions; its first `|tokens|/δ`
/// blocks predict the target blocks. Keeping the extra block for `p = 2`
/// makes every predicting block see the same neighbouring context during
/// training as during generation.
pub fn causal_context(tokens: &[u32], delta: usize, variant: Variant) -> Vec<u32> {
    causal_context_with(tokens, delta, variant.pad_multiplier())
}

pub fn causal_context_with(tokens: &[u32], delta: usize, pad_multiplier: usize) -> Vec<u32> {
    let mut ctx = vec![BOS; pad_multiplier * delta];
    ctx.extend_from_slice(&tokens[..tokens.len().saturating_sub(delta)]);
    ctx
}

/// `sens[j][b]`: whether block `b` moves by more than `tol` when embedded row
/// `j` receives a random bump, for parameters `params` and input `ids`.
pub fn perturbation_sensitivity(
    ds: &Downsampler,
    params: &dyn ParamSource<f64>,
    ids: &[usize],
    seed: u64,
    tol: f64,
) -> Vec<Vec<bool>> {
    let segs = Segments::single(ids.len());
    let mut g = Graph::new(params);
    let e = ds.embed(&mut g, ids, &segs);
    let base_e = g.value(e).clone();
    let base_out = ds.forward_embedded(&mut g, e, &segs);
    let base = g.value(base_out).clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..ids.len())
        .map(|j| {
            let mut bumped = base_e.clone();
            for x in bumped.row_mut(j) {
                *x += rng.sample::<f64, _>(StandardNormal);
            }
            let mut g = Graph::new(params);
            let e = g.input(bumped);
            let out = ds.forward_embedded(&mut g, e, &segs);
            let moved = g.value(out);
            (0..base.rows)
                .map(|b| moved.row(b).iter().zip(base.row(b)).any(|(x, y)| (x - y).abs() > tol))
                .collect()
        })
        .collect()
}

/// Random downsampler with fresh parameters, for structural checks.
pub fn random_instance(config: &DownsamplerConfig, seed: u64) -> Result<(Downsampler, ParamStore)> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ds = Downsampler::new(config, "ds", &mut store, &mut rng)?;
    Ok((ds, store))
}

/// `(j, b)` pairs where block `b` depends on input position `j` although
/// `j` carries a character that block `b` must not see: with `p·δ` context
/// padding, position `j` holds target `j − pδ`, which block `b` may only see
/// when `j − pδ < bδ`.
pub fn causality_violations(
    config: &DownsamplerConfig,
    pad_multiplier: usize,
    len: usize,
    seeds: &[u64],
) -> Result<Vec<(usize, usize)>> {
    let delta = config.delta;
    if len % delta != 0 {
        return Err(Error::NotBlockAligned { len, delta });
    }
    let mut found = std::collections::BTreeSet::new();
    for &seed in seeds {
        let (ds, store) = random_instance(config, seed)?;
        let table = store.to_table::<f64>();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let ids: Vec<usize> = (0..len).map(|_| rng.gen_range(0..config.vocab_size)).collect();
        let sens = perturbation_sensitivity(&ds, &table, &ids, seed, 1e-6);
        for (j, row) in sens.iter().enumerate() {
            for (b, &moved) in row.iter().enumerate() {
                if moved && j >= pad_multiplier * delta + b * delta {
                    found.insert((j, b));
                }
            }
        }
    }
    Ok(found.into_iter().collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::{grad_check, gradcheck::projection_loss, GradCheckConfig};

    fn sin_cfg(delta: usize, variant: Variant) -> DownsamplerConfig {
        DownsamplerConfig {
            vocab_size: 20,
            ..DownsamplerConfig::new(delta, variant, PosEmbedding::Sinusoidal, 6)
        }
    }

    #[test]
    fn causal_context_examples() {
        let t = [10, 11, 12, 13, 14, 15];
        assert_eq!(
            causal_context(&t, 3, Variant::NonCausal),
            vec![BOS, BOS, BOS, 10, 11, 12]
        );
        assert_eq!(causal_context(&t, 1, Variant::Removal), vec![BOS, 10, 11, 12, 13, 14]);
        let p = causal_context(&t, 3, Variant::Padding);
        assert_eq!(&p[..6], &[BOS; 6]);
        assert_eq!(&p[6..], &[10, 11, 12]);
    }

    #[test]
    fn delta_one_is_identity() {
        for pos in [PosEmbedding::Sinusoidal, PosEmbedding::Conv] {
            let cfg = DownsamplerConfig {
                vocab_size: 20,
                ..DownsamplerConfig::new(1, Variant::NonCausal, pos, 6)
            };
            let (ds, store) = random_instance(&cfg, 3).unwrap();
            let ids = [4usize, 7, 7, 19, 0];
            let segs = Segments::single(ids.len());
            let mut g = Graph::<f32>::new(&store);
            let e = ds.embed(&mut g, &ids, &segs);
            let out = ds.forward_embedded(&mut g, e, &segs);
            let expected = match &ds {
                Downsampler::Gbst(m) => m.mix(&mut g, e, &segs),
                Downsampler::Lee(_) => unreachable!(),
            };
            assert_eq!(g.value(out), g.value(expected));
            if pos == PosEmbedding::Sinusoidal {
                assert_eq!(g.value(out), g.value(e));
            }
        }
    }

    #[test]
    fn block_shapes() {
        let (ds, store) = random_instance(&sin_cfg(3, Variant::NonCausal), 1).unwrap();
        let bt = ds.downsample(&store, &[5; 12]).unwrap();
        assert_eq!(bt.blocks.shape(), (4, 6));
        assert!(matches!(
            ds.downsample(&store, &[5; 11]),
            Err(Error::NotBlockAligned { .. })
        ));
        let lee = DownsamplerConfig {
            lee_kernel_widths: vec![1, 2, 3],
            ..sin_cfg(2, Variant::Lee)
        };
        let (ds, store) = random_instance(&lee, 1).unwrap();
        assert_eq!(ds.downsample(&store, &[5; 8]).unwrap().blocks.shape(), (4, 6));
    }

    #[test]
    fn mixing_weights_sum_to_one() {
        let (ds, store) = random_instance(&sin_cfg(4, Variant::Masking), 2).unwrap();
        let Downsampler::Gbst(m) = &ds else { unreachable!() };
        let ids: Vec<usize> = (0..12).map(|i| i % 20).collect();
        let segs = Segments::single(12);
        let mut g = Graph::<f64>::new(&store);
        let e = m.embed(&mut g, &ids, &segs);
        let cands = m.candidates(&mut g, e, &segs);
        let p = m.order_probabilities(&mut g, &cands);
        let p = g.value(p);
        assert_eq!(p.cols, 4);
        for r in 0..p.rows {
            assert!((p.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn lee_constant_input_gives_constant_blocks() {
        let cfg = DownsamplerConfig {
            pos_embedding: PosEmbedding::Sinusoidal,
            ..sin_cfg(2, Variant::Lee)
        };
        let (ds, store) = random_instance(&cfg, 4).unwrap();
        let Downsampler::Lee(m) = &ds else { unreachable!() };
        // Constant embedded rows (no positional table): after the first
        // max(width) − 1 warm-up rows every block is identical.
        let segs = Segments::single(16);
        let mut g = Graph::<f64>::new(&store);
        let row: Vec<f64> = (0..6).map(|c| c as f64 * 0.3 - 0.7).collect();
        let rows: Vec<Vec<f64>> = (0..16).map(|_| row.clone()).collect();
        let e = g.input(Tensor::from_rows(&rows));
        let out = m.forward_embedded(&mut g, e, &segs);
        let v = g.value(out);
        for b in 3..v.rows {
            assert_eq!(v.row(b), v.row(2));
        }
    }

    #[test]
    fn zero_kernel_conv_signal_is_zero() {
        let cfg = DownsamplerConfig {
            vocab_size: 20,
            ..DownsamplerConfig::new(2, Variant::NonCausal, PosEmbedding::Conv, 4)
        };
        let (ds, mut store) = random_instance(&cfg, 5).unwrap();
        let Downsampler::Gbst(m) = &ds else { unreachable!() };
        let (k, b) = m.pos_conv.unwrap();
        store.data_mut(k).fill(0.0);
        store.data_mut(b).fill(0.0);
        let with_conv = ds.downsample(&store, &[3, 4, 5, 6]).unwrap();
        let plain = Gbst {
            pos_conv: None,
            ..m.clone()
        };
        let plain = Downsampler::Gbst(plain).downsample(&store, &[3, 4, 5, 6]).unwrap();
        assert_eq!(with_conv, plain);
    }

    #[test]
    fn causal_variants_have_no_violations() {
        for delta in 2..=4 {
            for variant in [Variant::Removal, Variant::Masking, Variant::Lee, Variant::Padding] {
                let cfg = sin_cfg(delta, variant);
                let v = causality_violations(&cfg, variant.pad_multiplier(), 4 * delta, &[1, 2]).unwrap();
                assert!(v.is_empty(), "{variant} δ={delta}: {v:?}");
            }
        }
    }

    #[test]
    fn non_causal_conv_violates() {
        let cfg = DownsamplerConfig {
            vocab_size: 20,
            ..DownsamplerConfig::new(2, Variant::NonCausal, PosEmbedding::Conv, 6)
        };
        assert!(!causality_violations(&cfg, 1, 8, &[1]).unwrap().is_empty());
    }

    #[test]
    fn gbst_and_upsampler_gradients() {
        let cfg = DownsamplerConfig {
            vocab_size: 10,
            ..DownsamplerConfig::new(2, Variant::NonCausal, PosEmbedding::Conv, 8)
        };
        let (ds, mut store) = random_instance(&cfg, 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let up = Upsampler::new(8, 2, 5, "up", &mut store, &mut rng);
        let ids = [1usize, 2, 3, 4, 5, 6, 7, 8];
        let f = |g: &mut Graph<'_, f64>| {
            let segs = Segments::single(ids.len());
            let blocks = ds.forward(g, &ids, &segs);
            let logits = up.forward(g, blocks);
            projection_loss(g, logits, 1)
        };
        let report = grad_check(
            &store,
            f,
            GradCheckConfig {
                eps: 1e-6,
                ..Default::default()
            },
        );
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn zero_upsampler_gives_uniform() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let up = Upsampler::new(4, 4, 100, "up", &mut store, &mut rng);
        store.data_mut(up.weight).fill(0.0);
        store.data_mut(up.bias).fill(0.0);
        let mut g = Graph::<f64>::new(&store);
        let blocks = g.input(Tensor::full(3, 4, 0.7));
        let logits = up.forward(&mut g, blocks);
        assert_eq!(g.shape(logits), (12, 100));
        let p = g.softmax(logits);
        assert!(g.value(p).data.iter().all(|&x| (x - 0.01).abs() < 1e-12));
    }
}
