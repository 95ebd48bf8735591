use std::sync::Arc;

use rand::Rng;

use super::candidates::ngram_mix;
use super::config::{DownsamplerConfig, PosEmbedding, Variant};
use super::positions::segment_positions;
use crate::numcore::nn::{block_mean_mix, depthwise_conv1d};
use crate::numcore::{ConvPadding, Graph, Init, ParamId, ParamStore, Real, Segments, Var};

/// Soft n-gram mixing followed by block mean pooling.
#[derive(Clone, Debug)]
pub struct Gbst {
    pub config: DownsamplerConfig,
    pub orders: Vec<usize>,
    pub embedding: ParamId,
    pub scorer: ParamId,
    /// Depthwise kernel `[width, d]` and bias of the positional convolution.
    pub pos_conv: Option<(ParamId, ParamId)>,
}

impl Gbst {
    pub fn new(config: &DownsamplerConfig, prefix: &str, store: &mut ParamStore, rng: &mut impl Rng) -> Self {
        let d = config.model_dim;
        let embedding = store.add(
            format!("{prefix}.embedding"),
            config.vocab_size,
            d,
            Init::Normal(1.0),
            rng,
        );
        let bound = 1.0 / (d as f32).sqrt();
        let scorer = store.add(format!("{prefix}.scorer"), d, 1, Init::Uniform(bound), rng);
        let pos_conv = (config.pos_embedding == PosEmbedding::Conv).then(|| {
            let w = config.resolved_conv_kernel();
            let bound = 1.0 / (w as f32).sqrt();
            (
                store.add(format!("{prefix}.pos_conv.kernel"), w, d, Init::Uniform(bound), rng),
                store.add(format!("{prefix}.pos_conv.bias"), 1, d, Init::Uniform(bound), rng),
            )
        });
        Self {
            config: config.clone(),
            orders: config.resolved_orders(),
            embedding,
            scorer,
            pos_conv,
        }
    }

    /// Token embeddings, plus the sinusoidal table when configured.
    pub fn embed<T: Real>(&self, g: &mut Graph<'_, T>, ids: &[usize], segs: &Segments) -> Var {
        let table = g.param(self.embedding);
        let e = g.gather(table, ids);
        match self.config.pos_embedding {
            PosEmbedding::Sinusoidal => {
                let p = g.input(segment_positions(segs, self.config.model_dim));
                g.add(e, p)
            }
            PosEmbedding::Conv => e,
        }
    }

    /// Candidates `C_n` for every kept order.
    pub fn candidates<T: Real>(&self, g: &mut Graph<'_, T>, e: Var, segs: &Segments) -> Vec<Var> {
        let mask = (self.config.variant == Variant::Masking).then_some(self.config.delta);
        self.orders
            .iter()
            .map(|&n| {
                if n == 1 {
                    e
                } else {
                    g.row_mix(e, Arc::new(ngram_mix(segs, n, mask)))
                }
            })
            .collect()
    }

    /// Row softmax over per-order scores `C_n · w`.
    pub fn order_probabilities<T: Real>(&self, g: &mut Graph<'_, T>, cands: &[Var]) -> Var {
        let w = g.param(self.scorer);
        let scores: Vec<Var> = cands.iter().map(|&c| g.matmul(c, w)).collect();
        let s = if scores.len() == 1 {
            scores[0]
        } else {
            g.concat_cols(&scores)
        };
        g.softmax(s)
    }

    /// Per-position mixed representation `X` before pooling.
    pub fn mix<T: Real>(&self, g: &mut Graph<'_, T>, e: Var, segs: &Segments) -> Var {
        let cands = self.candidates(g, e, segs);
        // A single candidate has mixing weight exactly 1.
        let mut x = if cands.len() == 1 {
            cands[0]
        } else {
            let p = self.order_probabilities(g, &cands);
            let terms: Vec<Var> = cands
                .iter()
                .enumerate()
                .map(|(k, &c)| {
                    let pk = g.slice_cols(p, k, 1);
                    g.mul_col(c, pk)
                })
                .collect();
            g.add_all(&terms)
        };
        if let Some((kernel, bias)) = self.pos_conv {
            let kernel = g.param(kernel);
            let bias = g.param(bias);
            let signal = depthwise_conv1d(g, e, segs, kernel, Some(bias), ConvPadding::Centered);
            x = g.add(x, signal);
        }
        x
    }

    pub fn forward_embedded<T: Real>(&self, g: &mut Graph<'_, T>, e: Var, segs: &Segments) -> Var {
        let x = self.mix(g, e, segs);
        g.row_mix(x, Arc::new(block_mean_mix(segs, self.config.delta)))
    }
}
