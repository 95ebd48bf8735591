use rand::Rng;

use super::config::DownsamplerConfig;
use super::positions::segment_positions;
use crate::numcore::nn::conv1d;
use crate::numcore::{ConvPadding, Graph, Init, ParamId, ParamStore, Real, Segments, Var};

/// Causal multi-width convolutions, relu, then max-pooling over δ rows.
#[derive(Clone, Debug)]
pub struct Lee {
    pub config: DownsamplerConfig,
    pub embedding: ParamId,
    /// `(width, weight [width·d, channels], bias [1, channels])` per width.
    pub convs: Vec<(usize, ParamId, ParamId)>,
}

/// Splits `d` output channels across `k` widths, remainder to the first ones.
pub fn channel_split(d: usize, k: usize) -> Vec<usize> {
    (0..k).map(|i| d / k + usize::from(i < d % k)).collect()
}

impl Lee {
    pub fn new(config: &DownsamplerConfig, prefix: &str, store: &mut ParamStore, rng: &mut impl Rng) -> Self {
        let d = config.model_dim;
        let embedding = store.add(
            format!("{prefix}.embedding"),
            config.vocab_size,
            d,
            Init::Normal(1.0),
            rng,
        );
        let widths = &config.lee_kernel_widths;
        let convs = widths
            .iter()
            .zip(channel_split(d, widths.len()))
            .map(|(&w, ch)| {
                let bound = 1.0 / ((w * d) as f32).sqrt();
                let weight = store.add(format!("{prefix}.conv{w}.weight"), w * d, ch, Init::Uniform(bound), rng);
                let bias = store.add(format!("{prefix}.conv{w}.bias"), 1, ch, Init::Uniform(bound), rng);
                (w, weight, bias)
            })
            .collect();
        Self {
            config: config.clone(),
            embedding,
            convs,
        }
    }

    pub fn embed<T: Real>(&self, g: &mut Graph<'_, T>, ids: &[usize], segs: &Segments) -> Var {
        let table = g.param(self.embedding);
        let e = g.gather(table, ids);
        let p = g.input(segment_positions(segs, self.config.model_dim));
        g.add(e, p)
    }

    pub fn forward_embedded<T: Real>(&self, g: &mut Graph<'_, T>, e: Var, segs: &Segments) -> Var {
        let outs: Vec<Var> = self
            .convs
            .iter()
            .map(|&(w, weight, bias)| {
                let weight = g.param(weight);
                let bias = g.param(bias);
                conv1d(g, e, segs, weight, Some(bias), w, ConvPadding::Causal)
            })
            .collect();
        let h = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs) };
        let h = g.relu(h);
        g.max_pool_rows(h, self.config.delta)
    }
}
