use rand::Rng;

use crate::numcore::nn::linear;
use crate::numcore::{Graph, Init, ParamId, ParamStore, Real, Var};

/// One affine map per block to `δ` character distributions.
#[derive(Clone, Debug)]
pub struct Upsampler {
    pub delta: usize,
    pub out_vocab: usize,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Upsampler {
    pub fn new(
        model_dim: usize,
        delta: usize,
        out_vocab: usize,
        prefix: &str,
        store: &mut ParamStore,
        rng: &mut impl Rng,
    ) -> Self {
        let bound = 1.0 / (model_dim as f32).sqrt();
        let cols = delta * out_vocab;
        Self {
            delta,
            out_vocab,
            weight: store.add(format!("{prefix}.weight"), model_dim, cols, Init::Uniform(bound), rng),
            bias: store.add(format!("{prefix}.bias"), 1, cols, Init::Uniform(bound), rng),
        }
    }

    /// `blocks [m, d]` to logits `[m·δ, V]`; row `bδ + k` predicts target
    /// position `bδ + k`.
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, blocks: Var) -> Var {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let y = linear(g, blocks, w, Some(b));
        let m = g.shape(blocks).0;
        g.reshape(y, m * self.delta, self.out_vocab)
    }
}
