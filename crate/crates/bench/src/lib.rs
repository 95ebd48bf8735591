//! Fixtures shared by the step-time benchmarks.

use gbstlab_core::bytedata::{gen_toy_pairs, ParallelPair, ToyTask};
use gbstlab_core::downsamplers::Variant;
use gbstlab_core::seq2seq::{HeadKind, ModelConfig, ModelDims};

/// Small model so a full criterion run stays in the minutes range.
pub fn bench_dims() -> ModelDims {
    ModelDims {
        encoder_layers: 2,
        decoder_layers: 2,
        model_dim: 64,
        heads: 4,
        ffn_dim: 128,
        dropout: 0.1,
    }
}

/// Removal decoders at each δ, plus a two-step head at δ = 1 as the
/// head-only baseline.
pub fn bench_configs(deltas: &[usize]) -> Vec<ModelConfig> {
    let mut out: Vec<ModelConfig> = deltas
        .iter()
        .map(|&d| ModelConfig::with_decoder(bench_dims(), d, Variant::Removal))
        .collect();
    let mut two_step = ModelConfig::with_decoder(bench_dims(), 1, Variant::Removal);
    two_step.head = HeadKind::TwoStep;
    out.push(two_step);
    out
}

/// Copy pairs of exactly `char_len` characters.
pub fn fixed_length_corpus(count: usize, char_len: usize, seed: u64) -> Vec<ParallelPair> {
    gen_toy_pairs(ToyTask::Copy, count, char_len..=char_len, 26, seed).expect("valid toy corpus")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn configs_are_valid() {
        let cs = bench_configs(&[1, 2, 4]);
        assert_eq!(cs.len(), 4);
        for c in &cs {
            c.validate().unwrap();
        }
        assert_eq!(cs[3].head, HeadKind::TwoStep);
        assert_eq!(fixed_length_corpus(3, 128, 0)[0].src.ids.len(), 129);
    }
}
