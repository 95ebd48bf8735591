use std::collections::BTreeSet;

use super::model::{Batch, Seq2Seq};
use crate::bytedata::{ParallelPair, BYTE_OFFSET};
use crate::numcore::{Graph, ParamStore, ParamTable, Tensor};

fn teacher_forced_logits(model: &Seq2Seq, table: &ParamTable<f64>, pair: &ParallelPair) -> Tensor<f64> {
    let batch = Batch::new(model, std::slice::from_ref(pair));
    let mut g = Graph::new(table);
    let y = model.logits(&mut g, &batch);
    g.value(y).clone()
}

/// Within-block offsets whose teacher-forced prediction moves when the very
/// character it predicts is replaced, measured on `pair`. Empty for a causal
/// decoder.
pub fn leaked_offsets(model: &Seq2Seq, store: &ParamStore, pair: &ParallelPair) -> Vec<usize> {
    let table = store.to_table::<f64>();
    let base = teacher_forced_logits(model, &table, pair);
    let delta = model.delta();
    let (a, b) = (BYTE_OFFSET + b'a' as u32, BYTE_OFFSET + b'b' as u32);
    let mut out = BTreeSet::new();
    for t in 0..pair.tgt.len() {
        let mut p = pair.clone();
        p.tgt.ids[t] = if p.tgt.ids[t] == a { b } else { a };
        let y = teacher_forced_logits(model, &table, &p);
        if base.row(t).iter().zip(y.row(t)).any(|(u, v)| (u - v).abs() > 1e-12) {
            out.insert(t % delta);
        }
    }
    out.into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bytedata::byte_encode;
    use crate::downsamplers::{PosEmbedding, Variant};
    use crate::seq2seq::{build_model, ModelConfig, ModelDims};

    fn dims() -> ModelDims {
        ModelDims {
            encoder_layers: 1,
            decoder_layers: 1,
            model_dim: 8,
            heads: 2,
            ffn_dim: 16,
            dropout: 0.0,
        }
    }

    fn pair() -> ParallelPair {
        ParallelPair {
            src: byte_encode("source", true),
            tgt: byte_encode("a target line", true),
        }
    }

    #[test]
    fn causal_decoders_leak_nothing() {
        for (delta, variant) in [
            (1, Variant::Removal),
            (2, Variant::Removal),
            (3, Variant::Masking),
            (2, Variant::Padding),
            (2, Variant::Lee),
        ] {
            let (m, s) = build_model(&ModelConfig::with_decoder(dims(), delta, variant), 0).unwrap();
            assert!(leaked_offsets(&m, &s, &pair()).is_empty(), "{variant} δ={delta}");
        }
    }

    #[test]
    fn non_causal_conv_leaks_all_but_last_offset() {
        for delta in [2, 3, 4] {
            let cfg = ModelConfig::with_decoder(dims(), delta, Variant::NonCausal);
            assert_eq!(cfg.decoder.pos_embedding, PosEmbedding::Conv);
            let (m, s) = build_model(&cfg, 0).unwrap();
            assert_eq!(leaked_offsets(&m, &s, &pair()), (0..delta - 1).collect::<Vec<_>>());
        }
    }
}
