use std::sync::Arc;

use super::config::HeadKind;
use super::model::Seq2Seq;
use crate::bytedata::{round_up, ByteSequence, BOS, EOS, PAD};
use crate::numcore::{Graph, ParamSource, Real, RowMix, Segments, Tensor};

/// Output of greedy decoding for one source.
#[derive(Clone, Debug, PartialEq)]
pub struct Generation {
    /// Emitted characters, without EOS.
    pub output: ByteSequence,
    /// No EOS within `max_len` characters.
    pub truncated: bool,
    /// Logits of each consumed position (EOS included), when requested.
    pub logits: Vec<Vec<f64>>,
}

/// Where fed-back characters come from.
#[derive(Clone, Copy, Debug)]
pub enum Feedback<'a> {
    Greedy,
    /// Gold characters (ending in EOS) are fed back regardless of the
    /// prediction; used to compare with teacher forcing.
    Forced(&'a [Vec<u32>]),
}

struct State {
    emitted: Vec<u32>,
    done: bool,
    truncated: bool,
    h: Vec<f64>,
    c: Vec<f64>,
    logits: Vec<Vec<f64>>,
}

fn rows_tensor<T: Real>(rows: &[&[f64]], cols: usize) -> Tensor<T> {
    let data = rows.iter().flat_map(|r| r.iter().map(|&x| T::from_f64(x))).collect();
    Tensor::from_vec(rows.len(), cols, data)
}

/// Block-synchronous greedy decoding of a batch in lockstep.
///
/// Each round runs the decoder on `BOS × pδ ++ emitted` and reads the state
/// of the next block; the head then produces `δ` characters one at a time.
/// An EOS inside a block ends that sequence and the rest of the block is
/// dropped. The head's recurrent state persists across blocks.
pub fn decode<T: Real>(
    model: &Seq2Seq,
    params: &dyn ParamSource<T>,
    srcs: &[ByteSequence],
    max_len: usize,
    feedback: Feedback<'_>,
    keep_logits: bool,
) -> Vec<Generation> {
    let delta = model.delta();
    let pm = model.config.pad_multiplier();
    let d = model.config.dims.model_dim;
    let enc_delta = model.config.encoder.delta;
    let limit = |i: usize| match feedback {
        Feedback::Greedy => max_len,
        Feedback::Forced(gold) => gold[i].len(),
    };

    // Encoder states, computed once.
    let (memory, mem_lens) = {
        let mut ids = Vec::new();
        let mut lens = Vec::new();
        for s in srcs {
            let n = round_up(s.len(), enc_delta);
            ids.extend(s.ids.iter().map(|&i| i as usize));
            ids.extend(std::iter::repeat(PAD as usize).take(n - s.len()));
            lens.push(n);
        }
        let mut g = Graph::new(params);
        let (mem, segs) = model.encode(&mut g, &ids, &Segments::from_lengths(&lens));
        let value = g.value(mem);
        let rows: Vec<Vec<f64>> = (0..value.rows)
            .map(|r| value.row(r).iter().map(|x| x.as_f64()).collect())
            .collect();
        (rows, segs.lengths())
    };
    let mem_starts: Vec<usize> = mem_lens
        .iter()
        .scan(0, |acc, &l| {
            let s = *acc;
            *acc += l;
            Some(s)
        })
        .collect();

    let mut states: Vec<State> = (0..srcs.len())
        .map(|i| State {
            emitted: Vec::new(),
            done: limit(i) == 0,
            truncated: limit(i) == 0 && matches!(feedback, Feedback::Greedy),
            h: vec![0.0; d],
            c: vec![0.0; d],
            logits: Vec::new(),
        })
        .collect();

    let mut block = 0usize;
    loop {
        let active: Vec<usize> = (0..srcs.len()).filter(|&i| !states[i].done).collect();
        if active.is_empty() {
            break;
        }
        let mut g = Graph::new(params);
        let mut ctx_ids = Vec::new();
        let mut ctx_lens = Vec::new();
        let mut mem_rows: Vec<&[f64]> = Vec::new();
        let mut mem_segs = Vec::new();
        for &i in &active {
            let ctx_len = pm * delta + states[i].emitted.len();
            ctx_ids.extend(std::iter::repeat(BOS as usize).take(pm * delta));
            ctx_ids.extend(states[i].emitted.iter().map(|&c| c as usize));
            ctx_lens.push(ctx_len);
            let (s, l) = (mem_starts[i], mem_lens[i]);
            mem_rows.extend(memory[s..s + l].iter().map(|r| r.as_slice()));
            mem_segs.push(l);
        }
        let mem = g.input(rows_tensor(&mem_rows, d));
        let keep = vec![block + 1; active.len()];
        let (h, _) = model.decode_blocks(
            &mut g,
            &ctx_ids,
            &Segments::from_lengths(&ctx_lens),
            &keep,
            mem,
            &Segments::from_lengths(&mem_segs),
        );
        let last = RowMix::gather((0..active.len()).map(|a| a * (block + 1) + block));
        let hk = g.row_mix(h, Arc::new(last));

        let mut alive = vec![true; active.len()];
        match model.config.head {
            HeadKind::Direct => {
                let logits = model.output_logits(&mut g, hk);
                let lv = g.value(logits).clone();
                for (a, &i) in active.iter().enumerate() {
                    consume(&mut states[i], lv.row(a), feedback, i, limit(i), keep_logits);
                }
            }
            HeadKind::TwoStep => {
                let hrows: Vec<&[f64]> = active.iter().map(|&i| states[i].h.as_slice()).collect();
                let crows: Vec<&[f64]> = active.iter().map(|&i| states[i].c.as_slice()).collect();
                let mut hv = g.input(rows_tensor(&hrows, d));
                let mut cv = g.input(rows_tensor(&crows, d));
                for _ in 0..delta {
                    let prev: Vec<usize> = active
                        .iter()
                        .map(|&i| states[i].emitted.last().map_or(BOS as usize, |&c| c as usize))
                        .collect();
                    let (logits, h2, c2) = model.head_step(&mut g, hk, &prev, hv, cv);
                    hv = h2;
                    cv = c2;
                    let lv = g.value(logits).clone();
                    for (a, &i) in active.iter().enumerate() {
                        if alive[a] {
                            alive[a] = consume(&mut states[i], lv.row(a), feedback, i, limit(i), keep_logits);
                        } else {
                            // Finished mid-block: keep the context block-aligned.
                            states[i].emitted.push(PAD);
                        }
                    }
                }
                let (hvt, cvt) = (g.value(hv).clone(), g.value(cv).clone());
                for (a, &i) in active.iter().enumerate() {
                    states[i].h = hvt.row(a).iter().map(|x| x.as_f64()).collect();
                    states[i].c = cvt.row(a).iter().map(|x| x.as_f64()).collect();
                }
            }
        }
        block += 1;
    }

    states
        .into_iter()
        .map(|s| {
            let ids: Vec<u32> = s.emitted.into_iter().take_while(|&c| c != EOS && c != PAD).collect();
            Generation {
                output: ByteSequence::new(ids),
                truncated: s.truncated,
                logits: s.logits,
            }
        })
        .collect()
}

/// Records one predicted position. Returns whether the sequence continues.
fn consume<T: Real>(st: &mut State, row: &[T], feedback: Feedback<'_>, i: usize, limit: usize, keep: bool) -> bool {
    if st.done {
        st.emitted.push(PAD);
        return false;
    }
    if keep {
        st.logits.push(row.iter().map(|x| x.as_f64()).collect());
    }
    let next = match feedback {
        Feedback::Greedy => {
            let mut best = 0;
            for (k, x) in row.iter().enumerate() {
                if x.as_f64() > row[best].as_f64() {
                    best = k;
                }
            }
            best as u32
        }
        Feedback::Forced(gold) => gold[i][st.emitted.len()],
    };
    st.emitted.push(next);
    let produced = st.emitted.len();
    if next == EOS {
        st.done = true;
    } else if produced >= limit {
        st.done = true;
        st.truncated = matches!(feedback, Feedback::Greedy);
    }
    !st.done
}

/// Greedy decoding of a single source with the model's own parameters.
pub fn greedy_generate<T: Real>(
    model: &Seq2Seq,
    params: &dyn ParamSource<T>,
    src: &ByteSequence,
    max_len: usize,
) -> Generation {
    decode(
        model,
        params,
        std::slice::from_ref(src),
        max_len,
        Feedback::Greedy,
        false,
    )
    .pop()
    .expect("one source")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bytedata::{byte_encode, ParallelPair};
    use crate::downsamplers::Variant;
    use crate::numcore::ParamTable;
    use crate::seq2seq::config::{ModelConfig, ModelDims};
    use crate::seq2seq::model::{build_model, Batch};

    fn dims() -> ModelDims {
        ModelDims {
            encoder_layers: 1,
            decoder_layers: 2,
            model_dim: 8,
            heads: 2,
            ffn_dim: 16,
            dropout: 0.0,
        }
    }

    fn pairs() -> Vec<ParallelPair> {
        [("abcd", "wxyz"), ("hello", "hi"), ("q", "a longer one")]
            .iter()
            .map(|(s, t)| ParallelPair {
                src: byte_encode(s, true),
                tgt: byte_encode(t, true),
            })
            .collect()
    }

    /// Teacher-forced per-position logits of each pair, unpacked.
    fn tf_logits(m: &Seq2Seq, p: &ParamTable<f64>, pairs: &[ParallelPair]) -> Vec<Vec<Vec<f64>>> {
        let b = Batch::new(m, pairs);
        let mut g = Graph::new(p);
        let y = m.logits(&mut g, &b);
        let lv = g.value(y);
        let mut out = Vec::new();
        let mut row = 0;
        for (pair, &n) in pairs.iter().zip(&b.tgt_lens) {
            out.push((0..pair.tgt.len()).map(|t| lv.row(row + t).to_vec()).collect());
            row += n;
        }
        out
    }

    #[test]
    fn forced_decoding_matches_teacher_forcing() {
        for (delta, variant) in [
            (1, Variant::Removal),
            (2, Variant::Removal),
            (3, Variant::Padding),
            (2, Variant::Lee),
        ] {
            let cfg = ModelConfig::with_decoder(dims(), delta, variant);
            let (m, store) = build_model(&cfg, 7).unwrap();
            let p = store.to_table::<f64>();
            let ps = pairs();
            let gold: Vec<Vec<u32>> = ps.iter().map(|x| x.tgt.ids.clone()).collect();
            let srcs: Vec<ByteSequence> = ps.iter().map(|x| x.src.clone()).collect();
            let gens = decode(&m, &p, &srcs, 0, Feedback::Forced(&gold), true);
            let tf = tf_logits(&m, &p, &ps);
            for (gen, want) in gens.iter().zip(&tf) {
                assert_eq!(gen.logits.len(), want.len());
                for (a, b) in gen.logits.iter().zip(want) {
                    let diff = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
                    assert!(diff < 1e-9, "{variant} δ={delta}: {diff}");
                }
            }
        }
    }

    #[test]
    fn prefix_freeze() {
        // Changing character t never moves the logits of positions ≤ t.
        for (delta, variant) in [
            (1, Variant::Removal),
            (2, Variant::Removal),
            (2, Variant::Masking),
            (2, Variant::Padding),
            (3, Variant::Lee),
        ] {
            let cfg = ModelConfig::with_decoder(dims(), delta, variant);
            let (m, store) = build_model(&cfg, 1).unwrap();
            let p = store.to_table::<f64>();
            let base = pairs()[2].clone();
            let before = tf_logits(&m, &p, std::slice::from_ref(&base)).pop().unwrap();
            for t in 0..base.tgt.len() {
                let mut changed = base.clone();
                changed.tgt.ids[t] = if changed.tgt.ids[t] == 90 { 91 } else { 90 };
                let after = tf_logits(&m, &p, &[changed]).pop().unwrap();
                for s in 0..=t {
                    assert_eq!(before[s], after[s], "{variant} δ={delta}: char {t} moved position {s}");
                }
            }
        }
    }

    #[test]
    fn non_causal_decoder_breaks_prefix_freeze() {
        let mut cfg = ModelConfig::with_decoder(dims(), 2, Variant::NonCausal);
        cfg.allow_non_causal_decoder = true;
        let (m, store) = build_model(&cfg, 1).unwrap();
        let p = store.to_table::<f64>();
        let base = pairs()[2].clone();
        let before = tf_logits(&m, &p, std::slice::from_ref(&base)).pop().unwrap();
        let mut changed = base.clone();
        changed.tgt.ids[2] ^= 1;
        let after = tf_logits(&m, &p, &[changed]).pop().unwrap();
        assert!((0..=2).any(|s| before[s] != after[s]));
    }

    #[test]
    fn max_len_truncates() {
        let cfg = ModelConfig::with_decoder(dims(), 2, Variant::Removal);
        let (m, store) = build_model(&cfg, 0).unwrap();
        let src = byte_encode("abc", true);
        let empty = greedy_generate::<f32>(&m, &store, &src, 0);
        assert!(empty.truncated && empty.output.is_empty());
        let g = greedy_generate::<f32>(&m, &store, &src, 5);
        assert!(g.output.len() <= 5);
        assert!(g.truncated || g.output.len() < 5);
    }
}
