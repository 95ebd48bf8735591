use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{HeadKind, ModelConfig};
use crate::bytedata::{round_up, ParallelPair, BOS, PAD};
use crate::downsamplers::positions::segment_positions;
use crate::downsamplers::{causal_context_with, Downsampler};
use crate::error::Result;
use crate::numcore::nn::{attention, linear, lstm_step};
use crate::numcore::{Graph, Init, ParamId, ParamStore, Real, RowMix, Segments, Tensor, Var};

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
struct Norm {
    gain: ParamId,
    bias: ParamId,
}

#[derive(Clone, Debug)]
struct Dense {
    weight: ParamId,
    bias: ParamId,
}

#[derive(Clone, Debug)]
struct Ffn {
    up: Dense,
    down: Dense,
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    attn_norm: Norm,
    qkv: Dense,
    attn_out: Dense,
    ffn_norm: Norm,
    ffn: Ffn,
}

#[derive(Clone, Debug)]
struct DecoderLayer {
    self_norm: Norm,
    qkv: Dense,
    self_out: Dense,
    cross_norm: Norm,
    cross_q: Dense,
    cross_kv: Dense,
    cross_out: Dense,
    ffn_norm: Norm,
    ffn: Ffn,
}

/// Character LSTM of the two-step head. Its input at character `t` is the
/// block state `H[⌊t/δ⌋]` and the decoder embedding of character `t − 1`.
#[derive(Clone, Debug)]
struct TwoStep {
    w_block: ParamId,
    w_char: ParamId,
    bias: ParamId,
    w_rec: ParamId,
}

/// Transformer encoder–decoder over downsampled byte blocks.
#[derive(Clone, Debug)]
pub struct Seq2Seq {
    pub config: ModelConfig,
    pub encoder_ds: Downsampler,
    pub decoder_ds: Downsampler,
    encoder: Vec<EncoderLayer>,
    encoder_norm: Norm,
    decoder: Vec<DecoderLayer>,
    decoder_norm: Norm,
    two_step: Option<TwoStep>,
    /// `None` when the output layer is tied to the decoder embedding.
    output: Option<ParamId>,
    output_bias: ParamId,
}

fn norm(store: &mut ParamStore, name: &str, d: usize, rng: &mut ChaCha8Rng) -> Norm {
    Norm {
        gain: store.add(format!("{name}.gain"), 1, d, Init::Ones, rng),
        bias: store.add(format!("{name}.bias"), 1, d, Init::Zeros, rng),
    }
}

fn dense(store: &mut ParamStore, name: &str, rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Dense {
    let bound = (6.0 / (rows + cols) as f32).sqrt();
    Dense {
        weight: store.add(format!("{name}.weight"), rows, cols, Init::Uniform(bound), rng),
        bias: store.add(format!("{name}.bias"), 1, cols, Init::Zeros, rng),
    }
}

fn ffn(store: &mut ParamStore, name: &str, d: usize, f: usize, rng: &mut ChaCha8Rng) -> Ffn {
    Ffn {
        up: dense(store, &format!("{name}.up"), d, f, rng),
        down: dense(store, &format!("{name}.down"), f, d, rng),
    }
}

/// Validates `config` and allocates a freshly initialised model.
pub fn build_model(config: &ModelConfig, seed: u64) -> Result<(Seq2Seq, ParamStore)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let dims = &config.dims;
    let d = dims.model_dim;
    let encoder_ds = Downsampler::new(&config.encoder, "enc.ds", &mut store, &mut rng)?;
    let encoder = (0..dims.encoder_layers)
        .map(|l| {
            let p = format!("enc.{l}");
            EncoderLayer {
                attn_norm: norm(&mut store, &format!("{p}.attn_norm"), d, &mut rng),
                qkv: dense(&mut store, &format!("{p}.qkv"), d, 3 * d, &mut rng),
                attn_out: dense(&mut store, &format!("{p}.attn_out"), d, d, &mut rng),
                ffn_norm: norm(&mut store, &format!("{p}.ffn_norm"), d, &mut rng),
                ffn: ffn(&mut store, &format!("{p}.ffn"), d, dims.ffn_dim, &mut rng),
            }
        })
        .collect();
    let encoder_norm = norm(&mut store, "enc.norm", d, &mut rng);
    let decoder_ds = Downsampler::new(&config.decoder, "dec.ds", &mut store, &mut rng)?;
    let decoder = (0..dims.decoder_layers)
        .map(|l| {
            let p = format!("dec.{l}");
            DecoderLayer {
                self_norm: norm(&mut store, &format!("{p}.self_norm"), d, &mut rng),
                qkv: dense(&mut store, &format!("{p}.qkv"), d, 3 * d, &mut rng),
                self_out: dense(&mut store, &format!("{p}.self_out"), d, d, &mut rng),
                cross_norm: norm(&mut store, &format!("{p}.cross_norm"), d, &mut rng),
                cross_q: dense(&mut store, &format!("{p}.cross_q"), d, d, &mut rng),
                cross_kv: dense(&mut store, &format!("{p}.cross_kv"), d, 2 * d, &mut rng),
                cross_out: dense(&mut store, &format!("{p}.cross_out"), d, d, &mut rng),
                ffn_norm: norm(&mut store, &format!("{p}.ffn_norm"), d, &mut rng),
                ffn: ffn(&mut store, &format!("{p}.ffn"), d, dims.ffn_dim, &mut rng),
            }
        })
        .collect();
    let decoder_norm = norm(&mut store, "dec.norm", d, &mut rng);
    let two_step = (config.head == HeadKind::TwoStep).then(|| {
        let bound = 1.0 / (d as f32).sqrt();
        TwoStep {
            w_block: store.add("head.lstm.w_block", d, 4 * d, Init::Uniform(bound), &mut rng),
            w_char: store.add("head.lstm.w_char", d, 4 * d, Init::Uniform(bound), &mut rng),
            bias: store.add("head.lstm.bias", 1, 4 * d, Init::Zeros, &mut rng),
            w_rec: store.add("head.lstm.w_rec", d, 4 * d, Init::Uniform(bound), &mut rng),
        }
    });
    let vocab = config.decoder.vocab_size;
    let output = (!config.tie_embeddings).then(|| {
        let bound = (6.0 / (d + vocab) as f32).sqrt();
        store.add("head.out.weight", d, vocab, Init::Uniform(bound), &mut rng)
    });
    let output_bias = store.add("head.out.bias", 1, vocab, Init::Zeros, &mut rng);
    let model = Seq2Seq {
        config: config.clone(),
        encoder_ds,
        decoder_ds,
        encoder,
        encoder_norm,
        decoder,
        decoder_norm,
        two_step,
        output,
        output_bias,
    };
    Ok((model, store))
}

/// Packed ids and bookkeeping for one teacher-forced batch.
#[derive(Clone, Debug)]
pub struct Batch {
    pub src_ids: Vec<usize>,
    pub src_segs: Segments,
    pub ctx_ids: Vec<usize>,
    pub ctx_segs: Segments,
    /// Padded target length per sample (a multiple of the decoder δ).
    pub tgt_lens: Vec<usize>,
    /// Character preceding each target position (BOS at position 0).
    pub prev_ids: Vec<usize>,
    /// Next-character targets; `None` on padding.
    pub targets: Vec<Option<usize>>,
}

impl Batch {
    pub fn new(model: &Seq2Seq, pairs: &[ParallelPair]) -> Self {
        let enc_delta = model.config.encoder.delta;
        let delta = model.config.decoder.delta;
        let pm = model.config.pad_multiplier();
        let mut b = Batch {
            src_ids: Vec::new(),
            src_segs: Segments::from_lengths(&[]),
            ctx_ids: Vec::new(),
            ctx_segs: Segments::from_lengths(&[]),
            tgt_lens: Vec::with_capacity(pairs.len()),
            prev_ids: Vec::new(),
            targets: Vec::new(),
        };
        let mut src_lens = Vec::with_capacity(pairs.len());
        let mut ctx_lens = Vec::with_capacity(pairs.len());
        for p in pairs {
            let n_src = round_up(p.src.len(), enc_delta);
            b.src_ids.extend(p.src.ids.iter().map(|&i| i as usize));
            b.src_ids
                .extend(std::iter::repeat(PAD as usize).take(n_src - p.src.len()));
            src_lens.push(n_src);
            let n = round_up(p.tgt.len(), delta);
            let mut tgt = p.tgt.ids.clone();
            tgt.resize(n, PAD);
            let ctx = causal_context_with(&tgt, delta, pm);
            ctx_lens.push(ctx.len());
            b.ctx_ids.extend(ctx.iter().map(|&i| i as usize));
            b.prev_ids.push(BOS as usize);
            b.prev_ids.extend(tgt[..n - 1].iter().map(|&i| i as usize));
            b.targets
                .extend(tgt.iter().map(|&t| if t == PAD { None } else { Some(t as usize) }));
            b.tgt_lens.push(n);
        }
        b.src_segs = Segments::from_lengths(&src_lens);
        b.ctx_segs = Segments::from_lengths(&ctx_lens);
        b
    }

    pub fn len(&self) -> usize {
        self.tgt_lens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tgt_lens.is_empty()
    }
}

impl Seq2Seq {
    pub fn delta(&self) -> usize {
        self.config.decoder.delta
    }

    fn dropout<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        g.dropout(x, self.config.dims.dropout)
    }

    fn norm<T: Real>(&self, g: &mut Graph<'_, T>, n: &Norm, x: Var) -> Var {
        let gain = g.param(n.gain);
        let bias = g.param(n.bias);
        g.layer_norm(x, gain, bias, LN_EPS)
    }

    fn dense<T: Real>(&self, g: &mut Graph<'_, T>, p: &Dense, x: Var) -> Var {
        let w = g.param(p.weight);
        let b = g.param(p.bias);
        linear(g, x, w, Some(b))
    }

    fn ffn<T: Real>(&self, g: &mut Graph<'_, T>, p: &Ffn, x: Var) -> Var {
        let h = self.dense(g, &p.up, x);
        let h = g.relu(h);
        let h = self.dropout(g, h);
        self.dense(g, &p.down, h)
    }

    fn self_attention<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        qkv: &Dense,
        out: &Dense,
        x: Var,
        segs: &Segments,
        causal: bool,
    ) -> Var {
        let d = self.config.dims.model_dim;
        let proj = self.dense(g, qkv, x);
        let q = g.slice_cols(proj, 0, d);
        let k = g.slice_cols(proj, d, d);
        let v = g.slice_cols(proj, 2 * d, d);
        let a = attention(g, q, k, v, segs, segs, self.config.dims.heads, causal);
        self.dense(g, out, a)
    }

    fn add_positions<T: Real>(&self, g: &mut Graph<'_, T>, blocks: Var, segs: &Segments) -> Var {
        let pos = g.input(segment_positions(segs, self.config.dims.model_dim));
        let x = g.add(blocks, pos);
        self.dropout(g, x)
    }

    /// Encoder block states `[Σ m_src, d]` and their segments.
    pub fn encode<T: Real>(&self, g: &mut Graph<'_, T>, src_ids: &[usize], src_segs: &Segments) -> (Var, Segments) {
        let blocks = self.encoder_ds.forward(g, src_ids, src_segs);
        let segs = src_segs.pooled(self.config.encoder.delta);
        let mut x = self.add_positions(g, blocks, &segs);
        for layer in &self.encoder {
            let h = self.norm(g, &layer.attn_norm, x);
            let h = self.self_attention(g, &layer.qkv, &layer.attn_out, h, &segs, false);
            let h = self.dropout(g, h);
            x = g.add(x, h);
            let h = self.norm(g, &layer.ffn_norm, x);
            let h = self.ffn(g, &layer.ffn, h);
            let h = self.dropout(g, h);
            x = g.add(x, h);
        }
        (self.norm(g, &self.encoder_norm, x), segs)
    }

    /// Decoder block states. `keep[i]` leading blocks of each context segment
    /// are used; the remaining blocks only serve as right context of the
    /// downsampler.
    pub fn decode_blocks<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        ctx_ids: &[usize],
        ctx_segs: &Segments,
        keep: &[usize],
        memory: Var,
        memory_segs: &Segments,
    ) -> (Var, Segments) {
        let delta = self.delta();
        let all = self.decoder_ds.forward(g, ctx_ids, ctx_segs);
        let rows: Vec<usize> = ctx_segs
            .iter()
            .zip(keep)
            .flat_map(|((start, _), &k)| (0..k).map(move |b| start / delta + b))
            .collect();
        let blocks = g.row_mix(all, Arc::new(RowMix::gather(rows)));
        let segs = Segments::from_lengths(keep);
        let mut x = self.add_positions(g, blocks, &segs);
        let d = self.config.dims.model_dim;
        let heads = self.config.dims.heads;
        for layer in &self.decoder {
            let h = self.norm(g, &layer.self_norm, x);
            let h = self.self_attention(g, &layer.qkv, &layer.self_out, h, &segs, true);
            let h = self.dropout(g, h);
            x = g.add(x, h);
            let h = self.norm(g, &layer.cross_norm, x);
            let q = self.dense(g, &layer.cross_q, h);
            let kv = self.dense(g, &layer.cross_kv, memory);
            let k = g.slice_cols(kv, 0, d);
            let v = g.slice_cols(kv, d, d);
            let h = attention(g, q, k, v, &segs, memory_segs, heads, false);
            let h = self.dense(g, &layer.cross_out, h);
            let h = self.dropout(g, h);
            x = g.add(x, h);
            let h = self.norm(g, &layer.ffn_norm, x);
            let h = self.ffn(g, &layer.ffn, h);
            let h = self.dropout(g, h);
            x = g.add(x, h);
        }
        (self.norm(g, &self.decoder_norm, x), segs)
    }

    /// Character logits from per-character features `[rows, d]`.
    pub fn output_logits<T: Real>(&self, g: &mut Graph<'_, T>, h: Var) -> Var {
        let bias = g.param(self.output_bias);
        let y = match self.output {
            Some(w) => {
                let w = g.param(w);
                g.matmul(h, w)
            }
            None => {
                let e = g.param(self.decoder_ds.embedding());
                let y = g.matmul_t(h, false, e, true);
                g.scale(y, 1.0 / (self.config.dims.model_dim as f64).sqrt())
            }
        };
        g.add_row(y, bias)
    }

    /// LSTM gate input for characters whose block states are `block_proj`
    /// (already multiplied by the block weight) and whose previous
    /// characters are `prev`.
    fn lstm_input<T: Real>(&self, g: &mut Graph<'_, T>, block_proj: Var, prev: &[usize]) -> Var {
        let head = self.two_step.as_ref().expect("two-step head");
        let table = g.param(self.decoder_ds.embedding());
        let w_char = g.param(head.w_char);
        let bias = g.param(head.bias);
        let e = g.gather(table, prev);
        let char_proj = g.matmul(e, w_char);
        let x = g.add(block_proj, char_proj);
        g.add_row(x, bias)
    }

    /// Runs the two-step head over whole target sequences. `h` holds
    /// `tgt_lens[i] / δ` block states per sample.
    fn two_step_logits<T: Real>(&self, g: &mut Graph<'_, T>, h: Var, tgt_lens: &[usize], prev: &[usize]) -> Var {
        let head = self.two_step.as_ref().expect("two-step head");
        let delta = self.delta();
        let d = self.config.dims.model_dim;
        let w_block = g.param(head.w_block);
        let w_rec = g.param(head.w_rec);
        let block_proj = g.matmul(h, w_block);
        let char_segs = Segments::from_lengths(tgt_lens);
        // Samples longest first, so the active set at time t is a prefix.
        let mut order: Vec<usize> = (0..tgt_lens.len()).collect();
        order.sort_by_key(|&i| std::cmp::Reverse(tgt_lens[i]));
        let max_len = tgt_lens.iter().copied().max().unwrap_or(0);
        let mut tm_rows = Vec::with_capacity(char_segs.total());
        let mut tm_blocks = Vec::with_capacity(char_segs.total());
        let mut active = Vec::with_capacity(max_len);
        for t in 0..max_len {
            let mut a = 0;
            for &i in &order {
                if tgt_lens[i] <= t {
                    break;
                }
                tm_rows.push(char_segs.start(i) + t);
                tm_blocks.push(char_segs.start(i) / delta + t / delta);
                a += 1;
            }
            active.push(a);
        }
        let tm_prev: Vec<usize> = tm_rows.iter().map(|&r| prev[r]).collect();
        let bp = g.row_mix(block_proj, Arc::new(RowMix::gather(tm_blocks)));
        let x = self.lstm_input(g, bp, &tm_prev);
        let mut hs = g.input(Tensor::zeros(active.first().copied().unwrap_or(0), d));
        let mut cs = hs;
        let mut outs = Vec::with_capacity(max_len);
        let mut offset = 0;
        for &a in &active {
            if g.shape(hs).0 != a {
                hs = g.slice_rows(hs, 0, a);
                cs = g.slice_rows(cs, 0, a);
            }
            let xt = g.slice_rows(x, offset, a);
            let (h2, c2) = lstm_step(g, xt, hs, cs, w_rec);
            outs.push(h2);
            hs = h2;
            cs = c2;
            offset += a;
        }
        let tm = if outs.len() == 1 { outs[0] } else { g.concat_rows(&outs) };
        let mut back = vec![0usize; tm_rows.len()];
        for (k, &r) in tm_rows.iter().enumerate() {
            back[r] = k;
        }
        let packed = g.row_mix(tm, Arc::new(RowMix::gather(back)));
        let packed = self.dropout(g, packed);
        self.output_logits(g, packed)
    }

    /// Teacher-forced logits `[Σ tgt_len, V]`, one row per target position.
    pub fn logits<T: Real>(&self, g: &mut Graph<'_, T>, batch: &Batch) -> Var {
        let (memory, mem_segs) = self.encode(g, &batch.src_ids, &batch.src_segs);
        let delta = self.delta();
        let keep: Vec<usize> = batch.tgt_lens.iter().map(|&n| n / delta).collect();
        let (h, _) = self.decode_blocks(g, &batch.ctx_ids, &batch.ctx_segs, &keep, memory, &mem_segs);
        match self.config.head {
            HeadKind::Direct => self.output_logits(g, h),
            HeadKind::TwoStep => self.two_step_logits(g, h, &batch.tgt_lens, &batch.prev_ids),
        }
    }

    /// One step of the two-step head for a set of sequences: block states
    /// `h_blocks [a, d]`, previous characters, and recurrent state. Returns
    /// logits and the new state.
    pub(crate) fn head_step<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        h_blocks: Var,
        prev: &[usize],
        h: Var,
        c: Var,
    ) -> (Var, Var, Var) {
        let head = self.two_step.as_ref().expect("two-step head");
        let w_block = g.param(head.w_block);
        let w_rec = g.param(head.w_rec);
        let bp = g.matmul(h_blocks, w_block);
        let x = self.lstm_input(g, bp, prev);
        let (h2, c2) = lstm_step(g, x, h, c, w_rec);
        (self.output_logits(g, h2), h2, c2)
    }
}
