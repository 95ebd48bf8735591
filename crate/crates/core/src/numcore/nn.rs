//! Composite differentiable building blocks on top of [`Graph`] primitives.
//!
//! Batches are packed along the row axis: a [`Segments`] value records where
//! each sample's rows start, and every sequence-aware helper here keeps its
//! receptive field inside a segment.

use std::sync::Arc;

use super::graph::{Graph, RowMix, Var};
use super::tensor::Real;

/// Row ranges of the samples packed into one tensor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segments {
    offsets: Vec<usize>,
}

impl Segments {
    pub fn from_lengths(lengths: &[usize]) -> Self {
        let mut offsets = Vec::with_capacity(lengths.len() + 1);
        offsets.push(0);
        for &l in lengths {
            offsets.push(offsets.last().copied().unwrap_or(0) + l);
        }
        Self { offsets }
    }

    pub fn single(len: usize) -> Self {
        Self::from_lengths(&[len])
    }

    pub fn count(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn start(&self, i: usize) -> usize {
        self.offsets[i]
    }

    pub fn len(&self, i: usize) -> usize {
        self.offsets[i + 1] - self.offsets[i]
    }

    pub fn total(&self) -> usize {
        *self.offsets.last().expect("offsets never empty")
    }

    pub fn is_empty(&self) -> bool {
        self.total() == 0
    }

    pub fn lengths(&self) -> Vec<usize> {
        (0..self.count()).map(|i| self.len(i)).collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.count()).map(move |i| (self.start(i), self.len(i)))
    }

    /// Segment lengths divided by `factor` (each must divide evenly).
    pub fn pooled(&self, factor: usize) -> Self {
        let lengths: Vec<usize> = self
            .lengths()
            .into_iter()
            .map(|l| {
                assert_eq!(l % factor, 0, "segment length {l} not divisible by {factor}");
                l / factor
            })
            .collect();
        Self::from_lengths(&lengths)
    }
}

/// Row `i` takes row `i + offset` of the same segment, or zero outside it.
pub fn shift_mix(segs: &Segments, offset: isize) -> RowMix {
    let mut rows = Vec::with_capacity(segs.total());
    for (start, len) in segs.iter() {
        for i in 0..len {
            let j = i as isize + offset;
            if j >= 0 && (j as usize) < len {
                rows.push(vec![(start + j as usize, 1.0)]);
            } else {
                rows.push(Vec::new());
            }
        }
    }
    RowMix::new(rows)
}

/// Mean over consecutive blocks of `window` rows within each segment.
pub fn block_mean_mix(segs: &Segments, window: usize) -> RowMix {
    let mut sets = Vec::new();
    for (start, len) in segs.iter() {
        assert_eq!(len % window, 0, "segment length {len} not divisible by {window}");
        for b in 0..len / window {
            sets.push((start + b * window..start + (b + 1) * window).collect());
        }
    }
    RowMix::means(sets)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConvPadding {
    /// Output `i` sees inputs `i − (w−1) ..= i`.
    Causal,
    /// Output `i` sees inputs `i − ⌊(w−1)/2⌋ ..= i + ⌈(w−1)/2⌉`.
    Centered,
}

/// Relative input offsets read by a kernel of `width` taps.
pub fn tap_offsets(width: usize, padding: ConvPadding) -> Vec<isize> {
    let w = width as isize;
    let first = match padding {
        ConvPadding::Causal => -(w - 1),
        ConvPadding::Centered => -((w - 1) / 2),
    };
    (0..w).map(|k| first + k).collect()
}

/// `x · w + b` with `b` broadcast over rows.
pub fn linear<T: Real>(g: &mut Graph<'_, T>, x: Var, w: Var, b: Option<Var>) -> Var {
    let y = g.matmul(x, w);
    match b {
        Some(b) => g.add_row(y, b),
        None => y,
    }
}

/// Dense 1-D convolution: `weight` is `[width·c_in, c_out]` with taps stacked
/// in offset order (im2col layout).
pub fn conv1d<T: Real>(
    g: &mut Graph<'_, T>,
    x: Var,
    segs: &Segments,
    weight: Var,
    bias: Option<Var>,
    width: usize,
    padding: ConvPadding,
) -> Var {
    let cols: Vec<Var> = tap_offsets(width, padding)
        .into_iter()
        .map(|off| {
            if off == 0 {
                x
            } else {
                g.row_mix(x, Arc::new(shift_mix(segs, off)))
            }
        })
        .collect();
    let stacked = if cols.len() == 1 { cols[0] } else { g.concat_cols(&cols) };
    linear(g, stacked, weight, bias)
}

/// Depthwise 1-D convolution: `kernel` is `[width, channels]`, one filter
/// per channel.
pub fn depthwise_conv1d<T: Real>(
    g: &mut Graph<'_, T>,
    x: Var,
    segs: &Segments,
    kernel: Var,
    bias: Option<Var>,
    padding: ConvPadding,
) -> Var {
    let width = g.shape(kernel).0;
    let mut terms = Vec::with_capacity(width);
    for (k, off) in tap_offsets(width, padding).into_iter().enumerate() {
        let shifted = if off == 0 {
            x
        } else {
            g.row_mix(x, Arc::new(shift_mix(segs, off)))
        };
        let tap = g.slice_rows(kernel, k, 1);
        terms.push(g.mul_row(shifted, tap));
    }
    let y = g.add_all(&terms);
    match bias {
        Some(b) => g.add_row(y, b),
        None => y,
    }
}

/// Scaled dot-product attention over packed segments, already projected.
///
/// `q`, `k`, `v` hold all heads side by side (`heads · d_head` columns).
/// Query segment `i` attends to key segment `i`; with `causal`, query row `r`
/// sees key rows `0..=r` of its segment.
#[allow(clippy::too_many_arguments)]
pub fn attention<T: Real>(
    g: &mut Graph<'_, T>,
    q: Var,
    k: Var,
    v: Var,
    q_segs: &Segments,
    kv_segs: &Segments,
    heads: usize,
    causal: bool,
) -> Var {
    assert_eq!(q_segs.count(), kv_segs.count(), "query/key segment counts differ");
    let d = g.shape(q).1;
    assert_eq!(d % heads, 0, "model dim {d} not divisible by {heads} heads");
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let per_head: Vec<(Var, Var, Var)> = (0..heads)
        .map(|h| {
            (
                g.slice_cols(q, h * dh, dh),
                g.slice_cols(k, h * dh, dh),
                g.slice_cols(v, h * dh, dh),
            )
        })
        .collect();
    let mut outputs = Vec::with_capacity(q_segs.count());
    for i in 0..q_segs.count() {
        let (qs, ql) = (q_segs.start(i), q_segs.len(i));
        let (ks, kl) = (kv_segs.start(i), kv_segs.len(i));
        let mut head_outs = Vec::with_capacity(heads);
        for &(qh, kh, vh) in &per_head {
            let qi = g.slice_rows(qh, qs, ql);
            let ki = g.slice_rows(kh, ks, kl);
            let vi = g.slice_rows(vh, ks, kl);
            let scores = g.matmul_t(qi, false, ki, true);
            let mut scores = g.scale(scores, scale);
            if causal {
                let mask = (0..ql).flat_map(|r| (0..kl).map(move |c| c > r)).collect();
                scores = g.masked_fill(scores, mask, f64::NEG_INFINITY);
            }
            let probs = g.softmax(scores);
            head_outs.push(g.matmul(probs, vi));
        }
        outputs.push(if heads == 1 {
            head_outs[0]
        } else {
            g.concat_cols(&head_outs)
        });
    }
    if outputs.len() == 1 {
        outputs[0]
    } else {
        g.concat_rows(&outputs)
    }
}

/// One LSTM step. `x_proj` is the precomputed input contribution
/// `x · W_x + b` (`[batch, 4h]`, gate order i, f, g, o).
pub fn lstm_step<T: Real>(g: &mut Graph<'_, T>, x_proj: Var, h: Var, c: Var, w_h: Var) -> (Var, Var) {
    let hidden = g.shape(h).1;
    let rec = g.matmul(h, w_h);
    let gates = g.add(x_proj, rec);
    let i = g.slice_cols(gates, 0, hidden);
    let f = g.slice_cols(gates, hidden, hidden);
    let cand = g.slice_cols(gates, 2 * hidden, hidden);
    let o = g.slice_cols(gates, 3 * hidden, hidden);
    let i = g.sigmoid(i);
    let f = g.sigmoid(f);
    let cand = g.tanh(cand);
    let o = g.sigmoid(o);
    let keep = g.mul(f, c);
    let write = g.mul(i, cand);
    let c_next = g.add(keep, write);
    let squashed = g.tanh(c_next);
    let h_next = g.mul(o, squashed);
    (h_next, c_next)
}
