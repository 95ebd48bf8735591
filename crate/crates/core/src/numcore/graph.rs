//! Tape-based reverse-mode automatic differentiation over 2-D tensors.
//!
//! A [`Graph`] records every operation eagerly (values are computed on the
//! spot) and keeps the tape in creation order, which is already a valid
//! topological order for the backward sweep. Parameters are pulled from a
//! [`ParamSource`] the first time they are referenced and cached for the rest
//! of the graph's life, so one graph per optimizer step shares a single copy
//! of every weight across all samples of the batch.

use std::collections::HashMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::params::{ParamId, ParamSource};
use super::tensor::{gemm_into, Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Sparse linear recombination of rows: output row `i` is
/// `Σ w · input[j]` over `(j, w)` in `rows[i]`.
///
/// Window means, block pooling, shifts for convolutions and row gathers are
/// all expressed this way.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RowMix {
    pub rows: Vec<Vec<(usize, f64)>>,
}

impl RowMix {
    pub fn new(rows: Vec<Vec<(usize, f64)>>) -> Self {
        Self { rows }
    }

    /// Uniform mean over each listed set of source rows.
    pub fn means(sets: impl IntoIterator<Item = Vec<usize>>) -> Self {
        Self {
            rows: sets
                .into_iter()
                .map(|set| {
                    let w = if set.is_empty() { 0.0 } else { 1.0 / set.len() as f64 };
                    set.into_iter().map(|j| (j, w)).collect()
                })
                .collect(),
        }
    }

    /// Picks single rows (repetition allowed).
    pub fn gather(indices: impl IntoIterator<Item = usize>) -> Self {
        Self {
            rows: indices.into_iter().map(|j| vec![(j, 1.0)]).collect(),
        }
    }
}

enum Op<T> {
    Input,
    Param,
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, T),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Softmax(Var),
    MaskedFill {
        a: Var,
        mask: Vec<bool>,
    },
    RowMix {
        a: Var,
        mix: Arc<RowMix>,
    },
    MaxPool {
        a: Var,
        argmax: Vec<usize>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    LayerNorm {
        a: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols {
        a: Var,
        start: usize,
    },
    SliceRows {
        a: Var,
        start: usize,
    },
    Reshape(Var),
    Sum(Var),
    SmoothedCe {
        logits: Var,
        targets: Vec<Option<usize>>,
        smoothing: T,
        count: usize,
        probs: Vec<T>,
    },
    Dropout {
        a: Var,
        mask: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Graph<'p, T: Real> {
    nodes: Vec<Node<T>>,
    params: &'p dyn ParamSource<T>,
    param_vars: HashMap<ParamId, Var>,
    dropout_rng: Option<ChaCha8Rng>,
}

/// Result of a backward sweep.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(ParamId, Var)>,
}

impl<T: Real> Gradients<T> {
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    /// Gradients of every parameter the graph touched.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> + '_ {
        self.params
            .iter()
            .filter_map(move |&(id, v)| self.grads[v.0].as_ref().map(|g| (id, g)))
    }
}

impl<'p, T: Real> Graph<'p, T> {
    pub fn new(params: &'p dyn ParamSource<T>) -> Self {
        Self {
            nodes: Vec::new(),
            params,
            param_vars: HashMap::new(),
            dropout_rng: None,
        }
    }

    /// Enables dropout (training mode) with its own deterministic stream.
    pub fn with_dropout(mut self, seed: u64) -> Self {
        self.dropout_rng = Some(ChaCha8Rng::seed_from_u64(seed));
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        debug_assert!(value.data.iter().all(|x| !x.is_nan()), "NaN produced by graph op");
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Constant input (no gradient).
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Input, false)
    }

    /// Leaf that receives a gradient, e.g. an input whose sensitivity is
    /// being measured.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Input, true)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let value = self.params.load(id);
        let v = self.push(value, Op::Param, true);
        self.param_vars.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, false, b, false)
    }

    /// `op(a) · op(b)` where `op` transposes when the flag is set.
    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Var {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let m = if ta { av.cols } else { av.rows };
        let n = if tb { bv.rows } else { bv.cols };
        let mut out = vec![T::zero(); m * n];
        gemm_into(av, ta, bv, tb, &mut out, T::zero());
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::from_vec(m, n, out), Op::MatMul { a, b, ta, tb }, ng)
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(av.shape(), bv.shape(), "elementwise shape mismatch");
        Tensor::from_vec(
            av.rows,
            av.cols,
            av.data.iter().zip(&bv.data).map(|(&x, &y)| f(x, y)).collect(),
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip(a, b, |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip(a, b, |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip(a, b, |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Mul(a, b), ng)
    }

    /// Sums a list of same-shaped terms.
    pub fn add_all(&mut self, terms: &[Var]) -> Var {
        let mut acc = terms[0];
        for &t in &terms[1..] {
            acc = self.add(acc, t);
        }
        acc
    }

    fn broadcast_row(&self, a: Var, r: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (av, rv) = (&self.nodes[a.0].value, &self.nodes[r.0].value);
        assert_eq!(rv.rows, 1, "row operand must have one row");
        assert_eq!(av.cols, rv.cols, "row operand width mismatch");
        let mut out = av.clone();
        for row in out.data.chunks_mut(av.cols.max(1)) {
            for (x, &y) in row.iter_mut().zip(&rv.data) {
                *x = f(*x, y);
            }
        }
        out
    }

    /// `a[m×n] + r[1×n]` broadcast over rows.
    pub fn add_row(&mut self, a: Var, r: Var) -> Var {
        let v = self.broadcast_row(a, r, |x, y| x + y);
        let ng = self.ng(a) || self.ng(r);
        self.push(v, Op::AddRow(a, r), ng)
    }

    /// `a[m×n] ⊙ r[1×n]` broadcast over rows.
    pub fn mul_row(&mut self, a: Var, r: Var) -> Var {
        let v = self.broadcast_row(a, r, |x, y| x * y);
        let ng = self.ng(a) || self.ng(r);
        self.push(v, Op::MulRow(a, r), ng)
    }

    /// `a[m×n] ⊙ c[m×1]` broadcast over columns.
    pub fn mul_col(&mut self, a: Var, c: Var) -> Var {
        let (av, cv) = (&self.nodes[a.0].value, &self.nodes[c.0].value);
        assert_eq!(cv.cols, 1, "column operand must have one column");
        assert_eq!(av.rows, cv.rows, "column operand height mismatch");
        let mut out = av.clone();
        if av.cols > 0 {
            for (row, &s) in out.data.chunks_mut(av.cols).zip(&cv.data) {
                row.iter_mut().for_each(|x| *x = *x * s);
            }
        }
        let ng = self.ng(a) || self.ng(c);
        self.push(out, Op::MulCol(a, c), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let s = T::from_f64(s);
        let v = self.nodes[a.0].value.map(|x| x * s);
        let ng = self.ng(a);
        self.push(v, Op::Scale(a, s), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.map(|x| x.tanh());
        let ng = self.ng(a);
        self.push(v, Op::Tanh(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.map(|x| T::one() / (T::one() + (-x).exp()));
        let ng = self.ng(a);
        self.push(v, Op::Sigmoid(a), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.map(|x| if x > T::zero() { x } else { T::zero() });
        let ng = self.ng(a);
        self.push(v, Op::Relu(a), ng)
    }

    /// Row-wise softmax. `-inf` entries get exactly zero probability.
    pub fn softmax(&mut self, a: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let mut out = av.clone();
        if av.cols > 0 {
            for row in out.data.chunks_mut(av.cols) {
                softmax_in_place(row);
            }
        }
        let ng = self.ng(a);
        self.push(out, Op::Softmax(a), ng)
    }

    /// Replaces entries where `mask` is true by `value`.
    pub fn masked_fill(&mut self, a: Var, mask: Vec<bool>, value: f64) -> Var {
        let av = &self.nodes[a.0].value;
        assert_eq!(mask.len(), av.len(), "mask size mismatch");
        let fill = T::from_f64(value);
        let mut out = av.clone();
        for (x, &m) in out.data.iter_mut().zip(&mask) {
            if m {
                *x = fill;
            }
        }
        let ng = self.ng(a);
        self.push(out, Op::MaskedFill { a, mask }, ng)
    }

    /// Sparse row recombination; accumulates in `f64`.
    pub fn row_mix(&mut self, a: Var, mix: Arc<RowMix>) -> Var {
        let av = &self.nodes[a.0].value;
        let cols = av.cols;
        let mut out = Tensor::zeros(mix.rows.len(), cols);
        let mut acc = vec![0.0f64; cols];
        for (i, terms) in mix.rows.iter().enumerate() {
            acc.iter_mut().for_each(|x| *x = 0.0);
            for &(j, w) in terms {
                assert!(j < av.rows, "row_mix source row {j} out of range");
                for (s, &x) in acc.iter_mut().zip(av.row(j)) {
                    *s += w * x.as_f64();
                }
            }
            for (o, &s) in out.row_mut(i).iter_mut().zip(&acc) {
                *o = T::from_f64(s);
            }
        }
        let ng = self.ng(a);
        self.push(out, Op::RowMix { a, mix }, ng)
    }

    /// Max over consecutive, non-overlapping windows of `window` rows.
    pub fn max_pool_rows(&mut self, a: Var, window: usize) -> Var {
        let av = &self.nodes[a.0].value;
        assert!(window >= 1 && av.rows % window == 0, "max_pool window must divide rows");
        let m = av.rows / window;
        let cols = av.cols;
        let mut out = Tensor::zeros(m, cols);
        let mut argmax = vec![0usize; m * cols];
        for b in 0..m {
            for c in 0..cols {
                let mut best = b * window;
                for r in b * window + 1..(b + 1) * window {
                    if av.get(r, c) > av.get(best, c) {
                        best = r;
                    }
                }
                argmax[b * cols + c] = best;
                out.data[b * cols + c] = av.get(best, c);
            }
        }
        let ng = self.ng(a);
        self.push(out, Op::MaxPool { a, argmax }, ng)
    }

    /// Embedding lookup: rows `ids` of `table`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let tv = &self.nodes[table.0].value;
        let mut out = Tensor::zeros(ids.len(), tv.cols);
        for (i, &id) in ids.iter().enumerate() {
            assert!(id < tv.rows, "embedding id {id} out of range ({} rows)", tv.rows);
            out.row_mut(i).copy_from_slice(tv.row(id));
        }
        let ng = self.ng(table);
        self.push(
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            ng,
        )
    }

    /// Row-wise layer normalization with learned gain and bias (`1×n`).
    pub fn layer_norm(&mut self, a: Var, gain: Var, bias: Var, eps: f64) -> Var {
        let av = &self.nodes[a.0].value;
        let (gv, bv) = (&self.nodes[gain.0].value, &self.nodes[bias.0].value);
        let n = av.cols;
        let mut out = Tensor::zeros(av.rows, n);
        let mut xhat = vec![T::zero(); av.len()];
        let mut rstd = vec![T::zero(); av.rows];
        for r in 0..av.rows {
            let row = av.row(r);
            let mean = row.iter().map(|x| x.as_f64()).sum::<f64>() / n as f64;
            let var = row.iter().map(|x| (x.as_f64() - mean).powi(2)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = T::from_f64(rs);
            for c in 0..n {
                let xh = T::from_f64((row[c].as_f64() - mean) * rs);
                xhat[r * n + c] = xh;
                out.data[r * n + c] = xh * gv.data[c] + bv.data[c];
            }
        }
        let ng = self.ng(a) || self.ng(gain) || self.ng(bias);
        self.push(
            out,
            Op::LayerNorm {
                a,
                gain,
                bias,
                xhat,
                rstd,
            },
            ng,
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.nodes[parts[0].0].value.rows;
        let total: usize = parts.iter().map(|p| self.nodes[p.0].value.cols).sum();
        let mut out = Tensor::zeros(rows, total);
        let mut off = 0;
        for p in parts {
            let pv = &self.nodes[p.0].value;
            assert_eq!(pv.rows, rows, "concat_cols row mismatch");
            for r in 0..rows {
                out.row_mut(r)[off..off + pv.cols].copy_from_slice(pv.row(r));
            }
            off += pv.cols;
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(out, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.nodes[parts[0].0].value.cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let pv = &self.nodes[p.0].value;
            assert_eq!(pv.cols, cols, "concat_rows column mismatch");
            data.extend_from_slice(&pv.data);
            rows += pv.rows;
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(Tensor::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let av = &self.nodes[a.0].value;
        assert!(start + len <= av.cols, "slice_cols out of range");
        let mut out = Tensor::zeros(av.rows, len);
        for r in 0..av.rows {
            out.row_mut(r).copy_from_slice(&av.row(r)[start..start + len]);
        }
        let ng = self.ng(a);
        self.push(out, Op::SliceCols { a, start }, ng)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let av = &self.nodes[a.0].value;
        assert!(start + len <= av.rows, "slice_rows out of range");
        let out = Tensor::from_vec(len, av.cols, av.data[start * av.cols..(start + len) * av.cols].to_vec());
        let ng = self.ng(a);
        self.push(out, Op::SliceRows { a, start }, ng)
    }

    /// Reinterprets the row-major buffer with a new shape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let av = &self.nodes[a.0].value;
        assert_eq!(av.len(), rows * cols, "reshape changes element count");
        let out = Tensor::from_vec(rows, cols, av.data.clone());
        let ng = self.ng(a);
        self.push(out, Op::Reshape(a), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.data.iter().map(|x| x.as_f64()).sum::<f64>();
        let ng = self.ng(a);
        self.push(Tensor::scalar(T::from_f64(s)), Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].value.len().max(1);
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// Cross-entropy against `(1 − s)·onehot + s/V`, averaged over rows whose
    /// target is `Some`. Rows with `None` (padding) are excluded.
    pub fn smoothed_ce(&mut self, logits: Var, targets: &[Option<usize>], smoothing: f64) -> Result<Var> {
        let lv = &self.nodes[logits.0].value;
        let (rows, vocab) = lv.shape();
        if targets.len() != rows {
            return Err(Error::Shape(format!("{} targets for {rows} logit rows", targets.len())));
        }
        if let Some(&id) = targets.iter().flatten().find(|&&t| t >= vocab) {
            return Err(Error::TargetOutOfRange { id, vocab });
        }
        let mut probs = vec![T::zero(); lv.len()];
        let mut total = 0.0f64;
        let mut count = 0usize;
        for r in 0..rows {
            let row = lv.row(r);
            let max = row.iter().fold(f64::NEG_INFINITY, |m, x| m.max(x.as_f64()));
            let lse = max + row.iter().map(|x| (x.as_f64() - max).exp()).sum::<f64>().ln();
            for c in 0..vocab {
                probs[r * vocab + c] = T::from_f64((row[c].as_f64() - lse).exp());
            }
            if let Some(t) = targets[r] {
                let logp_t = row[t].as_f64() - lse;
                let mean_logp = row.iter().map(|x| x.as_f64() - lse).sum::<f64>() / vocab as f64;
                total -= (1.0 - smoothing) * logp_t + smoothing * mean_logp;
                count += 1;
            }
        }
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        let ng = self.ng(logits);
        Ok(self.push(
            Tensor::scalar(T::from_f64(loss)),
            Op::SmoothedCe {
                logits,
                targets: targets.to_vec(),
                smoothing: T::from_f64(smoothing),
                count,
                probs,
            },
            ng,
        ))
    }

    /// Inverted dropout; identity unless the graph was built `with_dropout`.
    pub fn dropout(&mut self, a: Var, p: f64) -> Var {
        if p <= 0.0 || self.dropout_rng.is_none() {
            return a;
        }
        let n = self.nodes[a.0].value.len();
        let keep = T::from_f64(1.0 / (1.0 - p));
        let rng = self.dropout_rng.as_mut().expect("checked above");
        let mask: Vec<T> = (0..n)
            .map(|_| if rng.gen::<f64>() < p { T::zero() } else { keep })
            .collect();
        let av = &self.nodes[a.0].value;
        let out = Tensor::from_vec(
            av.rows,
            av.cols,
            av.data.iter().zip(&mask).map(|(&x, &m)| x * m).collect(),
        );
        let ng = self.ng(a);
        self.push(out, Op::Dropout { a, mask }, ng)
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, out: Var) -> Gradients<T> {
        assert_eq!(self.shape(out), (1, 1), "backward requires a scalar output");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(Tensor::scalar(T::one()));
        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        let mut params: Vec<(ParamId, Var)> = self.param_vars.iter().map(|(&id, &v)| (id, v)).collect();
        params.sort();
        Gradients { grads, params }
    }

    fn backprop_node(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let nodes = &self.nodes;
        macro_rules! with_slot {
            ($v:expr, |$t:ident| $body:block) => {
                if let Some($t) = grad_slot(nodes, grads, $v) {
                    $body
                }
            };
        }
        match &node.op {
            Op::Input | Op::Param => {}
            Op::MatMul { a, b, ta, tb } => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                with_slot!(*a, |ga| {
                    if *ta {
                        gemm_into(bv, *tb, g, true, &mut ga.data, T::one());
                    } else {
                        gemm_into(g, false, bv, !*tb, &mut ga.data, T::one());
                    }
                });
                with_slot!(*b, |gb| {
                    if *tb {
                        gemm_into(g, true, av, *ta, &mut gb.data, T::one());
                    } else {
                        gemm_into(av, !*ta, g, false, &mut gb.data, T::one());
                    }
                });
            }
            Op::Add(a, b) => {
                with_slot!(*a, |ga| { add_into(&mut ga.data, &g.data) });
                with_slot!(*b, |gb| { add_into(&mut gb.data, &g.data) });
            }
            Op::Sub(a, b) => {
                with_slot!(*a, |ga| { add_into(&mut ga.data, &g.data) });
                with_slot!(*b, |gb| {
                    for (d, &x) in gb.data.iter_mut().zip(&g.data) {
                        *d -= x;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                with_slot!(*a, |ga| {
                    for ((d, &x), &y) in ga.data.iter_mut().zip(&g.data).zip(&bv.data) {
                        *d += x * y;
                    }
                });
                with_slot!(*b, |gb| {
                    for ((d, &x), &y) in gb.data.iter_mut().zip(&g.data).zip(&av.data) {
                        *d += x * y;
                    }
                });
            }
            Op::AddRow(a, r) => {
                with_slot!(*a, |ga| { add_into(&mut ga.data, &g.data) });
                with_slot!(*r, |gr| {
                    for row in g.data.chunks(g.cols.max(1)) {
                        add_into(&mut gr.data, row);
                    }
                });
            }
            Op::MulRow(a, r) => {
                let (av, rv) = (&nodes[a.0].value, &nodes[r.0].value);
                let cols = g.cols.max(1);
                with_slot!(*a, |ga| {
                    for (drow, grow) in ga.data.chunks_mut(cols).zip(g.data.chunks(cols)) {
                        for ((d, &x), &y) in drow.iter_mut().zip(grow).zip(&rv.data) {
                            *d += x * y;
                        }
                    }
                });
                with_slot!(*r, |gr| {
                    for (grow, arow) in g.data.chunks(cols).zip(av.data.chunks(cols)) {
                        for ((d, &x), &y) in gr.data.iter_mut().zip(grow).zip(arow) {
                            *d += x * y;
                        }
                    }
                });
            }
            Op::MulCol(a, c) => {
                let (av, cv) = (&nodes[a.0].value, &nodes[c.0].value);
                let cols = g.cols.max(1);
                with_slot!(*a, |ga| {
                    for ((drow, grow), &s) in ga.data.chunks_mut(cols).zip(g.data.chunks(cols)).zip(&cv.data) {
                        for (d, &x) in drow.iter_mut().zip(grow) {
                            *d += x * s;
                        }
                    }
                });
                with_slot!(*c, |gc| {
                    for ((d, grow), arow) in gc.data.iter_mut().zip(g.data.chunks(cols)).zip(av.data.chunks(cols)) {
                        let mut s = T::zero();
                        for (&x, &y) in grow.iter().zip(arow) {
                            s += x * y;
                        }
                        *d += s;
                    }
                });
            }
            Op::Scale(a, s) => {
                with_slot!(*a, |ga| {
                    for (d, &x) in ga.data.iter_mut().zip(&g.data) {
                        *d += x * *s;
                    }
                });
            }
            Op::Tanh(a) => {
                with_slot!(*a, |ga| {
                    for ((d, &x), &y) in ga.data.iter_mut().zip(&g.data).zip(&node.value.data) {
                        *d += x * (T::one() - y * y);
                    }
                });
            }
            Op::Sigmoid(a) => {
                with_slot!(*a, |ga| {
                    for ((d, &x), &y) in ga.data.iter_mut().zip(&g.data).zip(&node.value.data) {
                        *d += x * y * (T::one() - y);
                    }
                });
            }
            Op::Relu(a) => {
                let av = &nodes[a.0].value;
                with_slot!(*a, |ga| {
                    for ((d, &x), &y) in ga.data.iter_mut().zip(&g.data).zip(&av.data) {
                        if y > T::zero() {
                            *d += x;
                        }
                    }
                });
            }
            Op::Softmax(a) => {
                let cols = g.cols.max(1);
                with_slot!(*a, |ga| {
                    for ((drow, grow), yrow) in ga
                        .data
                        .chunks_mut(cols)
                        .zip(g.data.chunks(cols))
                        .zip(node.value.data.chunks(cols))
                    {
                        let dot: T = grow.iter().zip(yrow).map(|(&x, &y)| x * y).sum();
                        for ((d, &x), &y) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d += y * (x - dot);
                        }
                    }
                });
            }
            Op::MaskedFill { a, mask } => {
                with_slot!(*a, |ga| {
                    for ((d, &x), &m) in ga.data.iter_mut().zip(&g.data).zip(mask) {
                        if !m {
                            *d += x;
                        }
                    }
                });
            }
            Op::RowMix { a, mix } => {
                with_slot!(*a, |ga| {
                    let cols = g.cols;
                    for (i, terms) in mix.rows.iter().enumerate() {
                        let grow = &g.data[i * cols..(i + 1) * cols];
                        for &(j, w) in terms {
                            let w = T::from_f64(w);
                            for (d, &x) in ga.row_mut(j).iter_mut().zip(grow) {
                                *d += w * x;
                            }
                        }
                    }
                });
            }
            Op::MaxPool { a, argmax } => {
                with_slot!(*a, |ga| {
                    let cols = g.cols;
                    for (k, &src) in argmax.iter().enumerate() {
                        ga.data[src * cols + k % cols] += g.data[k];
                    }
                });
            }
            Op::Gather { table, ids } => {
                with_slot!(*table, |gt| {
                    for (i, &id) in ids.iter().enumerate() {
                        add_into(gt.row_mut(id), g.row(i));
                    }
                });
            }
            Op::LayerNorm {
                a,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let n = g.cols;
                let gv = &nodes[gain.0].value;
                with_slot!(*gain, |gg| {
                    for r in 0..g.rows {
                        for c in 0..n {
                            gg.data[c] += g.data[r * n + c] * xhat[r * n + c];
                        }
                    }
                });
                with_slot!(*bias, |gb| {
                    for row in g.data.chunks(n.max(1)) {
                        add_into(&mut gb.data, row);
                    }
                });
                with_slot!(*a, |ga| {
                    let nf = T::from_f64(n as f64);
                    for r in 0..g.rows {
                        let mut mean_d = T::zero();
                        let mut mean_dx = T::zero();
                        for c in 0..n {
                            let dxh = g.data[r * n + c] * gv.data[c];
                            mean_d += dxh;
                            mean_dx += dxh * xhat[r * n + c];
                        }
                        mean_d = mean_d / nf;
                        mean_dx = mean_dx / nf;
                        for c in 0..n {
                            let dxh = g.data[r * n + c] * gv.data[c];
                            ga.data[r * n + c] += rstd[r] * (dxh - mean_d - xhat[r * n + c] * mean_dx);
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let pc = nodes[p.0].value.cols;
                    with_slot!(p, |gp| {
                        for r in 0..g.rows {
                            add_into(gp.row_mut(r), &g.row(r)[off..off + pc]);
                        }
                    });
                    off += pc;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let plen = nodes[p.0].value.len();
                    with_slot!(p, |gp| { add_into(&mut gp.data, &g.data[off..off + plen]) });
                    off += plen;
                }
            }
            Op::SliceCols { a, start } => {
                with_slot!(*a, |ga| {
                    for r in 0..g.rows {
                        add_into(&mut ga.row_mut(r)[*start..*start + g.cols], g.row(r));
                    }
                });
            }
            Op::SliceRows { a, start } => {
                with_slot!(*a, |ga| {
                    let off = start * g.cols;
                    add_into(&mut ga.data[off..off + g.len()], &g.data);
                });
            }
            Op::Reshape(a) => {
                with_slot!(*a, |ga| { add_into(&mut ga.data, &g.data) });
            }
            Op::Sum(a) => {
                let s = g.item();
                with_slot!(*a, |ga| { ga.data.iter_mut().for_each(|d| *d += s) });
            }
            Op::SmoothedCe {
                logits,
                targets,
                smoothing,
                count,
                probs,
            } => {
                if *count == 0 {
                    return;
                }
                let vocab = nodes[logits.0].value.cols;
                let scale = g.item() / T::from_f64(*count as f64);
                let uniform = *smoothing / T::from_f64(vocab as f64);
                with_slot!(*logits, |gl| {
                    for (r, t) in targets.iter().enumerate() {
                        let Some(t) = *t else { continue };
                        for c in 0..vocab {
                            let mut q = uniform;
                            if c == t {
                                q += T::one() - *smoothing;
                            }
                            gl.data[r * vocab + c] += scale * (probs[r * vocab + c] - q);
                        }
                    }
                });
            }
            Op::Dropout { a, mask } => {
                with_slot!(*a, |ga| {
                    for ((d, &x), &m) in ga.data.iter_mut().zip(&g.data).zip(mask) {
                        *d += x * m;
                    }
                });
            }
        }
    }
}

/// Accumulation buffer for `v`, or `None` when `v` needs no gradient.
fn grad_slot<'a, T: Real>(nodes: &[Node<T>], grads: &'a mut [Option<Tensor<T>>], v: Var) -> Option<&'a mut Tensor<T>> {
    if !nodes[v.0].needs_grad {
        return None;
    }
    let (r, c) = nodes[v.0].value.shape();
    Some(grads[v.0].get_or_insert_with(|| Tensor::zeros(r, c)))
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub(crate) fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
    if max == T::neg_infinity() {
        // fully masked row: leave a uniform distribution rather than NaN
        let u = T::one() / T::from_f64(row.len() as f64);
        row.iter_mut().for_each(|x| *x = u);
        return;
    }
    let mut sum = 0.0f64;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += x.as_f64();
    }
    let inv = T::from_f64(1.0 / sum);
    row.iter_mut().for_each(|x| *x = *x * inv);
}
