use crate::numcore::{Real, Segments, Tensor};

/// Fixed transformer sin/cos table: channel `2i` is `sin(pos / 10000^(2i/d))`,
/// channel `2i+1` the matching cosine.
pub fn sinusoidal_table(len: usize, d: usize) -> Tensor<f64> {
    let mut t = Tensor::zeros(len, d);
    for pos in 0..len {
        let row = t.row_mut(pos);
        for i in (0..d).step_by(2) {
            let angle = pos as f64 / 10000f64.powf(i as f64 / d as f64);
            row[i] = angle.sin();
            if i + 1 < d {
                row[i + 1] = angle.cos();
            }
        }
    }
    t
}

/// Sinusoidal rows for a packed batch, positions restarting per segment.
pub fn segment_positions<T: Real>(segs: &Segments, d: usize) -> Tensor<T> {
    let max = segs.iter().map(|(_, l)| l).max().unwrap_or(0);
    let table = sinusoidal_table(max, d);
    let mut out = Tensor::zeros(segs.total(), d);
    for (start, len) in segs.iter() {
        for p in 0..len {
            for (o, &v) in out.row_mut(start + p).iter_mut().zip(table.row(p)) {
                *o = T::from_f64(v);
            }
        }
    }
    out
}
