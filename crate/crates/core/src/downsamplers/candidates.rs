//! N-gram window means over non-overlapping windows anchored at position 0.
//!
//! Position `i` belongs to window `[⌊i/n⌋·n, ⌊i/n⌋·n + n)`; the final partial
//! window averages over its true size.

use crate::error::{Error, Result};
use crate::numcore::{RowMix, Segments, Tensor};

/// Members of position `i`'s window (within a sequence of `len`), optionally
/// masked to positions whose δ-block does not come after `i`'s block.
fn window(i: usize, len: usize, n: usize, mask_delta: Option<usize>) -> Vec<usize> {
    let start = (i / n) * n;
    let end = (start + n).min(len);
    (start..end)
        .filter(|&j| mask_delta.is_none_or(|d| j / d <= i / d))
        .collect()
}

/// Row mix producing order-`n` candidates for every row of the packed batch.
pub fn ngram_mix(segs: &Segments, n: usize, mask_delta: Option<usize>) -> RowMix {
    let mut sets = Vec::with_capacity(segs.total());
    for (start, len) in segs.iter() {
        for i in 0..len {
            sets.push(window(i, len, n, mask_delta).into_iter().map(|j| start + j).collect());
        }
    }
    RowMix::means(sets)
}

fn apply(e: &Tensor<f64>, mix: &RowMix) -> Tensor<f64> {
    let mut out = Tensor::zeros(mix.rows.len(), e.cols);
    for (i, terms) in mix.rows.iter().enumerate() {
        for &(j, w) in terms {
            for (o, &x) in out.row_mut(i).iter_mut().zip(e.row(j)) {
                *o += w * x;
            }
        }
    }
    out
}

/// `C_n[i]` = mean of `e` over position `i`'s order-`n` window.
pub fn ngram_candidates(e: &Tensor<f64>, n: usize) -> Result<Tensor<f64>> {
    if n == 0 {
        return Err(Error::Config("n-gram order must be >= 1".into()));
    }
    Ok(apply(e, &ngram_mix(&Segments::single(e.rows), n, None)))
}

/// Like [`ngram_candidates`], but window members in later δ-blocks than `i`
/// are dropped from the mean.
pub fn masked_ngram_candidates(e: &Tensor<f64>, n: usize, delta: usize) -> Result<Tensor<f64>> {
    if n == 0 || delta == 0 {
        return Err(Error::Config("n-gram order and delta must be >= 1".into()));
    }
    Ok(apply(e, &ngram_mix(&Segments::single(e.rows), n, Some(delta))))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn column(values: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(values.len(), 1, values.to_vec())
    }

    #[test]
    fn unigram_is_identity() {
        let e = Tensor::from_vec(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(ngram_candidates(&e, 1).unwrap(), e);
    }

    #[test]
    fn bigram_means() {
        let c = ngram_candidates(&column(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]), 2).unwrap();
        assert_eq!(c.data, vec![1.5, 1.5, 3.5, 3.5, 5.5, 5.5]);
    }

    #[test]
    fn trigram_window_of_fourth_position() {
        assert_eq!(window(3, 12, 3, None), vec![3, 4, 5]);
    }

    #[test]
    fn masked_trigram_example() {
        let e = column(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let c = masked_ngram_candidates(&e, 3, 4).unwrap();
        // Window {3,4,5} straddles blocks 0 | 1: position 3 keeps {3}, while
        // 4 and 5 (right of the boundary) see the whole window.
        assert_eq!(c.data[3], 4.0);
        assert_eq!(c.data[4], 5.0);
        assert_eq!(c.data[5], 5.0);
        // Window {0,1,2} lies inside block 0, unchanged by the mask.
        assert_eq!(c.data[..3], ngram_candidates(&e, 3).unwrap().data[..3]);
        // The straddled block-initial position keeps only itself: its unigram.
        assert_eq!(c.data[3], e.data[3]);
    }

    #[test]
    fn partial_trailing_window() {
        let c = ngram_candidates(&column(&[1.0, 2.0, 3.0, 4.0, 9.0]), 2).unwrap();
        assert_eq!(c.data[4], 9.0);
        let c3 = ngram_candidates(&column(&[1.0, 2.0, 3.0, 4.0, 6.0]), 3).unwrap();
        assert_eq!(c3.data[3], 5.0);
    }

    #[test]
    fn zero_order_rejected() {
        assert!(ngram_candidates(&column(&[1.0]), 0).is_err());
    }

    /// Exhaustive comparison against a direct definition, L ≤ 16, d = 1.
    #[test]
    fn partition_matches_brute_force() {
        for len in 1..=16usize {
            let e = column(&(0..len).map(|i| ((i * 7 + 3) % 11) as f64 - 4.5).collect::<Vec<_>>());
            for n in 1..=5usize {
                let c = ngram_candidates(&e, n).unwrap();
                for delta in 1..=4usize {
                    let m = masked_ngram_candidates(&e, n, delta).unwrap();
                    for i in 0..len {
                        let mut sum = 0.0;
                        let mut cnt = 0.0;
                        let mut msum = 0.0;
                        let mut mcnt = 0.0;
                        for j in 0..len {
                            if j / n == i / n {
                                sum += e.data[j];
                                cnt += 1.0;
                                if j / delta <= i / delta {
                                    msum += e.data[j];
                                    mcnt += 1.0;
                                }
                            }
                        }
                        assert!((c.data[i] - sum / cnt).abs() < 1e-12);
                        assert!((m.data[i] - msum / mcnt).abs() < 1e-12);
                    }
                }
                // Constant on each window.
                for i in 1..len {
                    if i / n == (i - 1) / n {
                        assert_eq!(c.data[i], c.data[i - 1]);
                    }
                }
            }
        }
    }

    #[test]
    fn windows_stay_inside_segments() {
        let segs = Segments::from_lengths(&[3, 3]);
        let mix = ngram_mix(&segs, 2, None);
        assert_eq!(mix.rows[2], vec![(2, 1.0)]);
        assert_eq!(mix.rows[3], vec![(3, 0.5), (4, 0.5)]);
    }
}
