//! Corpus BLEU and character/sequence accuracy.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub metric: String,
    pub value: f64,
    /// Number of sentence pairs.
    pub support: usize,
    /// Clipped n-gram precisions (BLEU only), after smoothing.
    pub precisions: Vec<f64>,
    pub brevity_penalty: Option<f64>,
    /// Exact numerator/denominator for count-based metrics.
    pub counts: Option<(u64, u64)>,
    pub tokenization: Option<String>,
    pub smoothing: Option<String>,
}

impl EvalResult {
    fn ratio(metric: &str, num: u64, den: u64, support: usize) -> Self {
        Self {
            metric: metric.into(),
            value: if den == 0 { 0.0 } else { num as f64 / den as f64 },
            support,
            precisions: Vec::new(),
            brevity_penalty: None,
            counts: Some((num, den)),
            tokenization: None,
            smoothing: None,
        }
    }
}

fn check_pairs<A, B>(hyps: &[A], refs: &[B]) -> Result<()> {
    if hyps.len() != refs.len() {
        return Err(Error::LineCountMismatch {
            src: hyps.len(),
            tgt: refs.len(),
        });
    }
    if hyps.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    Ok(())
}

fn ngrams<'t, 'a>(tokens: &'t [&'a str], n: usize) -> HashMap<&'t [&'a str], u64> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus BLEU on whitespace tokens with uniform weights up to `max_n`.
///
/// An order with zero clipped matches gets precision `1 / (2 · hyp n-gram
/// count)` so the geometric mean stays defined. Orders for which the whole
/// corpus has no hypothesis n-grams (all sentences shorter than `n`) are left
/// out of the mean and reported as precision 0. With no unigram match at all
/// the score is 0.
pub fn corpus_bleu(hyps: &[String], refs: &[String], max_n: usize) -> Result<EvalResult> {
    check_pairs(hyps, refs)?;
    if max_n == 0 {
        return Err(Error::Config("max_n must be >= 1".into()));
    }
    let mut matches = vec![0u64; max_n];
    let mut totals = vec![0u64; max_n];
    let mut hyp_len = 0u64;
    let mut ref_len = 0u64;
    for (h, r) in hyps.iter().zip(refs) {
        let ht: Vec<&str> = h.split_whitespace().collect();
        let rt: Vec<&str> = r.split_whitespace().collect();
        hyp_len += ht.len() as u64;
        ref_len += rt.len() as u64;
        for n in 1..=max_n {
            let hc = ngrams(&ht, n);
            let rc = ngrams(&rt, n);
            for (g, &c) in &hc {
                matches[n - 1] += c.min(rc.get(g).copied().unwrap_or(0));
                totals[n - 1] += c;
            }
        }
    }
    let precisions: Vec<f64> = matches
        .iter()
        .zip(&totals)
        .map(|(&m, &t)| match (m, t) {
            (_, 0) => 0.0,
            (0, t) => 1.0 / (2.0 * t as f64),
            (m, t) => m as f64 / t as f64,
        })
        .collect();
    let bp = if hyp_len == 0 {
        0.0
    } else if hyp_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    let used: Vec<f64> = precisions
        .iter()
        .zip(&totals)
        .filter(|(_, &t)| t > 0)
        .map(|(&p, _)| p)
        .collect();
    let value = if used.is_empty() || matches[0] == 0 {
        0.0
    } else {
        let log_mean = used.iter().map(|p| p.ln()).sum::<f64>() / used.len() as f64;
        (100.0 * bp * log_mean.exp()).clamp(0.0, 100.0)
    };
    Ok(EvalResult {
        metric: "bleu".into(),
        value,
        support: hyps.len(),
        precisions,
        brevity_penalty: Some(bp),
        counts: None,
        tokenization: Some("whitespace".into()),
        smoothing: Some("zero-match precision floored at 1/(2*hyp_ngram_count); orders without hyp n-grams skipped; 0 when no unigram matches".into()),
    })
}

/// Positional character matches over `max(|h|, |r|)` per pair; positions
/// beyond the shorter string count as wrong.
pub fn char_accuracy(hyps: &[String], refs: &[String]) -> Result<EvalResult> {
    check_pairs(hyps, refs)?;
    let mut hit = 0u64;
    let mut total = 0u64;
    for (h, r) in hyps.iter().zip(refs) {
        let hc: Vec<char> = h.chars().collect();
        let rc: Vec<char> = r.chars().collect();
        hit += hc.iter().zip(&rc).filter(|(a, b)| a == b).count() as u64;
        total += hc.len().max(rc.len()) as u64;
    }
    Ok(EvalResult::ratio("char_accuracy", hit, total, hyps.len()))
}

pub fn sequence_accuracy(hyps: &[String], refs: &[String]) -> Result<EvalResult> {
    check_pairs(hyps, refs)?;
    let hit = hyps.iter().zip(refs).filter(|(h, r)| h == r).count() as u64;
    Ok(EvalResult::ratio(
        "sequence_accuracy",
        hit,
        hyps.len() as u64,
        hyps.len(),
    ))
}
