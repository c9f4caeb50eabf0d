//! Corpus-level evaluation: token accuracy, exact-match accuracy, and
//! 4-gram BLEU with brevity penalty.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;


use crate::error::{Error, Result};
use crate::tensor::fmath;

const MAX_NGRAM: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalMetrics {
    pub token_accuracy: f64,
    pub sequence_accuracy: f64,
    /// In [0, 100].
    pub bleu4: f64,
}

/// Score hypotheses against references, paired by index.
///
/// Token accuracy aligns the first `min(|hyp|, |ref|)` positions and divides
/// by `max(|hyp|, |ref|)`, so both substitutions and length errors count
/// against it. BLEU is corpus-level with clipped n-gram counts; orders with
/// no n-grams anywhere in the corpus (all-short sentences) are skipped, and
/// an empty hypothesis corpus scores 0.
pub fn metrics(hyps: &[Vec<usize>], refs: &[Vec<usize>]) -> Result<EvalMetrics> {
    if hyps.is_empty() || hyps.len() != refs.len() {
        return Err(Error::Config(alloc::format!(
            "metrics needs matched nonempty corpora, got {} hyps and {} refs",
            hyps.len(),
            refs.len()
        )));
    }
    let mut matches = 0usize;
    let mut denom = 0usize;
    let mut exact = 0usize;
    for (h, r) in hyps.iter().zip(refs.iter()) {
        matches += h.iter().zip(r.iter()).filter(|(a, b)| a == b).count();
        denom += h.len().max(r.len());
        exact += usize::from(h == r);
    }
    Ok(EvalMetrics {
        token_accuracy: if denom == 0 {
            1.0
        } else {
            matches as f64 / denom as f64
        },
        sequence_accuracy: exact as f64 / hyps.len() as f64,
        bleu4: corpus_bleu(hyps, refs),
    })
}

fn ngram_counts(seq: &[usize], n: usize) -> BTreeMap<&[usize], usize> {
    let mut counts = BTreeMap::new();
    if seq.len() >= n {
        for w in seq.windows(n) {
            *counts.entry(w).or_insert(0usize) += 1;
        }
    }
    counts
}

/// Corpus 4-gram BLEU in [0, 100].
pub fn corpus_bleu(hyps: &[Vec<usize>], refs: &[Vec<usize>]) -> f64 {
    let hyp_len: usize = hyps.iter().map(|h| h.len()).sum();
    let ref_len: usize = refs.iter().map(|r| r.len()).sum();
    if hyp_len == 0 {
        return 0.0;
    }
    let mut log_sum = 0.0f64;
    let mut orders = 0usize;
    for n in 1..=MAX_NGRAM {
        let mut matched = 0usize;
        let mut total = 0usize;
        for (h, r) in hyps.iter().zip(refs.iter()) {
            total += h.len().saturating_sub(n - 1).min(h.len());
            if h.len() < n {
                continue;
            }
            let rc = ngram_counts(r, n);
            for (gram, count) in ngram_counts(h, n) {
                matched += count.min(*rc.get(gram).unwrap_or(&0));
            }
        }
        if total == 0 {
            continue;
        }
        if matched == 0 {
            return 0.0;
        }
        log_sum += fmath::ln(matched as f64 / total as f64);
        orders += 1;
    }
    if orders == 0 {
        return 0.0;
    }
    let precision = fmath::exp(log_sum / orders as f64);
    let bp = if hyp_len >= ref_len {
        1.0
    } else {
        fmath::exp(1.0 - ref_len as f64 / hyp_len as f64)
    };
    100.0 * bp * precision
}

#[cfg(test)]
mod tests {
    use alloc::vec;

    use super::*;

    #[test]
    fn perfect_hypotheses() {
        let refs = vec![vec![3, 4, 5, 6, 7], vec![8, 9, 10, 11]];
        let m = metrics(&refs, &refs).unwrap();
        assert_eq!(m.token_accuracy, 1.0);
        assert_eq!(m.sequence_accuracy, 1.0);
        assert!((m.bleu4 - 100.0).abs() < 1e-9);
    }

    #[test]
    fn fully_disjoint_tokens_score_zero() {
        let hyps = vec![vec![3, 3, 3, 3]];
        let refs = vec![vec![4, 5, 6, 7]];
        let m = metrics(&hyps, &refs).unwrap();
        assert_eq!(m.token_accuracy, 0.0);
        assert_eq!(m.sequence_accuracy, 0.0);
        assert_eq!(m.bleu4, 0.0);
    }

    #[test]
    fn handcrafted_corpus_matches_brute_force_counts() {
        // Two sentences; work every precision out with literal loops.
        let hyps = vec![vec![3, 4, 5, 6], vec![7, 8, 9, 9, 9]];
        let refs = vec![vec![3, 4, 5, 7], vec![7, 8, 9, 10, 9]];

        let brute = |n: usize| -> (usize, usize) {
            let mut matched = 0;
            let mut total = 0;
            for (h, r) in hyps.iter().zip(refs.iter()) {
                let hgrams: Vec<&[usize]> = h.windows(n).collect();
                total += hgrams.len();
                let rgrams: Vec<&[usize]> = r.windows(n).collect();
                let mut used = vec![false; rgrams.len()];
                for g in hgrams {
                    if let Some(pos) = rgrams
                        .iter()
                        .enumerate()
                        .position(|(i, rg)| !used[i] && **rg == *g)
                    {
                        used[pos] = true;
                        matched += 1;
                    }
                }
            }
            (matched, total)
        };
        let mut log_sum = 0.0;
        for n in 1..=4 {
            let (matched, total) = brute(n);
            log_sum += fmath::ln(matched as f64 / total as f64);
        }
        let expected = 100.0 * (log_sum / 4.0).exp(); // equal lengths: BP = 1

        let got = corpus_bleu(&hyps, &refs);
        assert!((got - expected).abs() < 1e-6, "got {got} want {expected}");
    }

    #[test]
    fn brevity_penalty_punishes_short_hypotheses() {
        let hyps = vec![vec![3, 4]];
        let refs = vec![vec![3, 4, 5, 6]];
        // Unigram and bigram precision are 1; orders 3 and 4 have no
        // hypothesis n-grams and are skipped; BP = exp(1 - 4/2).
        let expected = 100.0 * (1.0f64 - 2.0).exp();
        let got = corpus_bleu(&hyps, &refs);
        assert!((got - expected).abs() < 1e-9, "got {got} want {expected}");
    }

    #[test]
    fn empty_hypotheses_score_zero() {
        let hyps = vec![vec![]];
        let refs = vec![vec![3, 4]];
        assert_eq!(corpus_bleu(&hyps, &refs), 0.0);
    }

    #[test]
    fn empty_corpus_is_an_error() {
        assert!(metrics(&[], &[]).is_err());
    }
}
