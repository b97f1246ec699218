//! Smoothed BLEU and leave-one-out self-diversity.
//!
//! Precision of order `n` is `m_n / l_n` (clipped matches over hypothesis
//! n-grams); a zero match count is replaced by `epsilon / max(l_n, 1)`.
//! Orders above the hypothesis length are left out of the geometric mean.
//! The brevity penalty uses the reference length closest to the hypothesis
//! length, preferring the shorter on ties.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ContinuationSet, Turn};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BleuConfig {
    pub max_ngram: usize,
    pub epsilon: f64,
}

impl Default for BleuConfig {
    fn default() -> Self {
        Self { max_ngram: 4, epsilon: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BleuError {
    #[error("self-diversity needs at least 2 continuations, found {0}")]
    TooFew(usize),
    #[error("max_ngram must be >= 1")]
    BadOrder,
    #[error("no references")]
    NoReferences,
}

fn ngram_counts<'t, 's>(tokens: &'t [&'s str], n: usize) -> HashMap<&'t [&'s str], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// BLEU of one tokenized hypothesis against tokenized references.
pub fn bleu(hypothesis: &[&str], references: &[Vec<&str>], config: &BleuConfig) -> Result<f64, BleuError> {
    if config.max_ngram == 0 {
        return Err(BleuError::BadOrder);
    }
    if references.is_empty() {
        return Err(BleuError::NoReferences);
    }
    let c = hypothesis.len();
    if c == 0 {
        return Ok(0.0);
    }
    let orders = config.max_ngram.min(c);
    let mut log_sum = 0.0;
    for n in 1..=orders {
        let hyp = ngram_counts(hypothesis, n);
        let mut max_ref: HashMap<&[&str], usize> = HashMap::new();
        for r in references {
            for (g, k) in ngram_counts(r, n) {
                let e = max_ref.entry(g).or_insert(0);
                *e = (*e).max(k);
            }
        }
        let matches: usize = hyp.iter().map(|(g, &k)| k.min(max_ref.get(g).copied().unwrap_or(0))).sum();
        let total = c + 1 - n;
        let p = if matches == 0 {
            config.epsilon / total.max(1) as f64
        } else {
            matches as f64 / total as f64
        };
        log_sum += p.ln();
    }
    let r = references
        .iter()
        .map(Vec::len)
        .min_by_key(|&len| (len.abs_diff(c), len))
        .expect("references non-empty");
    let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    Ok(bp * (log_sum / orders as f64).exp())
}

/// Whitespace tokens of all turn texts, in order.
pub fn continuation_tokens(turns: &[Turn]) -> Vec<&str> {
    turns.iter().flat_map(|t| t.text.split_whitespace()).collect()
}

/// Mean over `i` of BLEU(continuation `i`, the others as references).
pub fn bleu_self_diversity(cs: &ContinuationSet, config: &BleuConfig) -> Result<f64, BleuError> {
    let toks: Vec<Vec<&str>> = cs.continuations.iter().map(|c| continuation_tokens(c)).collect();
    self_bleu_tokens(&toks, config)
}

pub fn self_bleu_tokens(toks: &[Vec<&str>], config: &BleuConfig) -> Result<f64, BleuError> {
    if toks.len() < 2 {
        return Err(BleuError::TooFew(toks.len()));
    }
    let mut sum = 0.0;
    for i in 0..toks.len() {
        let refs: Vec<Vec<&str>> = toks.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, t)| t.clone()).collect();
        sum += bleu(&toks[i], &refs, config)?;
    }
    Ok(sum / toks.len() as f64)
}

/// Score of a length-`len` hypothesis sharing no token with equal-length
/// references: every order falls to the smoothing value.
pub fn disjoint_floor(len: usize, config: &BleuConfig) -> f64 {
    if len == 0 {
        return 0.0;
    }
    let orders = config.max_ngram.min(len);
    let log_sum: f64 = (1..=orders).map(|n| (config.epsilon / (len + 1 - n) as f64).ln()).sum();
    (log_sum / orders as f64).exp()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    #[test]
    fn identical_is_one() {
        let cfg = BleuConfig::default();
        assert!((bleu(&toks("a b c d e"), &[toks("a b c d e")], &cfg).unwrap() - 1.0).abs() < 1e-12);
        assert!((bleu(&toks("a b"), &[toks("a b")], &cfg).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn empty_and_brevity() {
        let cfg = BleuConfig::default();
        assert_eq!(bleu(&[], &[toks("a b")], &cfg).unwrap(), 0.0);
        let short = bleu(&toks("a b c d"), &[toks("a b c d e f g h")], &cfg).unwrap();
        assert!((short - (1.0f64 - 2.0).exp()).abs() < 1e-12);
        // Closest reference length wins.
        let b = bleu(&toks("a b c d"), &[toks("a b c d e f g h"), toks("a b c d")], &cfg).unwrap();
        assert!((b - 1.0).abs() < 1e-12);
    }

    #[test]
    fn floor_below_one_percent_at_twenty_tokens() {
        assert!(disjoint_floor(20, &BleuConfig::default()) < 0.01);
    }

    #[test]
    fn too_few() {
        assert_eq!(self_bleu_tokens(&[toks("a")], &BleuConfig::default()), Err(BleuError::TooFew(1)));
    }
}
