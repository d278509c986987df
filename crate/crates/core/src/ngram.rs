//! Count-based N-gram models with add-k smoothing, and corpus cross-entropy
//! for any [`LanguageModel`].

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{LmError, Result};
use crate::lm::LanguageModel;
use crate::tensor::log_softmax;
use crate::text::BOS;

#[derive(Clone, Debug, PartialEq)]
pub struct NGramModel {
    order: usize,
    k: f64,
    vocab_size: usize,
    counts: BTreeMap<Vec<usize>, BTreeMap<usize, u64>>,
    totals: BTreeMap<Vec<usize>, u64>,
}

/// Fits an order-`order` model. Contexts at the start of the sequence are
/// padded with BOS so every position is counted.
pub fn fit_ngram(ids: &[usize], order: usize, k: f64, vocab_size: usize) -> Result<NGramModel> {
    if order == 0 {
        return Err(LmError::Config("n-gram order must be at least 1".into()));
    }
    if !(k >= 0.0 && k.is_finite()) {
        return Err(LmError::Config(format!("smoothing constant k = {k} must be finite and >= 0")));
    }
    if ids.len() < order {
        return Err(LmError::Data(format!(
            "sequence of {} tokens is shorter than the order {order}",
            ids.len()
        )));
    }
    if let Some(&bad) = ids.iter().find(|&&i| i >= vocab_size) {
        return Err(LmError::Data(format!("token id {bad} outside vocabulary of {vocab_size}")));
    }
    let mut padded = vec![BOS; order - 1];
    padded.extend_from_slice(ids);
    let mut counts: BTreeMap<Vec<usize>, BTreeMap<usize, u64>> = BTreeMap::new();
    let mut totals: BTreeMap<Vec<usize>, u64> = BTreeMap::new();
    for window in padded.windows(order) {
        let (ctx, next) = window.split_at(order - 1);
        *counts.entry(ctx.to_vec()).or_default().entry(next[0]).or_default() += 1;
        *totals.entry(ctx.to_vec()).or_default() += 1;
    }
    Ok(NGramModel {
        order,
        k,
        vocab_size,
        counts,
        totals,
    })
}

impl NGramModel {
    pub fn order(&self) -> usize {
        self.order
    }

    pub fn k(&self) -> f64 {
        self.k
    }

    /// BOS-padded or truncated to the last `order - 1` ids.
    pub fn context_key(&self, context: &[usize]) -> Vec<usize> {
        let n = self.order - 1;
        if context.len() >= n {
            context[context.len() - n..].to_vec()
        } else {
            let mut key = vec![BOS; n - context.len()];
            key.extend_from_slice(context);
            key
        }
    }

    pub fn count(&self, context: &[usize], w: usize) -> u64 {
        self.counts
            .get(context)
            .and_then(|m| m.get(&w))
            .copied()
            .unwrap_or(0)
    }

    pub fn total(&self, context: &[usize]) -> u64 {
        self.totals.get(context).copied().unwrap_or(0)
    }

    pub fn counts(&self) -> &BTreeMap<Vec<usize>, BTreeMap<usize, u64>> {
        &self.counts
    }

    /// `(count(ctx, w) + k) / (total(ctx) + k |W|)`; an unseen context with
    /// `k = 0` has no defined distribution.
    pub fn cond_prob(&self, context: &[usize], w: usize) -> Result<f64> {
        let key = self.context_key(context);
        let total = self.total(&key) as f64;
        let denom = total + self.k * self.vocab_size as f64;
        if denom == 0.0 {
            return Err(LmError::UndefinedContext { context: key });
        }
        Ok((self.count(&key, w) as f64 + self.k) / denom)
    }

    /// `context<TAB>token<TAB>count` lines sorted by context then token; the
    /// context is space-separated ids.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for (ctx, nexts) in &self.counts {
            let ctx_s = ctx.iter().map(usize::to_string).collect::<Vec<_>>().join(" ");
            for (w, c) in nexts {
                writeln!(out, "{ctx_s}\t{w}\t{c}").expect("writing to a String");
            }
        }
        out
    }
}

impl LanguageModel for NGramModel {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn next_logits(&self, prefix: &[usize]) -> Result<Vec<f64>> {
        let key = self.context_key(prefix);
        let total = self.total(&key) as f64;
        let denom = total + self.k * self.vocab_size as f64;
        if denom == 0.0 {
            return Err(LmError::UndefinedContext { context: key });
        }
        Ok((0..self.vocab_size)
            .map(|w| ((self.count(&key, w) as f64 + self.k) / denom).ln())
            .collect())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PerplexityReport {
    /// Mean negative log-likelihood in nats per token.
    pub cross_entropy: f64,
    pub perplexity: f64,
    pub tokens: usize,
    /// First position scored with zero probability (or an undefined
    /// distribution), if any; the cross-entropy is then `+inf`.
    pub zero_probability_at: Option<usize>,
}

/// `L = -(1/n) sum_i ln P(w_i | w_<i)` and `exp(L)`.
pub fn perplexity<M: LanguageModel + ?Sized>(model: &M, ids: &[usize]) -> Result<PerplexityReport> {
    if ids.is_empty() {
        return Err(LmError::Data("cannot score an empty sequence".into()));
    }
    let mut nll = 0.0;
    match model.sequence_logits(ids) {
        Ok(logits) => {
            for (i, (row, &w)) in logits.iter().zip(ids).enumerate() {
                let lp = log_softmax(row, 1.0)[w];
                if !lp.is_finite() {
                    return Ok(infinite(ids.len(), i));
                }
                nll -= lp;
            }
        }
        Err(LmError::UndefinedContext { .. }) => {
            // Score position by position to find the first failure.
            for (i, &w) in ids.iter().enumerate() {
                let lp = match model.next_logits(&ids[..i]) {
                    Ok(row) => log_softmax(&row, 1.0)[w],
                    Err(LmError::UndefinedContext { .. }) => f64::NAN,
                    Err(e) => return Err(e),
                };
                if !lp.is_finite() {
                    return Ok(infinite(ids.len(), i));
                }
                nll -= lp;
            }
        }
        Err(e) => return Err(e),
    }
    let ce = nll / ids.len() as f64;
    Ok(PerplexityReport {
        cross_entropy: ce,
        perplexity: ce.exp(),
        tokens: ids.len(),
        zero_probability_at: None,
    })
}

fn infinite(tokens: usize, at: usize) -> PerplexityReport {
    PerplexityReport {
        cross_entropy: f64::INFINITY,
        perplexity: f64::INFINITY,
        tokens,
        zero_probability_at: Some(at),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::UniformModel;

    // ids: a = 3, b = 4
    const A: usize = 3;
    const B: usize = 4;

    #[test]
    fn alternating_bigram_is_deterministic() {
        let m = fit_ngram(&[A, B, A, B, A], 2, 0.0, 5).unwrap();
        assert_eq!(m.cond_prob(&[A], B).unwrap(), 1.0);
        assert_eq!(m.cond_prob(&[B], A).unwrap(), 1.0);
        let r = perplexity(&m, &[A, B, A, B, A]).unwrap();
        assert_eq!(r.cross_entropy, 0.0);
        assert_eq!(r.perplexity, 1.0);
    }

    #[test]
    fn unigram_frequencies() {
        let m = fit_ngram(&[A, A, B], 1, 0.0, 5).unwrap();
        assert!((m.cond_prob(&[], A).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!((m.cond_prob(&[], B).unwrap() - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn smoothed_unseen_context_is_uniform() {
        let m = fit_ngram(&[A, B, A], 2, 1.0, 6).unwrap();
        for w in 0..6 {
            assert!((m.cond_prob(&[5], w).unwrap() - 1.0 / 6.0).abs() < 1e-15);
        }
    }

    #[test]
    fn unseen_context_without_smoothing_is_undefined() {
        let m = fit_ngram(&[A, B, A], 2, 0.0, 6).unwrap();
        assert!(matches!(m.cond_prob(&[5], A), Err(LmError::UndefinedContext { .. })));
    }

    #[test]
    fn zero_probability_reports_position() {
        let m = fit_ngram(&[A, B, A, B], 2, 0.0, 5).unwrap();
        let r = perplexity(&m, &[A, B, B]).unwrap();
        assert!(r.cross_entropy.is_infinite());
        assert_eq!(r.zero_probability_at, Some(2));
        let r = perplexity(&m, &[A, 2, A]).unwrap();
        assert_eq!(r.zero_probability_at, Some(1));
    }

    #[test]
    fn uniform_cross_entropy_is_log_vocab() {
        let r = perplexity(&UniformModel { vocab_size: 16 }, &[1, 5, 9, 3]).unwrap();
        assert!((r.cross_entropy - 16f64.ln()).abs() < 1e-12);
        assert!((r.perplexity - 16.0).abs() < 1e-9);
    }

    #[test]
    fn smoothed_rows_sum_to_one() {
        let m = fit_ngram(&[3, 4, 5, 3, 3, 4, 6], 3, 0.5, 7).unwrap();
        for ctx in [vec![3, 4], vec![0, 0], vec![6, 6]] {
            let s: f64 = (0..7).map(|w| m.cond_prob(&ctx, w).unwrap()).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn short_sequence_rejected() {
        assert!(matches!(fit_ngram(&[3], 2, 0.0, 5), Err(LmError::Data(_))));
    }

    #[test]
    fn dump_is_sorted_tsv() {
        let m = fit_ngram(&[A, B, A], 2, 0.0, 5).unwrap();
        assert_eq!(m.dump(), "0\t3\t1\n3\t4\t1\n4\t3\t1\n");
    }

    #[test]
    fn smoothing_lowers_dominant_probability() {
        let m = |k| fit_ngram(&[A, B, A, B, A, A], 2, k, 5).unwrap();
        let mut prev = f64::INFINITY;
        for k in [0.0, 0.1, 0.5, 1.0, 3.0] {
            let p = m(k).cond_prob(&[A], B).unwrap();
            assert!(p < prev);
            prev = p;
        }
    }
}
