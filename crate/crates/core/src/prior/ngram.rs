use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::{log_softmax, PriorModel};
use crate::data::TokenId;
use crate::error::{Error, Result};

#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Smoothing {
    /// Laplace: one pseudo-count per vocabulary token.
    AddOne,
    AddK(f64),
}

impl Smoothing {
    fn pseudo_count(self) -> f64 {
        match self {
            Smoothing::AddOne => 1.0,
            Smoothing::AddK(k) => k,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
struct ContextCounts {
    total: u64,
    next: BTreeMap<TokenId, u64>,
}

/// Smoothed n-gram model over token ids.
///
/// Each corpus sequence is counted on its own: the token at position `i`
/// is conditioned on the `min(i, order - 1)` tokens before it, so the start
/// of a sequence has its own (shorter) contexts. Queries use the last
/// `min(len, order - 1)` context tokens.
#[derive(Clone, Debug)]
pub struct NGramPrior {
    order: usize,
    vocab_size: usize,
    smoothing: Smoothing,
    temperature: f64,
    counts: HashMap<Vec<TokenId>, ContextCounts>,
}

/// Counts every window of every corpus sequence.
pub fn train_ngram(
    corpus: &[Vec<TokenId>],
    order: usize,
    vocab_size: usize,
    smoothing: Smoothing,
) -> Result<NGramPrior> {
    if order == 0 {
        return Err(Error::param("n-gram order must be >= 1"));
    }
    if vocab_size < 2 {
        return Err(Error::VocabularySize(vocab_size));
    }
    if smoothing.pseudo_count() <= 0.0 {
        return Err(Error::param("smoothing pseudo-count must be positive"));
    }
    if corpus.iter().all(Vec::is_empty) {
        return Err(Error::EmptyCorpus);
    }
    let mut counts: HashMap<Vec<TokenId>, ContextCounts> = HashMap::new();
    for seq in corpus {
        for (i, &tok) in seq.iter().enumerate() {
            if tok.index() >= vocab_size {
                return Err(Error::TokenRange {
                    id: tok,
                    size: vocab_size,
                });
            }
            let start = i.saturating_sub(order - 1);
            let entry = counts.entry(seq[start..i].to_vec()).or_default();
            entry.total += 1;
            *entry.next.entry(tok).or_default() += 1;
        }
    }
    Ok(NGramPrior {
        order,
        vocab_size,
        smoothing,
        temperature: 1.0,
        counts,
    })
}

impl NGramPrior {
    pub fn order(&self) -> usize {
        self.order
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn with_temperature(mut self, temperature: f64) -> Result<Self> {
        if !(temperature > 0.0) {
            return Err(Error::param(format!(
                "temperature must be > 0, got {temperature}"
            )));
        }
        self.temperature = temperature;
        Ok(self)
    }

    /// Observed count of `next` after `context` (the context is truncated as
    /// for queries).
    pub fn count(&self, context: &[TokenId], next: TokenId) -> u64 {
        self.counts
            .get(self.key(context))
            .and_then(|c| c.next.get(&next).copied())
            .unwrap_or(0)
    }

    fn key<'a>(&self, context: &'a [TokenId]) -> &'a [TokenId] {
        &context[context.len().saturating_sub(self.order - 1)..]
    }

    fn smoothed_logprobs(&self, context: &[TokenId]) -> Vec<f64> {
        let alpha = self.smoothing.pseudo_count();
        let v = self.vocab_size as f64;
        let (total, next) = match self.counts.get(self.key(context)) {
            Some(c) => (c.total as f64, Some(&c.next)),
            None => (0.0, None),
        };
        let denom = (total + alpha * v).ln();
        let base = alpha.ln() - denom;
        let mut out = vec![base; self.vocab_size];
        if let Some(next) = next {
            for (&t, &c) in next {
                out[t.index()] = (c as f64 + alpha).ln() - denom;
            }
        }
        out
    }
}

impl PriorModel for NGramPrior {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn next_token_logprobs(&self, context: &[TokenId]) -> Result<Vec<f64>> {
        let lp = self.smoothed_logprobs(context);
        if self.temperature == 1.0 {
            Ok(lp)
        } else {
            Ok(log_softmax(&lp, self.temperature))
        }
    }

    fn next_token_logits(&self, context: &[TokenId]) -> Result<Vec<f64>> {
        Ok(self.smoothed_logprobs(context))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prior::logsumexp;

    const A: TokenId = TokenId(0);
    const B: TokenId = TokenId(1);

    #[test]
    fn unigram_counts() {
        let p = train_ngram(&[vec![A, B]], 1, 2, Smoothing::AddOne).unwrap();
        assert_eq!((p.count(&[], A), p.count(&[], B)), (1, 1));
        let p = train_ngram(&[vec![A, B, A, B]], 1, 2, Smoothing::AddOne).unwrap();
        let lp = p.next_token_logprobs(&[]).unwrap();
        assert!((lp[0] - 0.5f64.ln()).abs() < 1e-15);
        assert!((lp[1] - 0.5f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn bigram_counts_and_probabilities() {
        let p = train_ngram(&[vec![A, B, A, B]], 2, 2, Smoothing::AddOne).unwrap();
        assert_eq!((p.count(&[A], B), p.count(&[A], A)), (2, 0));
        assert_eq!((p.count(&[B], A), p.count(&[B], B)), (1, 0));
        let lp = p.next_token_logprobs(&[A]).unwrap();
        assert!((lp[1] - 0.75f64.ln()).abs() < 1e-15);
        assert!((lp[1] + 0.2877).abs() < 1e-4);
        // only the last token matters for a bigram
        assert_eq!(p.next_token_logprobs(&[B, A]).unwrap(), lp);
    }

    #[test]
    fn training_is_idempotent() {
        let corpus = vec![vec![A, B, B], vec![B, A]];
        let p = train_ngram(&corpus, 3, 2, Smoothing::AddOne).unwrap();
        let q = train_ngram(&corpus, 3, 2, Smoothing::AddOne).unwrap();
        assert_eq!(p.counts, q.counts);
    }

    #[test]
    fn distributions_are_normalized() {
        let corpus = vec![vec![
            TokenId(3),
            TokenId(1),
            TokenId(4),
            TokenId(1),
            TokenId(5),
        ]];
        let p = train_ngram(&corpus, 2, 7, Smoothing::AddOne).unwrap();
        for ctx in [vec![], vec![TokenId(1)], vec![TokenId(6)]] {
            assert!(logsumexp(&p.next_token_logprobs(&ctx).unwrap()).abs() < 1e-12);
        }
        let hot = p.with_temperature(2.5).unwrap();
        assert!(logsumexp(&hot.next_token_logprobs(&[TokenId(1)]).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(matches!(
            train_ngram(&[], 2, 2, Smoothing::AddOne),
            Err(Error::EmptyCorpus)
        ));
        assert!(train_ngram(&[vec![A]], 0, 2, Smoothing::AddOne).is_err());
        assert!(matches!(
            train_ngram(&[vec![TokenId(9)]], 1, 2, Smoothing::AddOne),
            Err(Error::TokenRange { .. })
        ));
    }
}
