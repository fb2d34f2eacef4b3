//! Language-model priors over prompts.
//!
//! A prior scores token sequences; with a point-mass posterior on the
//! searched prompts its negative log-likelihood is the KL term of the
//! PAC-Bayes certificate.

mod bridge;
mod ngram;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

pub use bridge::OracleBridgePrior;
pub use ngram::{train_ngram, NGramPrior, Smoothing};

use crate::data::{PromptSet, TokenId};
use crate::error::{Error, Result};

/// Conditional next-token distribution over a fixed vocabulary.
pub trait PriorModel: Send + Sync {
    fn vocab_size(&self) -> usize;

    /// Log-probabilities of every vocabulary token following `context`.
    fn next_token_logprobs(&self, context: &[TokenId]) -> Result<Vec<f64>>;

    /// Raw next-token scores used for k-sigma pruning. Backends without
    /// logits report log-probabilities.
    fn next_token_logits(&self, context: &[TokenId]) -> Result<Vec<f64>> {
        self.next_token_logprobs(context)
    }

    /// `log p(tokens | context)` by the chain rule.
    fn sequence_logprob(&self, tokens: &[TokenId], context: &[TokenId]) -> Result<f64> {
        let mut ctx = context.to_vec();
        let mut total = 0.0;
        for &t in tokens {
            let lp = self.next_token_logprobs(&ctx)?;
            total += *lp.get(t.index()).ok_or(Error::TokenRange {
                id: t,
                size: lp.len(),
            })?;
            ctx.push(t);
        }
        Ok(total)
    }
}

/// Every token equally likely regardless of context.
#[derive(Copy, Clone, Debug)]
pub struct UniformPrior {
    vocab_size: usize,
}

impl UniformPrior {
    pub fn new(vocab_size: usize) -> Result<Self> {
        if vocab_size < 2 {
            return Err(Error::VocabularySize(vocab_size));
        }
        Ok(Self { vocab_size })
    }
}

impl PriorModel for UniformPrior {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn next_token_logprobs(&self, _context: &[TokenId]) -> Result<Vec<f64>> {
        Ok(vec![-(self.vocab_size as f64).ln(); self.vocab_size])
    }
}

/// Whether the shared initial prompt is charged in the KL.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KlPolicy {
    /// When false the initial prompt is free conditioning context; only
    /// sound when it was chosen without looking at the training data.
    pub initial_prompt_in_kl: bool,
}

impl Default for KlPolicy {
    fn default() -> Self {
        Self {
            initial_prompt_in_kl: true,
        }
    }
}

pub fn next_token_logprobs(p: &dyn PriorModel, context: &[TokenId]) -> Result<Vec<f64>> {
    p.next_token_logprobs(context)
}

pub fn sequence_logprob(
    p: &dyn PriorModel,
    tokens: &[TokenId],
    context: &[TokenId],
) -> Result<f64> {
    if tokens.is_empty() {
        return Err(Error::EmptyPrompt);
    }
    p.sequence_logprob(tokens, context)
}

/// KL of a point mass on `prompts` against the prior: the negative
/// log-probability of every class prompt.
pub fn point_mass_kl(p: &dyn PriorModel, prompts: &PromptSet, policy: KlPolicy) -> Result<f64> {
    let initial = &prompts.initial_prompt;
    let initial_cost = if policy.initial_prompt_in_kl && !initial.is_empty() {
        -p.sequence_logprob(initial, &[])?
    } else {
        0.0
    };
    let mut kl = 0.0;
    for (k, class) in prompts.class_prompts.iter().enumerate() {
        if class.is_empty() && initial.is_empty() {
            return Err(Error::EmptyPrompt.in_class(k));
        }
        kl += initial_cost;
        if !class.is_empty() {
            kl -= p
                .sequence_logprob(class, initial)
                .map_err(|e| e.in_class(k))?;
        }
    }
    Ok(kl.max(0.0))
}

/// Tokens whose next-token probability is within `delta` of the most likely
/// token, compared in probability space.
pub fn candidate_set_lm(
    p: &dyn PriorModel,
    context: &[TokenId],
    delta: f64,
) -> Result<Vec<TokenId>> {
    if !(delta >= 0.0) {
        return Err(Error::param(format!("delta must be >= 0, got {delta}")));
    }
    let probs: Vec<f64> = p
        .next_token_logprobs(context)?
        .iter()
        .map(|l| l.exp())
        .collect();
    let best = probs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(probs
        .iter()
        .enumerate()
        .filter(|(_, &q)| best - q <= delta)
        .map(|(i, _)| TokenId::from(i))
        .collect())
}

/// Union over class-name contexts of the tokens whose logit is at least
/// `max - k * sigma`, with `sigma` the population standard deviation of
/// that context's logits.
pub fn prune_vocab_ksigma(
    p: &dyn PriorModel,
    class_name_contexts: &[Vec<TokenId>],
    k: f64,
) -> Result<Vec<TokenId>> {
    if !(k > 0.0) {
        return Err(Error::param(format!("k must be > 0, got {k}")));
    }
    let mut keep = BTreeSet::new();
    for ctx in class_name_contexts {
        let logits = p.next_token_logits(ctx)?;
        keep.extend(ksigma_indices(&logits, k));
    }
    Ok(keep.into_iter().map(TokenId::from).collect())
}

pub(crate) fn ksigma_indices(logits: &[f64], k: f64) -> Vec<usize> {
    let finite: Vec<f64> = logits.iter().copied().filter(|v| v.is_finite()).collect();
    if finite.is_empty() {
        return Vec::new();
    }
    let n = finite.len() as f64;
    let mean = finite.iter().sum::<f64>() / n;
    let var = finite.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let max = finite.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let threshold = max - k * var.sqrt();
    logits
        .iter()
        .enumerate()
        .filter(|(_, &v)| v >= threshold)
        .map(|(i, _)| i)
        .collect()
}

pub(crate) fn log_softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    let scaled: Vec<f64> = logits.iter().map(|l| l / temperature).collect();
    let lse = logsumexp(&scaled);
    scaled.iter().map(|s| s - lse).collect()
}

pub fn logsumexp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Fixed distribution independent of context.
    struct Fixed(Vec<f64>);

    impl PriorModel for Fixed {
        fn vocab_size(&self) -> usize {
            self.0.len()
        }
        fn next_token_logprobs(&self, _: &[TokenId]) -> Result<Vec<f64>> {
            Ok(self.0.iter().map(|p| p.ln()).collect())
        }
    }

    fn ids(v: &[u32]) -> Vec<TokenId> {
        v.iter().map(|&i| TokenId(i)).collect()
    }

    #[test]
    fn uniform_sequence_and_kl() {
        let u = UniformPrior::new(4).unwrap();
        let lp = sequence_logprob(&u, &ids(&[1, 3]), &[]).unwrap();
        assert!((lp - 2.0 * 0.25f64.ln()).abs() < 1e-12);
        assert!((lp + 2.7726).abs() < 1e-4);
        let prompts = PromptSet::new(vec![ids(&[0]), ids(&[2])], vec![]);
        let kl = point_mass_kl(&u, &prompts, KlPolicy::default()).unwrap();
        assert!((kl - 2.0 * 4f64.ln()).abs() < 1e-12);
        assert!(matches!(
            sequence_logprob(&u, &[], &[]),
            Err(Error::EmptyPrompt)
        ));
    }

    #[test]
    fn initial_prompt_policy() {
        let u = UniformPrior::new(10).unwrap();
        let prompts = PromptSet::new(vec![ids(&[0]), ids(&[1]), ids(&[2])], ids(&[5, 6]));
        let charged = point_mass_kl(&u, &prompts, KlPolicy::default()).unwrap();
        let free = point_mass_kl(
            &u,
            &prompts,
            KlPolicy {
                initial_prompt_in_kl: false,
            },
        )
        .unwrap();
        let ln10 = 10f64.ln();
        assert!((charged - 9.0 * ln10).abs() < 1e-12);
        assert!((free - 3.0 * ln10).abs() < 1e-12);
    }

    #[test]
    fn lm_candidate_set_thresholds() {
        let p = Fixed(vec![0.6, 0.35, 0.05]);
        assert_eq!(candidate_set_lm(&p, &[], 0.3).unwrap(), ids(&[0, 1]));
        assert_eq!(candidate_set_lm(&p, &[], 0.0).unwrap(), ids(&[0]));
        assert_eq!(candidate_set_lm(&p, &[], 1.0).unwrap(), ids(&[0, 1, 2]));
        assert!(candidate_set_lm(&p, &[], -0.1).is_err());
    }

    #[test]
    fn ksigma_worked_example() {
        let logits = [5.0, 4.0, 1.0, 0.0];
        assert_eq!(ksigma_indices(&logits, 1.0), vec![0, 1]);
        assert_eq!(ksigma_indices(&logits, 2.0), vec![0, 1, 2]);
        assert_eq!(ksigma_indices(&logits, 3.0), vec![0, 1, 2, 3]);
    }

    #[test]
    fn logsumexp_of_log_softmax_is_zero() {
        let ls = log_softmax(&[3.0, -1.0, 0.5, 12.0], 0.7);
        assert!(logsumexp(&ls).abs() < 1e-12);
    }
}
