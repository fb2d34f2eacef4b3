//! Generalization certificates for 0-1 loss.
//!
//! All logarithms are natural. Bounds are never clipped at 1; a report
//! carries a `vacuous` flag instead.

use serde::{Deserialize, Serialize};

use crate::data::{EmbeddingDataset, PromptSet};
use crate::encoder::{class_embeddings, empirical_risk, TextEncoder};
use crate::error::{Error, Result};
use crate::prior::{point_mass_kl, KlPolicy, PriorModel};

pub const DEFAULT_DELTA: f64 = 0.01;

#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum Complexity {
    LogHypothesisCount(f64),
    Kl(f64),
}

impl Complexity {
    pub fn value(self) -> f64 {
        match self {
            Complexity::LogHypothesisCount(v) | Complexity::Kl(v) => v,
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundMethod {
    UniformConvergence,
    PromptUniformConvergence,
    McAllester,
    PromptPacBayes,
    ProbeGaussianPacBayes,
}

#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub empirical_risk: f64,
    pub n: usize,
    pub delta: f64,
    pub complexity: Complexity,
    pub bound: f64,
    pub vacuous: bool,
    pub method: BoundMethod,
}

impl BoundReport {
    fn new(
        r: f64,
        n: usize,
        delta: f64,
        complexity: Complexity,
        bound: f64,
        method: BoundMethod,
    ) -> Self {
        Self {
            empirical_risk: r,
            n,
            delta,
            complexity,
            bound,
            vacuous: bound >= 1.0,
            method,
        }
    }
}

fn check_inputs(r: f64, complexity: f64, n: usize, delta: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&r) {
        return Err(Error::param(format!("empirical risk {r} outside [0, 1]")));
    }
    if !(complexity >= 0.0 && complexity.is_finite()) {
        return Err(Error::param(format!(
            "complexity {complexity} must be finite and >= 0"
        )));
    }
    if n < 1 {
        return Err(Error::param("sample count must be >= 1"));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::param(format!("delta {delta} outside (0, 1)")));
    }
    Ok(())
}

/// Finite-class bound: `r + sqrt((log|H| + ln(1/delta)) / 2n)`.
pub fn uc_bound(r: f64, log_size: f64, n: usize, delta: f64) -> Result<f64> {
    check_inputs(r, log_size, n, delta)?;
    Ok(r + ((log_size + (1.0 / delta).ln()) / (2.0 * n as f64)).sqrt())
}

/// `log|H|` for `k` prompts of `l` tokens over `vocab_size` tokens.
pub fn prompt_log_size(l: usize, k: usize, vocab_size: usize) -> f64 {
    (l * k) as f64 * (vocab_size as f64).ln()
}

pub fn prompt_uc_bound(
    r: f64,
    l: usize,
    k: usize,
    vocab_size: usize,
    n: usize,
    delta: f64,
) -> Result<f64> {
    if l < 1 || k < 1 {
        return Err(Error::param("prompt length and class count must be >= 1"));
    }
    if vocab_size < 2 {
        return Err(Error::VocabularySize(vocab_size));
    }
    uc_bound(r, prompt_log_size(l, k, vocab_size), n, delta)
}

/// McAllester: `r + sqrt((KL + ln(n/delta) + 2) / (2n - 1))`.
pub fn mcallester_bound(r: f64, kl: f64, n: usize, delta: f64) -> Result<f64> {
    check_inputs(r, kl, n, delta)?;
    let n_f = n as f64;
    Ok(r + ((kl + (n_f / delta).ln() + 2.0) / (2.0 * n_f - 1.0)).sqrt())
}

/// McAllester with the point-mass KL of a single prompt set; holds for that
/// prompt set itself.
pub fn prompt_pac_bayes_bound(r: f64, kl: f64, n: usize, delta: f64) -> Result<f64> {
    mcallester_bound(r, kl, n, delta)
}

pub fn uc_report(r: f64, log_size: f64, n: usize, delta: f64) -> Result<BoundReport> {
    let b = uc_bound(r, log_size, n, delta)?;
    Ok(BoundReport::new(
        r,
        n,
        delta,
        Complexity::LogHypothesisCount(log_size),
        b,
        BoundMethod::PromptUniformConvergence,
    ))
}

pub fn pac_bayes_report(
    r: f64,
    kl: f64,
    n: usize,
    delta: f64,
    method: BoundMethod,
) -> Result<BoundReport> {
    let b = mcallester_bound(r, kl, n, delta)?;
    Ok(BoundReport::new(r, n, delta, Complexity::Kl(kl), b, method))
}

/// Both certificates for one prompt set, plus its risks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptEvaluation {
    pub train_risk: f64,
    pub test_risk: Option<f64>,
    pub kl: f64,
    pub uc: BoundReport,
    pub pac_bayes: BoundReport,
}

/// Train risk, optional test risk, and both bounds. The UC term counts
/// prompts over the full prior vocabulary.
pub fn evaluate_prompts(
    prompts: &PromptSet,
    train: &EmbeddingDataset,
    test: Option<&EmbeddingDataset>,
    encoder: &dyn TextEncoder,
    prior: &dyn PriorModel,
    policy: KlPolicy,
    delta: f64,
) -> Result<PromptEvaluation> {
    evaluate_prompts_restricted(
        prompts,
        train,
        test,
        encoder,
        prior,
        policy,
        delta,
        prior.vocab_size(),
    )
}

/// [`evaluate_prompts`] with the UC hypothesis count taken over a
/// restricted candidate vocabulary of `uc_vocab_size` tokens. Only a valid
/// certificate when the restriction was chosen without the training data.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_prompts_restricted(
    prompts: &PromptSet,
    train: &EmbeddingDataset,
    test: Option<&EmbeddingDataset>,
    encoder: &dyn TextEncoder,
    prior: &dyn PriorModel,
    policy: KlPolicy,
    delta: f64,
    uc_vocab_size: usize,
) -> Result<PromptEvaluation> {
    let ce = class_embeddings(encoder, prompts)?;
    let train_risk = empirical_risk(&ce, train)?;
    let test_risk = match test {
        Some(t) if !t.is_empty() => Some(empirical_risk(&ce, t)?),
        _ => None,
    };
    let kl = point_mass_kl(prior, prompts, policy)?;
    let log_size = prompt_log_size(
        prompts.max_len().max(1),
        prompts.num_classes(),
        uc_vocab_size.max(1),
    );
    Ok(PromptEvaluation {
        train_risk,
        test_risk,
        kl,
        uc: uc_report(train_risk, log_size, train.len(), delta)?,
        pac_bayes: pac_bayes_report(
            train_risk,
            kl,
            train.len(),
            delta,
            BoundMethod::PromptPacBayes,
        )?,
    })
}
