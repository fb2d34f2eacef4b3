//! Sequential coordinate-wise prompt search.
//!
//! Prompts grow one token at a time. In each of `length` rounds the classes
//! are visited in a freshly shuffled order, and each visited class gets the
//! candidate token that maximizes the search criterion with every other
//! class held fixed. A class whose prompt (initial prompt included) is still
//! empty scores 0 against every input.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{EmbeddingDataset, PromptSet, TokenId, Vocabulary};
use crate::encoder::{class_embeddings_partial, dot, empirical_risk, TextEncoder};
use crate::error::{Error, Result};
use crate::prior::{candidate_set_lm, PriorModel};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Criterion {
    /// Maximize training accuracy.
    Greedy,
    /// Training accuracy plus `beta` times the prior log-probability of the
    /// new token.
    Regularized { beta: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CandidatePolicy {
    Full,
    /// Tokens within `delta` (probability) of the prior's most likely next token.
    LmDelta {
        delta: f64,
    },
    FixedSet {
        tokens: Vec<TokenId>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    /// Tokens appended to every class prompt.
    pub length: usize,
    pub criterion: Criterion,
    pub candidates: CandidatePolicy,
    #[serde(default)]
    pub initial_prompt: Vec<TokenId>,
    pub seed: u64,
}

impl SearchConfig {
    pub fn greedy(length: usize, seed: u64) -> Self {
        Self {
            length,
            criterion: Criterion::Greedy,
            candidates: CandidatePolicy::Full,
            initial_prompt: Vec::new(),
            seed,
        }
    }

    pub fn regularized(length: usize, beta: f64, seed: u64) -> Self {
        Self {
            criterion: Criterion::Regularized { beta },
            ..Self::greedy(length, seed)
        }
    }

    pub fn with_candidates(mut self, candidates: CandidatePolicy) -> Self {
        self.candidates = candidates;
        self
    }

    pub fn with_initial_prompt(mut self, initial_prompt: Vec<TokenId>) -> Self {
        self.initial_prompt = initial_prompt;
        self
    }

    pub fn needs_prior(&self) -> bool {
        matches!(self.criterion, Criterion::Regularized { .. })
            || matches!(self.candidates, CandidatePolicy::LmDelta { .. })
    }

    pub fn validate(&self) -> Result<()> {
        if self.length < 1 {
            return Err(Error::param("search length must be >= 1"));
        }
        if let Criterion::Regularized { beta } = self.criterion {
            if !(beta >= 0.0) {
                return Err(Error::param(format!("beta must be >= 0, got {beta}")));
            }
        }
        if let CandidatePolicy::LmDelta { delta } = self.candidates {
            if !(delta >= 0.0) {
                return Err(Error::param(format!("delta must be >= 0, got {delta}")));
            }
        }
        Ok(())
    }
}

/// One class extended by one token.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub l: usize,
    pub class: usize,
    pub token: TokenId,
    pub criterion: f64,
    pub train_risk: f64,
    pub candidates: usize,
    /// Running `-sum log p` of every token chosen so far (regularized runs).
    pub cum_kl: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SearchTrace {
    pub steps: Vec<TraceStep>,
}

impl SearchTrace {
    pub const CSV_HEADER: &'static str =
        "l,k,token_id,token_text,criterion,train_risk,candidates,cum_kl";

    pub fn to_csv(&self, vocab: &Vocabulary) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for s in &self.steps {
            let text = vocab.token(s.token).unwrap_or("");
            let cum = s.cum_kl.map(|v| format!("{v}")).unwrap_or_default();
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                s.l,
                s.class,
                s.token,
                csv_field(text),
                s.criterion,
                s.train_risk,
                s.candidates,
                cum
            );
        }
        out
    }
}

pub(crate) fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchOutcome {
    pub prompts: PromptSet,
    pub trace: SearchTrace,
}

/// The class visit order of every round, drawn from one seeded stream.
pub fn class_orders(classes: usize, length: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..length)
        .map(|_| {
            let mut order: Vec<usize> = (0..classes).collect();
            order.shuffle(&mut rng);
            order
        })
        .collect()
}

fn extended(prompts: &PromptSet, k: usize, v: TokenId) -> PromptSet {
    let mut next = prompts.clone();
    next.class_prompts[k].push(v);
    next
}

/// Negative training risk of `prompts` with class `k` extended by `v`,
/// computed by re-encoding every class.
pub fn greedy_criterion(
    v: TokenId,
    prompts: &PromptSet,
    k: usize,
    encoder: &dyn TextEncoder,
    train: &EmbeddingDataset,
) -> Result<f64> {
    let ce = class_embeddings_partial(encoder, &extended(prompts, k, v))?;
    Ok(-empirical_risk(&ce, train)?)
}

/// [`greedy_criterion`] plus `beta * log p(v | initial prompt ++ prompt k)`.
pub fn regularized_criterion(
    v: TokenId,
    prompts: &PromptSet,
    k: usize,
    encoder: &dyn TextEncoder,
    prior: &dyn PriorModel,
    beta: f64,
    train: &EmbeddingDataset,
) -> Result<f64> {
    let lp = prior.next_token_logprobs(&prompts.full_prompt(k))?;
    let g = greedy_criterion(v, prompts, k, encoder, train)?;
    Ok(g + beta * lp[v.index()])
}

/// Position of the highest score; the earliest wins ties. Candidates are
/// kept in ascending id order, so that is the lowest token id.
fn best_index(scores: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &s) in scores.iter().enumerate() {
        if best.map_or(true, |(_, b)| s > b) {
            best = Some((i, s));
        }
    }
    best.map(|(i, _)| i)
}

#[derive(Copy, Clone, Debug, PartialEq)]
pub struct StepChoice {
    pub token: TokenId,
    pub criterion: f64,
}

/// Scores every candidate with `criterion` and appends the best one to the
/// prompt of class `k`. Ties go to the lowest token id.
pub fn search_step<F>(
    prompts: &mut PromptSet,
    k: usize,
    candidates: &[TokenId],
    criterion: F,
) -> Result<StepChoice>
where
    F: Fn(TokenId) -> Result<f64> + Sync,
{
    let mut sorted = candidates.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.is_empty() {
        return Err(Error::EmptyCandidates {
            step: prompts.class_prompts[k].len(),
            class: k,
        });
    }
    let scores = sorted
        .par_iter()
        .map(|&v| criterion(v))
        .collect::<Result<Vec<_>>>()?;
    let i = best_index(&scores).expect("non-empty candidates");
    prompts.class_prompts[k].push(sorted[i]);
    Ok(StepChoice {
        token: sorted[i],
        criterion: scores[i],
    })
}

/// Per-row class scores, updated one class column at a time.
struct ScoreTable<'a> {
    train: &'a EmbeddingDataset,
    classes: usize,
    scores: Vec<f64>,
}

impl<'a> ScoreTable<'a> {
    fn new(
        train: &'a EmbeddingDataset,
        encoder: &dyn TextEncoder,
        prompts: &PromptSet,
    ) -> Result<Self> {
        let ce = class_embeddings_partial(encoder, prompts)?;
        let classes = prompts.num_classes();
        let mut table = Self {
            train,
            classes,
            scores: vec![0.0; train.len() * classes],
        };
        for k in 0..classes {
            table.set_class(k, ce.row(k));
        }
        Ok(table)
    }

    fn set_class(&mut self, k: usize, row: &[f64]) {
        for i in 0..self.train.len() {
            self.scores[i * self.classes + k] = dot(self.train.row(i), row);
        }
    }

    /// Best competitor of class `k` on every row: (score, class), lowest
    /// class index among equal scores.
    fn rivals(&self, k: usize) -> Vec<(f64, usize)> {
        (0..self.train.len())
            .map(|i| {
                let row = &self.scores[i * self.classes..(i + 1) * self.classes];
                let mut best = (f64::NEG_INFINITY, usize::MAX);
                for (j, &s) in row.iter().enumerate() {
                    if j != k && (s > best.0 || best.1 == usize::MAX) {
                        best = (s, j);
                    }
                }
                best
            })
            .collect()
    }

    /// Training risk if class `k` had embedding `row`.
    fn risk_with(&self, k: usize, row: &[f64], rivals: &[(f64, usize)]) -> f64 {
        let labels = self.train.labels();
        let errors = rivals
            .iter()
            .enumerate()
            .filter(|&(i, &(rival, rival_class))| {
                let s = dot(self.train.row(i), row);
                let pred =
                    if rival_class == usize::MAX || s > rival || (s == rival && k < rival_class) {
                        k
                    } else {
                        rival_class
                    };
                pred != labels[i] as usize
            })
            .count();
        errors as f64 / self.train.len() as f64
    }
}

/// Runs the full search. `prior` is required for regularized criteria and
/// LM candidate sets; `vocab_size` bounds the full candidate set.
pub fn sequential_search(
    config: &SearchConfig,
    train: &EmbeddingDataset,
    encoder: &dyn TextEncoder,
    vocab_size: usize,
    prior: Option<&dyn PriorModel>,
) -> Result<SearchOutcome> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if config.needs_prior() && prior.is_none() {
        return Err(Error::param("this search configuration needs a prior"));
    }
    if train.dim() != encoder.dim() {
        return Err(Error::Dimension {
            expected: encoder.dim(),
            found: train.dim(),
        });
    }
    let fixed = match &config.candidates {
        CandidatePolicy::Full => Some((0..vocab_size).map(TokenId::from).collect::<Vec<_>>()),
        CandidatePolicy::FixedSet { tokens } => {
            let mut t = tokens.clone();
            t.sort_unstable();
            t.dedup();
            if let Some(&bad) = t.iter().find(|t| t.index() >= vocab_size) {
                return Err(Error::TokenRange {
                    id: bad,
                    size: vocab_size,
                });
            }
            Some(t)
        }
        CandidatePolicy::LmDelta { .. } => None,
    };

    let classes = train.num_classes();
    let mut prompts = PromptSet::empty(classes, config.initial_prompt.clone());
    let mut table = ScoreTable::new(train, encoder, &prompts)?;
    let mut trace = SearchTrace::default();
    let mut cum_kl = 0.0;

    for (l, order) in class_orders(classes, config.length, config.seed)
        .into_iter()
        .enumerate()
    {
        for k in order {
            let context = prompts.full_prompt(k);
            let logprobs = match (prior, config.needs_prior()) {
                (Some(p), true) => Some(p.next_token_logprobs(&context)?),
                _ => None,
            };
            let candidates = match (&config.candidates, &fixed) {
                (_, Some(f)) => f.clone(),
                (CandidatePolicy::LmDelta { delta }, None) => {
                    candidate_set_lm(prior.expect("checked above"), &context, *delta)?
                }
                _ => unreachable!(),
            };
            if candidates.is_empty() {
                return Err(Error::EmptyCandidates { step: l, class: k });
            }
            let rivals = table.rivals(k);
            let scored = candidates
                .par_iter()
                .map(|&v| {
                    let mut full = context.clone();
                    full.push(v);
                    let row = encoder.encode(&full).map_err(|e| e.in_class(k))?;
                    let risk = table.risk_with(k, &row, &rivals);
                    let crit = match (&logprobs, &config.criterion) {
                        (Some(lp), Criterion::Regularized { beta }) => -risk + beta * lp[v.index()],
                        _ => -risk,
                    };
                    Ok((crit, risk, row))
                })
                .collect::<Result<Vec<_>>>()?;
            let criteria: Vec<f64> = scored.iter().map(|s| s.0).collect();
            let best = best_index(&criteria).expect("non-empty candidates");
            let token = candidates[best];
            let (crit, risk, row) = scored.into_iter().nth(best).expect("index in range");

            prompts.class_prompts[k].push(token);
            table.set_class(k, &row);
            let step_kl = match (&logprobs, &config.criterion) {
                (Some(lp), Criterion::Regularized { .. }) => {
                    cum_kl -= lp[token.index()];
                    Some(cum_kl)
                }
                _ => None,
            };
            trace.steps.push(TraceStep {
                l,
                class: k,
                token,
                criterion: crit,
                train_risk: risk,
                candidates: candidates.len(),
                cum_kl: step_kl,
            });
        }
    }
    Ok(SearchOutcome { prompts, trace })
}
