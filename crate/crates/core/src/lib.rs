//! Discrete prompt search for zero-shot embedding classifiers, with
//! uniform-convergence and PAC-Bayes generalization certificates.
//!
//! The usual flow: load (or synthesize) image embeddings, pick a
//! [`TextEncoder`] and a [`PriorModel`], run [`sequential_search`], then
//! certify the result with [`evaluate_prompts`].

pub mod bounds;
pub mod data;
pub mod encoder;
pub mod error;
pub mod format;
pub mod harness;
pub mod prior;
pub mod probe;
pub mod search;
pub mod synth;

pub use bounds::{
    evaluate_prompts, mcallester_bound, prompt_pac_bayes_bound, prompt_uc_bound, uc_bound,
    BoundMethod, BoundReport, PromptEvaluation, DEFAULT_DELTA,
};
pub use data::{EmbeddingDataset, Matrix, PromptSet, TokenId, Vocabulary};
pub use encoder::{
    class_embeddings, classify, empirical_risk, CachedEncoder, TextEncoder, ToyEncoder,
};
pub use error::{Error, Result};
pub use prior::{
    point_mass_kl, prune_vocab_ksigma, KlPolicy, NGramPrior, OracleBridgePrior, PriorModel,
    UniformPrior,
};
pub use search::{sequential_search, CandidatePolicy, Criterion, SearchConfig, SearchOutcome};
pub use synth::{generate_synthetic, SyntheticSpec, SyntheticWorld};
