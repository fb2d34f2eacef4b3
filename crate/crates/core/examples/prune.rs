//! k-sigma vocabulary pruning around the class names, then search inside
//! the pruned set.

use anyhow::Result;
use promptbound::synth::PriorCorpusSpec;
use promptbound::{
    evaluate_prompts, generate_synthetic, prune_vocab_ksigma, sequential_search, CandidatePolicy,
    KlPolicy, SearchConfig, SyntheticSpec,
};

fn main() -> Result<()> {
    let world = generate_synthetic(&SyntheticSpec::default())?;
    let prior = world.prior(&PriorCorpusSpec::default())?;
    for k in [1.0, 2.0, 3.0] {
        let tokens = prune_vocab_ksigma(&prior, &world.class_contexts(), k)?;
        let size = tokens.len();
        let cfg = SearchConfig::greedy(2, 0).with_candidates(CandidatePolicy::FixedSet { tokens });
        let out = sequential_search(
            &cfg,
            &world.train,
            &world.encoder,
            world.vocab_size(),
            Some(&prior),
        )?;
        let eval = evaluate_prompts(
            &out.prompts,
            &world.train,
            Some(&world.test),
            &world.encoder,
            &prior,
            KlPolicy::default(),
            0.01,
        )?;
        println!(
            "k={k}: {size} candidates, train {:.4}, test {:.4}, pb {:.4}",
            eval.train_risk,
            eval.test_risk.unwrap_or(f64::NAN),
            eval.pac_bayes.bound
        );
    }
    Ok(())
}
