//! Greedy prompt search on a synthetic world, with its trace and both
//! certificates.

use anyhow::Result;
use promptbound::synth::PriorCorpusSpec;
use promptbound::{
    evaluate_prompts, generate_synthetic, sequential_search, KlPolicy, SearchConfig, SyntheticSpec,
};

fn main() -> Result<()> {
    let world = generate_synthetic(&SyntheticSpec::default())?;
    let prior = world.prior(&PriorCorpusSpec::default())?;
    let cfg = SearchConfig::greedy(3, 0);
    let out = sequential_search(
        &cfg,
        &world.train,
        &world.encoder,
        world.vocab_size(),
        Some(&prior),
    )?;

    print!("{}", out.trace.to_csv(&world.vocab));
    let eval = evaluate_prompts(
        &out.prompts,
        &world.train,
        Some(&world.test),
        &world.encoder,
        &prior,
        KlPolicy::default(),
        0.01,
    )?;
    for (k, p) in out.prompts.class_prompts.iter().enumerate() {
        println!("class {k}: {}", world.vocab.detokenize(p)?);
    }
    println!(
        "train {:.4}  test {:.4}  uc {:.4}  pac-bayes {:.4} (kl {:.2})",
        eval.train_risk,
        eval.test_risk.unwrap_or(f64::NAN),
        eval.uc.bound,
        eval.pac_bayes.bound,
        eval.kl
    );
    Ok(())
}
