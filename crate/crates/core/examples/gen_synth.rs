//! Generate a synthetic world and write it to disk.
//!
//! cargo run --example gen_synth -- [DIR]

use anyhow::Result;
use promptbound::{generate_synthetic, SyntheticSpec};

fn main() -> Result<()> {
    let dir = std::env::args()
        .nth(1)
        .unwrap_or_else(|| "synthetic_world".into());
    let world = generate_synthetic(&SyntheticSpec {
        seed: 7,
        ..Default::default()
    })?;
    world.save(&dir)?;
    println!(
        "{} classes, {} train rows, {} test rows, vocab {}",
        world.train.num_classes(),
        world.train.len(),
        world.test.len(),
        world.vocab_size()
    );
    for (k, p) in world.planted.class_prompts.iter().enumerate() {
        println!(
            "planted prompt for class {k}: {}",
            world.vocab.detokenize(p)?
        );
    }
    println!("wrote {dir}");
    Ok(())
}
