//! Train error and bound as labels are progressively randomized.

use anyhow::Result;
use promptbound::harness::{run_experiment, ExperimentConfig, ExperimentKind};
use promptbound::synth::FlipMode;

fn main() -> Result<()> {
    let mut cfg = ExperimentConfig::new(ExperimentKind::LabelFlip);
    cfg.flip_mode = FlipMode::Uniform;
    cfg.trials = 3;
    let out = run_experiment(&cfg)?;
    for r in &out.rows {
        println!(
            "seed {} p={:<4} train {:.4} test {:.4} pb {:.4}",
            r.seed,
            r.frac,
            r.train_err,
            r.test_err.unwrap_or(f64::NAN),
            r.pb_bound
        );
    }
    Ok(())
}
