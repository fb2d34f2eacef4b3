//! Prompt length by data fraction grid, written as a report CSV.
//!
//! cargo run --release --example grid -- [DIR]

use anyhow::Result;
use promptbound::harness::{run_experiment, write_output, ExperimentConfig, ExperimentKind};

fn main() -> Result<()> {
    let dir = std::env::args().nth(1).unwrap_or_else(|| "grid_out".into());
    let mut cfg = ExperimentConfig::new(ExperimentKind::Grid);
    cfg.lengths = vec![1, 2, 4];
    cfg.fractions = vec![0.1, 0.5, 1.0];
    let out = run_experiment(&cfg)?;
    for r in &out.rows {
        println!(
            "L={} s={:<4} train {:.4} test {:.4} gap {:+.4} pb {:.4}",
            r.l,
            r.frac,
            r.train_err,
            r.test_err.unwrap_or(f64::NAN),
            r.test_err.unwrap_or(f64::NAN) - r.train_err,
            r.pb_bound
        );
    }
    println!("wrote {}", write_output(&cfg, &out, &dir)?.display());
    Ok(())
}
