//! Count how often the PAC-Bayes bound is violated on fresh test data.

use anyhow::Result;
use promptbound::harness::{count_violations, run_experiment, ExperimentConfig, ExperimentKind};

fn main() -> Result<()> {
    let mut cfg = ExperimentConfig::new(ExperimentKind::BoundValidity);
    cfg.trials = 50;
    cfg.delta = 0.05;
    let out = run_experiment(&cfg)?;
    let slack = out
        .rows
        .iter()
        .map(|r| r.pb_bound - r.test_err.unwrap_or(0.0))
        .fold(f64::INFINITY, f64::min);
    println!(
        "{} violations in {} trials at delta {} (smallest slack {slack:.4})",
        count_violations(&out.rows),
        out.rows.len(),
        cfg.delta
    );
    Ok(())
}
