//! Greedy against prior-regularized search over a few seeds.

use anyhow::Result;
use promptbound::harness::{run_experiment, ExperimentConfig, ExperimentKind};

fn main() -> Result<()> {
    let mut cfg = ExperimentConfig::new(ExperimentKind::SrmCompare);
    cfg.trials = 5;
    cfg.betas = vec![0.0, 0.5, 1.0, 2.0];
    let out = run_experiment(&cfg)?;
    println!("{:>5} {:>8} {:>8} {:>8}", "beta", "train", "kl", "pb");
    for &beta in &cfg.betas {
        let rows: Vec<_> = out.rows.iter().filter(|r| r.frac == beta).collect();
        let mean = |f: fn(&promptbound::harness::report::ReportRow) -> f64| {
            rows.iter().map(|r| f(r)).sum::<f64>() / rows.len() as f64
        };
        println!(
            "{beta:>5} {:>8.4} {:>8.2} {:>8.4}",
            mean(|r| r.train_err),
            mean(|r| r.kl),
            mean(|r| r.pb_bound)
        );
    }
    Ok(())
}
