//! Linear-probe baseline: train, pick sigma on the grid, report the
//! Gaussian PAC-Bayes bound.

use anyhow::Result;
use promptbound::probe::{
    probe_pac_bayes_bound, probe_risk, train_probe, ProbeBoundConfig, ProbeTrainConfig,
};
use promptbound::{generate_synthetic, SyntheticSpec};

fn main() -> Result<()> {
    let world = generate_synthetic(&SyntheticSpec::default())?;
    let pw = train_probe(&world.train, &ProbeTrainConfig::default())?;
    let b = probe_pac_bayes_bound(&pw, &world.train, &ProbeBoundConfig::default())?;
    println!(
        "train {:.4}  test {:.4}",
        probe_risk(&pw, &world.train)?,
        probe_risk(&pw, &world.test)?
    );
    println!(
        "sigma {:.5}  kl {:.4}  bound {:.4}",
        b.sigma,
        b.report.complexity.value(),
        b.report.bound
    );
    Ok(())
}
