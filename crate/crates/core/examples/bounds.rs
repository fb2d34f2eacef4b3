//! Bound arithmetic: how the uniform-convergence and PAC-Bayes terms move
//! with sample size, prompt length and prior mass.

use anyhow::Result;
use promptbound::{mcallester_bound, prompt_uc_bound};

fn main() -> Result<()> {
    let (r, delta) = (0.05, 0.01);
    println!(
        "{:>7} {:>3} {:>10} {:>14} {:>14}",
        "n", "L", "uc", "pb(kl=10)", "pb(kl=100)"
    );
    for n in [100, 1_000, 10_000, 100_000] {
        for l in [1, 5] {
            println!(
                "{n:>7} {l:>3} {:>10.4} {:>14.4} {:>14.4}",
                prompt_uc_bound(r, l, 10, 50_000, n, delta)?,
                mcallester_bound(r, 10.0, n, delta)?,
                mcallester_bound(r, 100.0, n, delta)?,
            );
        }
    }
    // Bounds above 1 are reported as computed, not clipped.
    println!(
        "tiny sample: {:.3}",
        mcallester_bound(0.0, 500.0, 50, delta)?
    );
    Ok(())
}
