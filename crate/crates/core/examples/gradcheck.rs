//! Runs the finite-difference gradient suite: every tape op, then a tiny
//! full model under the Dice loss.
//!
//! cargo run --example gradcheck -- [seed]

use acunet::gradcheck::run_suite;

fn main() -> acunet::Result<()> {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let results = run_suite(seed)?;
    for r in &results {
        println!(
            "{:<4} {:<36} {:.2e} (tolerance {:.0e}, {} coordinates, {} redrawn)",
            if r.passed() { "ok" } else { "FAIL" },
            r.name,
            r.max_rel_error,
            r.tolerance,
            r.checked,
            r.skipped
        );
    }
    let failed = results.iter().filter(|r| !r.passed()).count();
    println!("{} checks, {failed} failed", results.len());
    Ok(())
}
