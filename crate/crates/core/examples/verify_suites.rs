//! Runs every verification battery, as `capo verify` does.
//!
//! cargo run --release --example verify_suites

use capo::oracle::verify::{run_verify, EstimatorFns, Suite, VerifyOptions};

fn main() -> capo::Result<()> {
    let report = run_verify(
        Suite::All,
        EstimatorFns::default(),
        &VerifyOptions::default(),
    )?;
    for c in &report.checks {
        println!(
            "{} {:<10} {:<28} {:>10.3e} <= {:.1e}",
            if c.passed { "ok  " } else { "FAIL" },
            c.suite,
            c.name,
            c.measured,
            c.tolerance
        );
    }
    println!(
        "{}",
        if report.passed() {
            "all checks passed"
        } else {
            "some checks failed"
        }
    );
    Ok(())
}
