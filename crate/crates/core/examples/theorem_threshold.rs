//! The threshold constant, and the empirical improvement check on a tiny task.
//!
//! cargo run --release --example theorem_threshold

use capo::env::{EnvSpec, TaskFamily};
use capo::optimizer::theorem_threshold;
use capo::oracle::theorem::{theorem_check, TheoremCheckConfig};

fn main() -> capo::Result<()> {
    println!("required delta_H for eps_adv = 1, delta_F = 1e-4, M = 1, r = 0.1:");
    for gamma in [0.1, 0.5, 0.9, 0.99] {
        let t = theorem_threshold(gamma, 1.0, 1e-4, 1.0, 0.1)?;
        println!(
            "  gamma {gamma:<4}  C {:>10.3}  omega_min {:>8.4}  delta_H {:>8.4}",
            t.c, t.omega_min, t.delta_h_required
        );
    }

    for (gamma, family) in [(0.9, TaskFamily::Copy), (0.1, TaskFamily::ModularSum)] {
        let mut cfg = TheoremCheckConfig::new(EnvSpec::new(family, 4, 2, 2).with_discount(gamma));
        cfg.lr = 0.02;
        cfg.iterations = 100;
        let r = theorem_check(&cfg, 0)?;
        println!(
            "{family:?} gamma {gamma}: committed {} / {}, accepted tokens {} / {}, violations {}, J {:.4} -> {:.4}",
            r.committed, r.iterations, r.accepted_tokens, r.total_tokens, r.violations, r.initial_j, r.final_j
        );
    }
    Ok(())
}
