//! GRPO with and without CAPO on a small copy task, through the training harness.
//!
//! cargo run --release --example train_copy

use capo::env::{EnvSpec, TaskFamily};
use capo::harness::config::Schedule;
use capo::harness::sweep::{RunStats, SUMMARY_WINDOW};
use capo::harness::{train_seed, RunConfig};

fn main() -> capo::Result<()> {
    let out = tempfile::tempdir().map_err(|e| capo::Error::io(std::env::temp_dir(), e))?;
    let mut cfg = RunConfig::default();
    cfg.env = EnvSpec::new(TaskFamily::Copy, 4, 3, 3);
    cfg.policy.feature_dim = 32;
    cfg.policy.temperature = 1.0;
    cfg.optimizer.lr = 0.05;
    cfg.optimizer.schedule = Schedule::Constant;
    cfg.run.iterations = 100;
    cfg.run.n_prompts = 16;
    // Adam moves every touched coordinate by about lr, so a single token's
    // proposal already has m_F of order 1 here.
    cfg.capo.delta_f = 1.0;
    cfg.capo.delta_h = 1.0;

    for enabled in [false, true] {
        cfg.capo.enabled = enabled;
        let label = if enabled { "capo" } else { "grpo" };
        let run = train_seed(&cfg, 0, &out.path().join(label), false)?;
        for r in run.records.iter().step_by(10) {
            println!(
                "{label} it {:>3}  reward {:.3}  exact J {:.3}  rejection {:.3}",
                r.iteration,
                r.reward_mean.unwrap_or(f64::NAN),
                r.exact_j.unwrap_or(f64::NAN),
                r.rejection_rate
            );
        }
        let s = RunStats::from_records(&run.records, SUMMARY_WINDOW);
        println!(
            "{label}: final reward {:.3}, peak {:.3}, mean rejection {:.3}\n",
            s.final_reward, s.peak_reward, s.mean_rejection_rate
        );
    }
    Ok(())
}
