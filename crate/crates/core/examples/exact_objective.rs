//! Exact expected return by enumeration, against Monte Carlo batch rewards.
//!
//! cargo run --example exact_objective

use capo::env::{
    exact_objective, sample_group_batch, EnvSpec, TaskFamily, DEFAULT_ENUMERATION_BUDGET,
};
use capo::harness::train::initial_policy;
use capo::harness::RunConfig;

fn main() -> capo::Result<()> {
    for (family, k, t, plen) in [
        (TaskFamily::Copy, 4, 2, 2),
        (TaskFamily::Parity, 3, 1, 3),
        (TaskFamily::ModularSum, 5, 1, 2),
    ] {
        let mut cfg = RunConfig::default();
        cfg.env = EnvSpec::new(family, k, t, plen);
        cfg.policy.init_std = 0.5;
        cfg.policy.temperature = 1.0;
        cfg.policy.behavior_logprob = capo::policy::BehaviorLogprob::Full;
        let policy = initial_policy(&cfg, 0)?;
        let j = exact_objective(&cfg.env, &policy, DEFAULT_ENUMERATION_BUDGET)?;

        let mut mc = 0.0;
        let rounds = 50;
        for r in 0..rounds {
            mc += sample_group_batch(&cfg.env, &policy, 8, 16, 0, r << 24)?.mean_reward();
        }
        println!(
            "{family:?} K={k} T={t} prompt={plen}: {} sequences, exact J = {j:.4}, sampled mean reward = {:.4}",
            cfg.env.enumeration_size(),
            mc / rounds as f64
        );
    }
    Ok(())
}
