//! One CAPO iteration by hand: sample, build token factors, propose per-token
//! steps, mask, and commit.
//!
//! cargo run --example capo_step

use capo::env::{
    exact_objective, sample_group_batch, EnvSpec, TaskFamily, DEFAULT_ENUMERATION_BUDGET,
};
use capo::harness::train::initial_policy;
use capo::harness::RunConfig;
use capo::optimizer::{
    aggregate_and_update, capo_filter, objective_terms, partition, Granularity, PhaseTimes,
    ThresholdConfig, ThresholdMode,
};
use capo::stepmodel::StepKind;

fn main() -> capo::Result<()> {
    let mut cfg = RunConfig::default();
    cfg.env = EnvSpec::new(TaskFamily::Copy, 4, 2, 2);
    cfg.policy.init_std = 1.0;
    cfg.optimizer.kind = StepKind::Sgd;
    cfg.optimizer.lr = 20.0;
    let mut policy = initial_policy(&cfg, 0)?;
    let mut stepmodel = cfg
        .optimizer
        .step_model(cfg.env.vocab_size, cfg.policy.feature_dim);

    let batch = sample_group_batch(&cfg.env, &policy, 8, 8, 0, 1 << 24)?;
    let terms = objective_terms(&batch, &policy, &cfg.objective, cfg.env.discount, None)?;
    let subsets = partition(&batch, Granularity::Token);
    let thresholds = ThresholdConfig {
        mode: ThresholdMode::Symmetric,
        delta_h: 0.05,
        delta_f: 0.01,
        ..ThresholdConfig::default()
    };
    let mut times = PhaseTimes::default();
    let outcome = capo_filter(
        &terms.factors,
        &subsets,
        &stepmodel,
        &thresholds,
        &mut times,
    )?;

    println!(
        "{} trajectories, {} tokens, mean reward {:.3}",
        batch.n_trajectories(),
        terms.n_tokens(),
        batch.mean_reward()
    );
    println!(
        "rejection rate {:.3}, reasons {:?}",
        outcome.rejection_rate(),
        outcome.histogram()
    );
    for rec in outcome.records.iter().take(6) {
        println!(
            "  subset {:>3}: m_H {:+.3e} m_F {:.3e} |step| {:.3e} -> {}",
            rec.subset_id,
            rec.shift.m_h,
            rec.shift.m_f,
            rec.step_norm,
            rec.reason.as_str()
        );
    }

    let before = exact_objective(&cfg.env, &policy, DEFAULT_ENUMERATION_BUDGET)?;
    let upd = aggregate_and_update(
        &terms,
        Some(&outcome.mask),
        &mut policy,
        &mut stepmodel,
        &mut times,
    )?;
    let after = exact_objective(&cfg.env, &policy, DEFAULT_ENUMERATION_BUDGET)?;
    println!(
        "update skipped: {}, exact J {before:.4} -> {after:.4}",
        upd.skipped
    );
    println!(
        "CAPO phases {:?} of {:?} total",
        times.capo_overhead(),
        times.total()
    );
    Ok(())
}
