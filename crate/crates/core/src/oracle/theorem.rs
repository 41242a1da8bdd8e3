//! Empirical check of the monotonic-improvement guarantee on enumerable tasks.
//!
//! Each iteration proposes per-token steps, measures `ε_adv` exactly, takes
//! `M` as the operator norm of the batch's dense Hessian and `r` as the largest
//! proposed step norm, sets the thresholds from those, and commits the masked
//! update. The exact objective before and after every committed update is
//! compared.

use serde::{Deserialize, Serialize};

use super::{dense_hessian, max_abs_advantage, operator_norm};
use crate::env::{exact_objective, sample_group_batch, EnvSpec, DEFAULT_ENUMERATION_BUDGET};
use crate::error::{Error, Result};
use crate::numerics::RngStream;
use crate::optimizer::{
    aggregate_and_update, capo_filter, objective_terms, partition, theorem_threshold_with_coef,
    Granularity, ObjectiveConfig, PhaseTimes, Reason, ThresholdConfig, ThresholdMode,
    DEFAULT_CURVATURE_COEF,
};
use crate::policy::{
    BehaviorLogprob, EncoderConfig, FeatureEncoder, LastLayer, Nonlinearity, Policy,
};
use crate::stepmodel::{StepKind, StepModelState};

const STREAM_STRIDE: u64 = 1 << 20;
const INIT_STREAM: u64 = u64::MAX - 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoremCheckConfig {
    pub env: EnvSpec,
    pub window: usize,
    pub feature_dim: usize,
    pub init_std: f64,
    pub objective: ObjectiveConfig,
    pub step_kind: StepKind,
    pub lr: f64,
    pub delta_f: f64,
    pub curvature_coef: f64,
    pub group_size: usize,
    pub n_prompts: usize,
    pub iterations: usize,
    /// Allowed decrease of the exact objective before a commit counts as a violation.
    pub slack: f64,
}

impl TheoremCheckConfig {
    pub fn new(env: EnvSpec) -> Self {
        TheoremCheckConfig {
            env,
            window: 2,
            feature_dim: 4,
            init_std: 0.5,
            objective: ObjectiveConfig {
                kind: crate::optimizer::Objective::Reinforce,
                ..ObjectiveConfig::default()
            },
            step_kind: StepKind::Sgd,
            lr: 0.5,
            delta_f: 1e-4,
            curvature_coef: DEFAULT_CURVATURE_COEF,
            group_size: 8,
            n_prompts: 4,
            iterations: 200,
            slack: 1e-9,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TheoremCheckReport {
    pub iterations: usize,
    pub committed: usize,
    pub skipped: usize,
    pub accepted_tokens: usize,
    pub total_tokens: usize,
    pub violations: usize,
    /// Largest `J(before) - J(after)` over committed updates (negative when all improved).
    pub worst_drop: f64,
    /// Smallest and largest `δ_H` the rule required.
    pub min_required_delta_h: f64,
    pub max_required_delta_h: f64,
    /// Largest estimated `m_H` among proposals that passed the `m_F` test.
    pub best_m_h: f64,
    pub initial_j: f64,
    pub final_j: f64,
}

fn initial_policy(cfg: &TheoremCheckConfig, seed: u64) -> Result<Policy> {
    let k = cfg.env.vocab_size;
    let d = cfg.feature_dim;
    let encoder = FeatureEncoder::new(
        EncoderConfig {
            window: cfg.window,
            feature_dim: d,
            nonlinearity: Nonlinearity::Tanh,
            seed: 11,
            scale: Some(1.0),
        },
        k,
    )?;
    let mut rng = RngStream::new(seed, INIT_STREAM);
    let layer = LastLayer::from_row_major(
        k,
        d,
        (0..k * d).map(|_| cfg.init_std * rng.normal()).collect(),
    )?;
    Policy::new(encoder, layer, k, 1.0, BehaviorLogprob::Full)
}

/// Runs the check for one seed.
pub fn theorem_check(cfg: &TheoremCheckConfig, seed: u64) -> Result<TheoremCheckReport> {
    cfg.env.validate()?;
    let gamma = cfg.env.discount;
    if gamma >= 1.0 {
        return Err(Error::rejected(
            "the threshold constant needs a discount below 1",
        ));
    }
    let mut policy = initial_policy(cfg, seed)?;
    let mut stepmodel =
        StepModelState::new(cfg.step_kind, cfg.lr, cfg.env.vocab_size, cfg.feature_dim);
    let mut report = TheoremCheckReport {
        iterations: cfg.iterations,
        worst_drop: f64::NEG_INFINITY,
        min_required_delta_h: f64::INFINITY,
        best_m_h: f64::NEG_INFINITY,
        ..TheoremCheckReport::default()
    };
    let mut j = exact_objective(&cfg.env, &policy, DEFAULT_ENUMERATION_BUDGET)?;
    report.initial_j = j;
    let mut times = PhaseTimes::default();

    for it in 0..cfg.iterations as u64 {
        let batch = sample_group_batch(
            &cfg.env,
            &policy,
            cfg.group_size,
            cfg.n_prompts,
            seed,
            (it + 1) * STREAM_STRIDE,
        )?;
        let terms = objective_terms(&batch, &policy, &cfg.objective, gamma, None)?;
        let subsets = partition(&batch, Granularity::Token);
        let proposals = capo_filter(
            &terms.factors,
            &subsets,
            &stepmodel,
            &ThresholdConfig::vacuous(),
            &mut times,
        )?;

        let eps = max_abs_advantage(&cfg.env, &policy)?;
        let m = operator_norm(&dense_hessian(&terms.factors)?)?;
        let r = proposals.max_step_norm();
        let thr = theorem_threshold_with_coef(gamma, eps, cfg.delta_f, m, r, cfg.curvature_coef)?;
        report.min_required_delta_h = report.min_required_delta_h.min(thr.delta_h_required);
        report.max_required_delta_h = report.max_required_delta_h.max(thr.delta_h_required);
        let rule = ThresholdConfig {
            mode: ThresholdMode::Interval,
            delta_h: thr.delta_h_required,
            delta_h_high: f64::INFINITY,
            delta_f: cfg.delta_f,
            granularity: Granularity::Token,
        };

        let mut mask = vec![false; terms.n_tokens()];
        for (rec, subset) in proposals.records.iter().zip(&subsets) {
            if rec.shift.m_f <= cfg.delta_f {
                report.best_m_h = report.best_m_h.max(rec.shift.m_h);
            }
            if rule.judge(&rec.shift) == Reason::Ok {
                for &i in subset {
                    mask[i] = true;
                }
            }
        }
        report.accepted_tokens += mask.iter().filter(|&&b| b).count();
        report.total_tokens += mask.len();

        let upd =
            aggregate_and_update(&terms, Some(&mask), &mut policy, &mut stepmodel, &mut times)?;
        if upd.skipped {
            report.skipped += 1;
            continue;
        }
        report.committed += 1;
        let after = exact_objective(&cfg.env, &policy, DEFAULT_ENUMERATION_BUDGET)?;
        let drop = j - after;
        report.worst_drop = report.worst_drop.max(drop);
        if drop > cfg.slack {
            report.violations += 1;
        }
        j = after;
    }
    report.final_j = j;
    Ok(report)
}
