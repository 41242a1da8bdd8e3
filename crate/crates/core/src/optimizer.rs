//! Policy-gradient objectives and the curvature-aware masking loop.
//!
//! One learning iteration: build per-token factors for the chosen objective,
//! split them into candidate subsets, propose a step per subset, keep the
//! subsets whose estimated shifts pass the trust-region test, then take one
//! real step on the accepted tokens.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::env::GroupBatch;
use crate::error::{Error, Result};
use crate::estimators::{
    directional_fisher, directional_hessian, dr_grpo_advantages, gradient_dot, grpo_advantages,
    model_gradient, CandidateStep, ShiftEstimate, TokenGradFactor, Weighting,
    DEFAULT_ADVANTAGE_EPS,
};
use crate::numerics::{RowAccumulator, RowSparse, SparseVec};
use crate::policy::Policy;
use crate::stepmodel::StepModelState;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    #[default]
    Grpo,
    DrGrpo,
    Reinforce,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    None,
    #[default]
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObjectiveConfig {
    pub kind: Objective,
    pub clip_eps: f64,
    pub kl_beta: f64,
    pub adv_eps: f64,
    pub baseline: Baseline,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig {
            kind: Objective::Grpo,
            clip_eps: 0.2,
            kl_beta: 0.0,
            adv_eps: DEFAULT_ADVANTAGE_EPS,
            baseline: Baseline::Mean,
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip_eps > 0.0) {
            return Err(Error::config("objective.clip_eps", "must be positive"));
        }
        if !(self.kl_beta >= 0.0 && self.kl_beta.is_finite()) {
            return Err(Error::config(
                "objective.kl_beta",
                "must be finite and >= 0",
            ));
        }
        if !(self.adv_eps > 0.0) {
            return Err(Error::config("objective.adv_eps", "must be positive"));
        }
        Ok(())
    }
}

/// Per-token factors of an objective, plus optional KL-penalty terms.
#[derive(Debug, Clone)]
pub struct ObjectiveTerms {
    pub factors: Vec<TokenGradFactor>,
    /// Per token: `c_a = pi_a (log(pi_a / pi_ref_a) + 1) - pi_a sum_b pi_b (...)`,
    /// so that `c ⊗ h` is the KL gradient.
    kl: Option<Vec<SparseVec>>,
    kl_beta: f64,
    /// Tokens whose clipped branch was active.
    pub clipped: usize,
}

impl ObjectiveTerms {
    pub fn n_tokens(&self) -> usize {
        self.factors.len()
    }

    /// Mean gradient over the tokens selected by `mask` (all tokens when
    /// `None`), or `None` when no token is selected.
    pub fn gradient(&self, mask: Option<&[bool]>) -> Result<Option<RowSparse>> {
        let keep = |i: usize| mask.is_none_or(|m| m[i]);
        if let Some(m) = mask {
            if m.len() != self.factors.len() {
                return Err(Error::rejected(
                    "mask length does not match the token count",
                ));
            }
        }
        let selected: Vec<TokenGradFactor> = self
            .factors
            .iter()
            .enumerate()
            .filter(|(i, _)| keep(*i))
            .map(|(_, f)| f.clone())
            .collect();
        if selected.is_empty() {
            return Ok(None);
        }
        let mut grad = model_gradient(&selected)?;
        if let Some(kl) = &self.kl {
            let (k, d) = (grad.n_rows(), grad.n_cols());
            let mut acc = RowAccumulator::new(k, d);
            for (i, (f, c)) in self.factors.iter().zip(kl).enumerate() {
                if keep(i) {
                    acc.add_outer(f.weight, c, f.h.as_slice());
                }
            }
            let kl_grad = acc.finish(1.0 / selected.len() as f64)?;
            grad = grad.add_scaled(&kl_grad, -self.kl_beta)?;
        }
        Ok(Some(grad))
    }
}

/// Discounted reward-to-go advantages, optionally minus the batch mean at
/// each position.
fn reinforce_advantages(batch: &GroupBatch, baseline: Baseline, gamma: f64) -> Vec<Vec<f64>> {
    let mut adv: Vec<Vec<f64>> = batch
        .trajectories()
        .map(|t| t.returns_to_go(gamma))
        .collect();
    if baseline == Baseline::Mean {
        let max_len = adv.iter().map(Vec::len).max().unwrap_or(0);
        for t in 0..max_len {
            let vals: Vec<f64> = adv.iter().filter_map(|a| a.get(t).copied()).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            for a in adv.iter_mut().filter(|a| a.len() > t) {
                a[t] -= mean;
            }
        }
    }
    adv
}

/// Group-normalized advantages broadcast to every token.
fn group_advantages(batch: &GroupBatch, kind: Objective, eps: f64, gamma: f64) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(batch.n_trajectories());
    for g in &batch.groups {
        let returns: Vec<f64> = g
            .trajectories
            .iter()
            .map(|t| t.discounted_return(gamma))
            .collect();
        let adv = match kind {
            Objective::DrGrpo => dr_grpo_advantages(&returns),
            _ => grpo_advantages(&returns, eps),
        };
        for (t, a) in g.trajectories.iter().zip(adv) {
            out.push(vec![a; t.len()]);
        }
    }
    out
}

/// Builds the token factors of `cfg.kind` at the current `policy`.
///
/// Probabilities are recomputed from the stored features, so the factors
/// track the current policy when a batch is reused. For the group
/// objectives the coefficient carries the importance ratio and is zero on
/// the clipped branch.
pub fn objective_terms(
    batch: &GroupBatch,
    policy: &Policy,
    cfg: &ObjectiveConfig,
    gamma: f64,
    ref_policy: Option<&Policy>,
) -> Result<ObjectiveTerms> {
    if batch.n_tokens() == 0 {
        return Err(Error::rejected("empty batch"));
    }
    if cfg.kl_beta > 0.0 && ref_policy.is_none() {
        return Err(Error::config(
            "objective.kl_beta",
            "a reference policy is required when kl_beta > 0",
        ));
    }
    let (advantages, weighting) = match cfg.kind {
        Objective::Reinforce => (
            reinforce_advantages(batch, cfg.baseline, gamma),
            Weighting::Discounted { gamma },
        ),
        Objective::Grpo => (
            group_advantages(batch, cfg.kind, cfg.adv_eps, gamma),
            Weighting::LengthNormalized,
        ),
        Objective::DrGrpo => (
            group_advantages(batch, cfg.kind, cfg.adv_eps, gamma),
            Weighting::Unit,
        ),
    };
    let use_ratio = cfg.kind != Objective::Reinforce;
    let kl_on = cfg.kl_beta > 0.0;
    let mut factors = Vec::with_capacity(batch.n_tokens());
    let mut kl = Vec::new();
    let mut clipped = 0;
    for (traj_id, (tr, adv)) in batch.trajectories().zip(&advantages).enumerate() {
        for (t, (step, &a)) in tr.steps.iter().zip(adv).enumerate() {
            let h = step.features.as_slice();
            if h.len() != policy.feature_dim() || step.topk_probs.dim() != policy.vocab_size() {
                return Err(Error::Data(format!(
                    "trajectory {traj_id} step {t}: snapshot shape mismatch"
                )));
            }
            let dist = policy.distribution(h)?;
            let mut coeff = a;
            if use_ratio {
                let lp = policy.ratio_log_prob(h, step.action)?;
                let r = (lp - step.logprob_behavior).exp();
                let on_clipped =
                    (a > 0.0 && r > 1.0 + cfg.clip_eps) || (a < 0.0 && r < 1.0 - cfg.clip_eps);
                if on_clipped {
                    clipped += 1;
                    coeff = 0.0;
                } else {
                    coeff = a * r;
                }
            }
            let mut f = TokenGradFactor::new(
                step.action as usize,
                dist.topk.clone(),
                step.features.clone(),
                coeff,
                weighting.weight(t, tr.len()),
            )?;
            f.traj_id = traj_id;
            f.step_index = t;
            factors.push(f);
            if kl_on {
                let reference = ref_policy.expect("checked above").distribution(h)?;
                kl.push(kl_coefficients(
                    dist.full.as_slice(),
                    reference.full.as_slice(),
                )?);
            }
        }
    }
    Ok(ObjectiveTerms {
        factors,
        kl: kl_on.then_some(kl),
        kl_beta: cfg.kl_beta,
        clipped,
    })
}

fn kl_coefficients(pi: &[f64], pi_ref: &[f64]) -> Result<SparseVec> {
    let s: Vec<f64> = pi
        .iter()
        .zip(pi_ref)
        .map(|(&p, &q)| {
            if p > 0.0 {
                p * ((p / q).ln() + 1.0)
            } else {
                0.0
            }
        })
        .collect();
    let total: f64 = s.iter().sum();
    let c: Vec<f64> = s.iter().zip(pi).map(|(si, p)| si - p * total).collect();
    SparseVec::from_dense(&c)
}

/// Monte Carlo policy gradient with discounted reward-to-go.
pub fn reinforce_loss_grad(
    batch: &GroupBatch,
    policy: &Policy,
    baseline: Baseline,
    gamma: f64,
) -> Result<RowSparse> {
    let cfg = ObjectiveConfig {
        kind: Objective::Reinforce,
        baseline,
        ..ObjectiveConfig::default()
    };
    let terms = objective_terms(batch, policy, &cfg, gamma, None)?;
    terms
        .gradient(None)?
        .ok_or_else(|| Error::rejected("empty batch"))
}

/// Gradient of the clipped group-relative surrogate, minus `kl_beta` times
/// the KL gradient when a reference policy is given.
pub fn grpo_loss_grad(
    batch: &GroupBatch,
    policy: &Policy,
    clip_eps: f64,
    kl_beta: f64,
    ref_policy: Option<&Policy>,
) -> Result<RowSparse> {
    let cfg = ObjectiveConfig {
        kind: Objective::Grpo,
        clip_eps,
        kl_beta,
        ..ObjectiveConfig::default()
    };
    let terms = objective_terms(batch, policy, &cfg, 1.0, ref_policy)?;
    terms
        .gradient(None)?
        .ok_or_else(|| Error::rejected("empty batch"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    #[default]
    Token,
    Trajectory,
    Group,
    Batch,
}

/// Disjoint token-index subsets covering the batch, in token order.
pub fn partition(batch: &GroupBatch, granularity: Granularity) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = Vec::new();
    let mut next = 0;
    for g in &batch.groups {
        if granularity == Granularity::Group {
            out.push(Vec::new());
        }
        for tr in &g.trajectories {
            if granularity == Granularity::Trajectory {
                out.push(Vec::new());
            }
            for _ in 0..tr.len() {
                match granularity {
                    Granularity::Token => out.push(vec![next]),
                    Granularity::Batch => {
                        if out.is_empty() {
                            out.push(Vec::new());
                        }
                        out[0].push(next);
                    }
                    _ => out.last_mut().expect("subset opened above").push(next),
                }
                next += 1;
            }
        }
    }
    out.retain(|s| !s.is_empty());
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdMode {
    /// Accept iff `-δ_H < m_H < δ_H` and `m_F <= δ_F`.
    #[default]
    Symmetric,
    /// Accept iff `δ_H <= m_H <= δ_H_high` and `m_F <= δ_F`.
    Interval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ThresholdConfig {
    pub mode: ThresholdMode,
    pub delta_h: f64,
    pub delta_h_high: f64,
    pub delta_f: f64,
    pub granularity: Granularity,
}

impl Default for ThresholdConfig {
    fn default() -> Self {
        ThresholdConfig {
            mode: ThresholdMode::Symmetric,
            delta_h: 1e-2,
            delta_h_high: f64::INFINITY,
            delta_f: 1e-4,
            granularity: Granularity::Token,
        }
    }
}

impl ThresholdConfig {
    /// Interval thresholds that accept every subset.
    pub fn vacuous() -> Self {
        ThresholdConfig {
            mode: ThresholdMode::Interval,
            delta_h: f64::NEG_INFINITY,
            delta_h_high: f64::INFINITY,
            delta_f: f64::INFINITY,
            granularity: Granularity::Token,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.delta_h.is_nan() || self.delta_h_high.is_nan() {
            return Err(Error::config("capo.delta_h", "must not be NaN"));
        }
        if !(self.delta_f > 0.0) {
            return Err(Error::config("capo.delta_f", "must be positive"));
        }
        match self.mode {
            ThresholdMode::Interval if self.delta_h > self.delta_h_high => {
                Err(Error::config("capo.delta_h_high", "must be >= delta_h"))
            }
            ThresholdMode::Symmetric if !(self.delta_h > 0.0) => Err(Error::config(
                "capo.delta_h",
                "symmetric mode needs delta_h > 0",
            )),
            _ => Ok(()),
        }
    }

    pub fn judge(&self, shift: &ShiftEstimate) -> Reason {
        if !(shift.m_f <= self.delta_f) {
            return Reason::MFExceeded;
        }
        let m = shift.m_h;
        match self.mode {
            ThresholdMode::Symmetric => {
                if !(m > -self.delta_h) {
                    Reason::MHLow
                } else if !(m < self.delta_h) {
                    Reason::MHHigh
                } else {
                    Reason::Ok
                }
            }
            ThresholdMode::Interval => {
                if !(m >= self.delta_h) {
                    Reason::MHLow
                } else if !(m <= self.delta_h_high) {
                    Reason::MHHigh
                } else {
                    Reason::Ok
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Reason {
    #[serde(rename = "ok")]
    Ok,
    #[serde(rename = "m_F_exceeded")]
    MFExceeded,
    #[serde(rename = "m_H_low")]
    MHLow,
    #[serde(rename = "m_H_high")]
    MHHigh,
}

impl Reason {
    pub const ALL: [Reason; 4] = [
        Reason::Ok,
        Reason::MFExceeded,
        Reason::MHLow,
        Reason::MHHigh,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Reason::Ok => "ok",
            Reason::MFExceeded => "m_F_exceeded",
            Reason::MHLow => "m_H_low",
            Reason::MHHigh => "m_H_high",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcceptanceRecord {
    pub subset_id: usize,
    pub shift: ShiftEstimate,
    pub accepted: bool,
    pub reason: Reason,
    /// Norm of the proposed step for this subset.
    pub step_norm: f64,
}

/// Wall time spent in each phase of an iteration.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseTimes {
    pub generation: Duration,
    pub token_gradients: Duration,
    pub proposal: Duration,
    pub m_h: Duration,
    pub m_f: Duration,
    pub mask: Duration,
    pub update: Duration,
    pub moment_update: Duration,
}

impl PhaseTimes {
    /// Phases that exist only because of the masking test.
    pub fn capo_overhead(&self) -> Duration {
        self.proposal + self.m_h + self.m_f + self.mask + self.moment_update
    }

    pub fn total(&self) -> Duration {
        self.generation + self.token_gradients + self.update + self.capo_overhead()
    }

    pub fn add(&mut self, other: &PhaseTimes) {
        self.generation += other.generation;
        self.token_gradients += other.token_gradients;
        self.proposal += other.proposal;
        self.m_h += other.m_h;
        self.m_f += other.m_f;
        self.mask += other.mask;
        self.update += other.update;
        self.moment_update += other.moment_update;
    }
}

#[derive(Debug, Clone)]
pub struct FilterOutcome {
    /// One flag per token, aligned with the factor list.
    pub mask: Vec<bool>,
    pub records: Vec<AcceptanceRecord>,
}

impl FilterOutcome {
    pub fn accepted_tokens(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Fraction of tokens masked out.
    pub fn rejection_rate(&self) -> f64 {
        if self.mask.is_empty() {
            return 0.0;
        }
        1.0 - self.accepted_tokens() as f64 / self.mask.len() as f64
    }

    /// Counts per reason; every reason appears, possibly with zero.
    pub fn histogram(&self) -> BTreeMap<&'static str, usize> {
        let mut h: BTreeMap<&'static str, usize> =
            Reason::ALL.iter().map(|r| (r.as_str(), 0)).collect();
        for r in &self.records {
            *h.get_mut(r.reason.as_str()).expect("all reasons present") += 1;
        }
        h
    }

    pub fn max_step_norm(&self) -> f64 {
        self.records.iter().fold(0.0, |m, r| m.max(r.step_norm))
    }
}

/// Proposes a step per subset, estimates its shifts on that subset's own
/// tokens and applies the acceptance test.
pub fn capo_filter(
    factors: &[TokenGradFactor],
    subsets: &[Vec<usize>],
    stepmodel: &StepModelState,
    thresholds: &ThresholdConfig,
    times: &mut PhaseTimes,
) -> Result<FilterOutcome> {
    let mut mask = vec![false; factors.len()];
    let mut records = Vec::with_capacity(subsets.len());
    let mut local: Vec<TokenGradFactor> = Vec::new();
    for (subset_id, subset) in subsets.iter().enumerate() {
        local.clear();
        local.extend(subset.iter().map(|&i| factors[i].clone()));

        let t0 = Instant::now();
        let grad = model_gradient(&local)?;
        let mut rows: Vec<usize> = local
            .iter()
            .flat_map(|f| f.pi.indices().iter().chain(f.u.indices()))
            .copied()
            .collect();
        rows.sort_unstable();
        rows.dedup();
        let step = stepmodel.propose_step_on_rows(&grad, &rows)?;
        let t1 = Instant::now();
        let gdot = gradient_dot(&local, &step);
        let hq = directional_hessian(&local, &step);
        let t2 = Instant::now();
        let fq = directional_fisher(&local, &step);
        let t3 = Instant::now();
        let shift = ShiftEstimate::from_parts(gdot, hq, fq, local.len());
        let reason = thresholds.judge(&shift);
        let accepted = reason == Reason::Ok;
        if accepted {
            for &i in subset {
                mask[i] = true;
            }
        }
        records.push(AcceptanceRecord {
            subset_id,
            shift,
            accepted,
            reason,
            step_norm: step.norm,
        });
        let t4 = Instant::now();
        times.proposal += t1 - t0;
        times.m_h += t2 - t1;
        times.m_f += t3 - t2;
        times.mask += t4 - t3;
    }
    Ok(FilterOutcome { mask, records })
}

#[derive(Debug, Clone)]
pub struct UpdateOutcome {
    pub skipped: bool,
    pub grad: Option<RowSparse>,
    pub step: Option<CandidateStep>,
}

/// Recomputes the objective gradient on the accepted tokens, takes the real
/// step and commits the moments. With nothing accepted the policy and the
/// step model are left untouched.
pub fn aggregate_and_update(
    terms: &ObjectiveTerms,
    mask: Option<&[bool]>,
    policy: &mut Policy,
    stepmodel: &mut StepModelState,
    times: &mut PhaseTimes,
) -> Result<UpdateOutcome> {
    let t0 = Instant::now();
    let Some(grad) = terms.gradient(mask)? else {
        return Ok(UpdateOutcome {
            skipped: true,
            grad: None,
            step: None,
        });
    };
    let step = stepmodel.propose_step(&grad)?;
    policy.layer.apply_update_in_place(&step.rows, 1.0)?;
    let t1 = Instant::now();
    stepmodel.commit(&grad)?;
    times.update += t1 - t0;
    times.moment_update += t1.elapsed();
    Ok(UpdateOutcome {
        skipped: false,
        grad: Some(grad),
        step: Some(step),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TheoremConstants {
    pub gamma: f64,
    pub eps_adv: f64,
    pub c: f64,
}

impl TheoremConstants {
    /// `C = 2 gamma eps sqrt(2) / (1 - gamma)^2`.
    pub fn new(gamma: f64, eps_adv: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&gamma) {
            return Err(Error::rejected(format!("gamma {gamma} must lie in [0, 1)")));
        }
        if !(eps_adv >= 0.0 && eps_adv.is_finite()) {
            return Err(Error::rejected("advantage bound must be finite and >= 0"));
        }
        let c = 2.0 * gamma * eps_adv * std::f64::consts::SQRT_2 / ((1.0 - gamma) * (1.0 - gamma));
        Ok(TheoremConstants { gamma, eps_adv, c })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TheoremThreshold {
    pub c: f64,
    pub omega_min: f64,
    pub delta_h_required: f64,
}

/// Default coefficient on `M r^2` in the required objective-shift threshold.
pub const DEFAULT_CURVATURE_COEF: f64 = 0.5;

/// `(C, omega_min = C sqrt(δ_F), δ_H = omega_min + ½ M r^2)`.
pub fn theorem_threshold(
    gamma: f64,
    eps_adv: f64,
    delta_f: f64,
    m: f64,
    r: f64,
) -> Result<TheoremThreshold> {
    theorem_threshold_with_coef(gamma, eps_adv, delta_f, m, r, DEFAULT_CURVATURE_COEF)
}

/// As [`theorem_threshold`] with an explicit coefficient on `M r^2`.
pub fn theorem_threshold_with_coef(
    gamma: f64,
    eps_adv: f64,
    delta_f: f64,
    m: f64,
    r: f64,
    coef: f64,
) -> Result<TheoremThreshold> {
    let k = TheoremConstants::new(gamma, eps_adv)?;
    for (name, v) in [("delta_f", delta_f), ("M", m), ("r", r), ("coef", coef)] {
        if !(v >= 0.0 && v.is_finite()) {
            return Err(Error::rejected(format!("{name} must be finite and >= 0")));
        }
    }
    let omega_min = k.c * delta_f.sqrt();
    Ok(TheoremThreshold {
        c: k.c,
        omega_min,
        delta_h_required: omega_min + coef * m * r * r,
    })
}
