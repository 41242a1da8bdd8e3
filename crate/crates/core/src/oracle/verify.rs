//! Property batteries run by `capo verify` and the acceptance gate.
//!
//! Each check reports the worst measured error and the tolerance it was
//! judged against. The estimator kernels under test are injectable so a
//! deliberately broken kernel can be shown to fail.

use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::*;
use crate::env::TaskFamily;
use crate::estimators::{self, shift_estimate, state_fisher};
use crate::optimizer::theorem_threshold;
use crate::policy::{BehaviorLogprob, EncoderConfig, FeatureEncoder, Nonlinearity};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Grad,
    Curvature,
    Kl,
    Theorem,
    #[default]
    All,
}

impl Suite {
    fn includes(self, s: Suite) -> bool {
        self == Suite::All || self == s
    }
}

pub type DirectionalFn = fn(&[TokenGradFactor], &CandidateStep) -> f64;

/// The kernels a verification run exercises.
#[derive(Clone, Copy)]
pub struct EstimatorFns {
    pub fisher: DirectionalFn,
    pub hessian: DirectionalFn,
}

impl Default for EstimatorFns {
    fn default() -> Self {
        EstimatorFns {
            fisher: estimators::directional_fisher,
            hessian: estimators::directional_hessian,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VerifyOptions {
    pub seed: u64,
    /// Randomized instances per dense cross-check.
    pub instances: usize,
    /// Cases in the non-negativity fuzz run.
    pub fuzz_cases: usize,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions {
            seed: 20_240_601,
            instances: 100,
            fuzz_cases: 10_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckRecord {
    pub suite: String,
    pub name: String,
    pub measured: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct VerifyReport {
    pub checks: Vec<CheckRecord>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn get(&self, name: &str) -> Option<&CheckRecord> {
        self.checks.iter().find(|c| c.name == name)
    }

    fn push(
        &mut self,
        suite: &str,
        name: &str,
        measured: f64,
        tolerance: f64,
        detail: impl Into<String>,
    ) {
        self.push_judged(
            suite,
            name,
            measured,
            tolerance,
            measured <= tolerance,
            detail,
        );
    }

    fn push_judged(
        &mut self,
        suite: &str,
        name: &str,
        measured: f64,
        tolerance: f64,
        passed: bool,
        detail: impl Into<String>,
    ) {
        self.checks.push(CheckRecord {
            suite: suite.into(),
            name: name.into(),
            measured,
            tolerance,
            passed: passed && measured.is_finite(),
            detail: detail.into(),
        });
    }
}

pub fn run_verify(suite: Suite, fns: EstimatorFns, opts: &VerifyOptions) -> Result<VerifyReport> {
    let mut report = VerifyReport::default();
    if suite.includes(Suite::Grad) {
        grad_suite(&mut report, opts)?;
    }
    if suite.includes(Suite::Curvature) {
        curvature_suite(&mut report, fns, opts)?;
    }
    if suite.includes(Suite::Kl) {
        kl_suite(&mut report, opts)?;
    }
    if suite.includes(Suite::Theorem) {
        theorem_suite(&mut report, opts)?;
    }
    Ok(report)
}

fn random_layer(rng: &mut RngStream, k: usize, d: usize, scale: f64) -> Result<LastLayer> {
    LastLayer::from_row_major(k, d, (0..k * d).map(|_| scale * rng.normal()).collect())
}

fn random_dims(rng: &mut RngStream) -> (usize, usize) {
    (2 + rng.below(7), 1 + rng.below(4))
}

pub fn fd_gradient_battery(opts: &VerifyOptions, h_fd: f64) -> Result<FdReport> {
    let mut rng = RngStream::new(opts.seed, 1);
    let mut worst = FdReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
    };
    for _ in 0..opts.instances {
        let (k, d) = random_dims(&mut rng);
        let layer = random_layer(&mut rng, k, d, 1.0)?;
        let h: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        let a = rng.below(k) as Token;
        let r = fd_gradient_check(&layer, &h, a, h_fd)?;
        worst.max_rel_error = worst.max_rel_error.max(r.max_rel_error);
        worst.max_abs_error = worst.max_abs_error.max(r.max_abs_error);
    }
    Ok(worst)
}

fn grad_suite(report: &mut VerifyReport, opts: &VerifyOptions) -> Result<()> {
    let fd = fd_gradient_battery(opts, 1e-5)?;
    report.push(
        "grad",
        "fd_gradient",
        fd.max_rel_error,
        1e-6,
        format!(
            "{} random policies, h_fd = 1e-5, max abs error {:.3e}",
            opts.instances, fd.max_abs_error
        ),
    );

    let mut rng = RngStream::new(opts.seed, 2);
    let mut worst = 0.0f64;
    for _ in 0..10 {
        let (k, d) = random_dims(&mut rng);
        let layer = random_layer(&mut rng, k, d, 1.0)?;
        let h: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        let ratio = fd_order_ratio(&layer, &h, rng.below(k) as Token, 2e-2)?;
        worst = worst.max((ratio - 4.0).abs());
    }
    report.push(
        "grad",
        "fd_second_order",
        worst,
        0.5,
        "max |error ratio - 4| when h_fd halves from 2e-2",
    );

    let mut rng = RngStream::new(opts.seed, 3);
    let mut worst = 0.0f64;
    for _ in 0..opts.instances {
        let (k, d) = random_dims(&mut rng);
        let layer = random_layer(&mut rng, k, d, 2.0)?;
        let h: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        let p = probs_at(layer.as_slice(), k, &h);
        let dist = action_distribution(&layer, &h, k)?;
        let mut sum = vec![0.0; k];
        for (a, pa) in p.iter().enumerate() {
            let f = TokenGradFactor::new(
                a,
                dist.topk.clone(),
                Arc::new(DenseVec::new(h.clone())?),
                1.0,
                1.0,
            )?;
            for (i, s) in sum.iter_mut().enumerate() {
                *s += pa * f.u.get(i);
            }
        }
        worst = worst.max(sum.iter().fold(0.0, |m, x| m.max(x.abs())));
    }
    report.push(
        "grad",
        "grad_log_prob_identity",
        worst,
        1e-10,
        "max |sum_a pi_a (e_a - pi)|",
    );
    Ok(())
}

/// Max absolute gap between directional and dense quadratic forms.
pub fn dense_equivalence(fns: EstimatorFns, opts: &VerifyOptions) -> Result<(f64, f64)> {
    let mut rng = RngStream::new(opts.seed, 4);
    let (mut wf, mut wh) = (0.0f64, 0.0f64);
    for _ in 0..opts.instances {
        let (k, d) = random_dims(&mut rng);
        let n = 1 + rng.below(32);
        let factors = random_factors(&mut rng, k, d, n, k)?;
        let step = random_step(&mut rng, k, d, 1.0)?;
        let x = step.rows.to_dense();
        wf = wf.max(((fns.fisher)(&factors, &step) - dense_fisher(&factors)?.quad_form(&x)).abs());
        wh =
            wh.max(((fns.hessian)(&factors, &step) - dense_hessian(&factors)?.quad_form(&x)).abs());
    }
    Ok((wf, wh))
}

/// Largest estimate below zero (0 when none) over `cases` random shift evaluations.
pub fn fisher_nonnegativity_fuzz(seed: u64, cases: usize) -> Result<(usize, f64)> {
    let mut rng = RngStream::new(seed, 5);
    let mut negatives = 0;
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let k = 2 + rng.below(15);
        let d = 1 + rng.below(6);
        let top = 1 + rng.below(k);
        let n = 1 + rng.below(4);
        let factors = random_factors(&mut rng, k, d, n, top)?;
        let scale = 10f64.powf(4.0 * rng.uniform() - 3.0);
        let step = random_step(&mut rng, k, d, scale)?;
        let s = shift_estimate(&factors, &step);
        let mut min = s.m_f;
        for f in &factors {
            min = min.min(f.quadratic_parts(&step.rows).1);
        }
        if min < 0.0 {
            negatives += 1;
            worst = worst.max(-min);
        }
    }
    Ok((negatives, worst))
}

fn curvature_suite(
    report: &mut VerifyReport,
    fns: EstimatorFns,
    opts: &VerifyOptions,
) -> Result<()> {
    let (wf, wh) = dense_equivalence(fns, opts)?;
    let detail = format!(
        "{} instances, K <= 8, d <= 4, N <= 32, top_k = K",
        opts.instances
    );
    report.push(
        "curvature",
        "fisher_dense_equivalence",
        wf,
        1e-10,
        detail.clone(),
    );
    report.push("curvature", "hessian_dense_equivalence", wh, 1e-10, detail);

    let mut rng = RngStream::new(opts.seed, 6);
    let (mut kron, mut psd, mut asym) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..opts.instances {
        let (k, d) = random_dims(&mut rng);
        let u: Vec<f64> = (0..k).map(|_| rng.normal()).collect();
        let h: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        let big_u: Vec<f64> = (0..k * d).map(|_| rng.normal()).collect();
        let mut m = DMatrix::zeros(k * d, k * d);
        add_kron(&mut m, 1.0, k, |a, b| u[a] * u[b], &h);
        let dense = DenseCurvature {
            matrix: m,
            kind: CurvatureKind::Fisher,
        }
        .quad_form(&big_u);
        let direct: f64 = (0..k)
            .map(|r| u[r] * (0..d).map(|j| big_u[r * d + j] * h[j]).sum::<f64>())
            .sum::<f64>()
            .powi(2);
        kron = kron.max((dense - direct).abs());

        let n = 1 + rng.below(16);
        let f = dense_fisher(&random_factors(&mut rng, k, d, n, k)?)?;
        psd = psd.max(-f.eigenvalues().into_iter().fold(f64::INFINITY, f64::min));
        asym = asym.max(f.max_asymmetry());
        let hm = dense_hessian(&random_factors(&mut rng, k, d, n, k)?)?;
        asym = asym.max(hm.max_asymmetry());
    }
    report.push(
        "curvature",
        "kronecker_identity",
        kron,
        1e-10,
        "vec(U)^T (uu^T ⊗ hh^T) vec(U) vs (u^T U h)^2",
    );
    report.push(
        "curvature",
        "fisher_psd",
        psd.max(0.0),
        1e-10,
        "max(0, -min eigenvalue) of dense Fisher",
    );
    report.push(
        "curvature",
        "dense_symmetry",
        asym,
        1e-12,
        "max |M - M^T| over dense Fisher and Hessian",
    );

    let mut rng = RngStream::new(opts.seed, 7);
    let (mut ident, mut hess_fd) = (0.0f64, 0.0f64);
    for i in 0..opts.instances {
        let k = 2 + rng.below(4);
        let d = 1 + rng.below(3);
        let layer = random_layer(&mut rng, k, d, 1.0)?;
        let h: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        let (neg_hess, outer) = fisher_identity_sides(&layer, &h)?;
        ident = ident.max((&neg_hess - &outer).amax());
        if i < 10 {
            let a = rng.below(k);
            let fd = fd_log_prob_hessian(&layer, &h, a, 1e-4);
            hess_fd = hess_fd.max((fd + &neg_hess).amax());
        }
    }
    report.push(
        "curvature",
        "fisher_identity",
        ident,
        1e-10,
        "-E[∇² log pi] vs E[∇ log pi ∇ log pi^T], dense",
    );
    report.push(
        "curvature",
        "log_prob_hessian_fd",
        hess_fd,
        1e-5,
        "analytic -F ⊗ hh^T vs central second differences",
    );

    let (negatives, worst) = fisher_nonnegativity_fuzz(opts.seed, opts.fuzz_cases)?;
    report.push(
        "curvature",
        "m_f_nonnegative_fuzz",
        negatives as f64,
        0.0,
        format!(
            "{} cases; negative evaluations counted (worst {worst:.3e})",
            opts.fuzz_cases
        ),
    );

    let (ratio, tail) = truncation_bias(opts)?;
    report.push(
        "curvature",
        "topk_truncation_bias",
        ratio,
        3.0,
        format!("max |truncated - full| / (tail mass * max v^2) for the per-state Fisher; largest tail mass {tail:.3}"),
    );
    Ok(())
}

/// Per-state Fisher quadratic on a top-k support against the full vocabulary.
pub fn truncation_bias(opts: &VerifyOptions) -> Result<(f64, f64)> {
    let mut rng = RngStream::new(opts.seed, 8);
    let (mut worst, mut max_tail) = (0.0f64, 0.0f64);
    for _ in 0..opts.instances {
        let k = 3 + rng.below(14);
        let top = 1 + rng.below(k - 1);
        let logits: Vec<f64> = (0..k).map(|_| 2.0 * rng.normal()).collect();
        let p = softmax(&logits);
        let v: Vec<f64> = (0..k).map(|_| rng.normal()).collect();
        let mut order: Vec<usize> = (0..k).collect();
        order.sort_by(|a, b| p[*b].total_cmp(&p[*a]));
        let mut keep = order[..top].to_vec();
        keep.sort_unstable();
        let pi_top = SparseVec::new(k, keep.iter().map(|&i| (i, p[i])))?;
        let pi_full = SparseVec::from_dense(&p)?;
        let vs = SparseVec::from_dense(&v)?;
        let gap = (state_fisher(&pi_top, &vs)? - state_fisher(&pi_full, &vs)?).abs();
        let tail = 1.0 - pi_top.sum();
        let vmax = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        max_tail = max_tail.max(tail);
        if tail > 0.0 {
            worst = worst.max(gap / (tail * vmax * vmax));
        }
    }
    Ok((worst, max_tail))
}

/// Worst `|slope - 3|` of the KL remainder fit over `n` random instances.
pub fn kl_order_battery(seed: u64, n: usize) -> Result<(f64, Vec<f64>)> {
    let mut rng = RngStream::new(seed, 9);
    let mut slopes = Vec::new();
    for _ in 0..n {
        let k = 3 + rng.below(5);
        let d = 2 + rng.below(3);
        let layer = random_layer(&mut rng, k, d, 1.0)?;
        let mut dir: Vec<f64> = (0..k * d).map(|_| rng.normal()).collect();
        let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt();
        dir.iter_mut().for_each(|x| *x /= norm);
        let states: Vec<DenseVec> = (0..8)
            .map(|_| DenseVec::new((0..d).map(|_| rng.normal()).collect()))
            .collect::<Result<_>>()?;
        let base = 0.15;
        let scales: Vec<f64> = (0..4).map(|i| base / 2f64.powi(i)).collect();
        let fit = kl_remainder_order(&layer, &dir, &states, &scales)?;
        slopes.push(fit.slope.unwrap_or(f64::NAN));
    }
    let worst = slopes.iter().fold(0.0f64, |m, s| m.max((s - 3.0).abs()));
    Ok((worst, slopes))
}

/// Small enumerable MDP with a random policy, used by the objective-order check.
pub fn objective_order_instance(rng: &mut RngStream) -> Result<(EnvSpec, Policy, Vec<f64>)> {
    let k = 3;
    let d = 4;
    let spec = EnvSpec::new(TaskFamily::Copy, k, 2, 2).with_discount(0.9);
    let encoder = FeatureEncoder::new(
        EncoderConfig {
            window: 3,
            feature_dim: d,
            nonlinearity: Nonlinearity::Tanh,
            seed: rng.below(1 << 30) as u64,
            scale: Some(1.0),
        },
        k,
    )?;
    let layer = random_layer(rng, k, d, 0.5)?;
    let policy = Policy::new(encoder, layer, k, 1.0, BehaviorLogprob::Full)?;
    let mut dir: Vec<f64> = (0..k * d).map(|_| rng.normal()).collect();
    let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt();
    dir.iter_mut().for_each(|x| *x /= norm);
    Ok((spec, policy, dir))
}

pub fn objective_order_battery(seed: u64, n: usize) -> Result<(f64, Vec<f64>)> {
    let mut rng = RngStream::new(seed, 10);
    let mut slopes = Vec::new();
    for _ in 0..n {
        let (spec, policy, dir) = objective_order_instance(&mut rng)?;
        let scales: Vec<f64> = (0..4).map(|i| 0.4 / 2f64.powi(i)).collect();
        let fit = objective_remainder_order(&spec, &policy, &dir, &scales)?;
        slopes.push(fit.slope.unwrap_or(f64::NAN));
    }
    let worst = slopes.iter().fold(0.0f64, |m, s| m.max((s - 3.0).abs()));
    Ok((worst, slopes))
}

fn kl_suite(report: &mut VerifyReport, opts: &VerifyOptions) -> Result<()> {
    let kl = kl_divergence(&[0.5, 0.5], &[0.6, 0.4])?;
    let expect = 0.5 * (0.5f64 / 0.6).ln() + 0.5 * (0.5f64 / 0.4).ln();
    report.push(
        "kl",
        "kl_two_point",
        (kl - expect).abs(),
        1e-15,
        format!("KL((.5,.5) || (.6,.4)) = {kl:.6}"),
    );

    let (worst, slopes) = kl_order_battery(opts.seed, 10)?;
    report.push(
        "kl",
        "kl_remainder_order",
        worst,
        0.3,
        format!("fitted slopes {slopes:.3?}"),
    );
    let (worst, slopes) = objective_order_battery(opts.seed, 5)?;
    report.push(
        "kl",
        "objective_remainder_order",
        worst,
        0.3,
        format!("fitted slopes {slopes:.3?}"),
    );
    Ok(())
}

/// Largest violation of `Δ̄^T F Δ̄ <= mean_i Δ_i^T F Δ_i` for averaged steps.
pub fn fisher_aggregation_battery(opts: &VerifyOptions) -> Result<f64> {
    let mut rng = RngStream::new(opts.seed, 11);
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..opts.instances {
        let (k, d) = random_dims(&mut rng);
        let n = 1 + rng.below(16);
        let f = dense_fisher(&random_factors(&mut rng, k, d, n, k)?)?;
        let b = 2 + rng.below(8);
        let steps: Vec<Vec<f64>> = (0..b)
            .map(|_| Ok(random_step(&mut rng, k, d, 1.0)?.rows.to_dense()))
            .collect::<Result<_>>()?;
        let mean_step: Vec<f64> = (0..k * d)
            .map(|i| steps.iter().map(|s| s[i]).sum::<f64>() / b as f64)
            .collect();
        let lhs = f.quad_form(&mean_step);
        let rhs = steps.iter().map(|s| f.quad_form(s)).sum::<f64>() / b as f64;
        worst = worst.max(lhs - rhs);
    }
    Ok(worst)
}

fn theorem_suite(report: &mut VerifyReport, opts: &VerifyOptions) -> Result<()> {
    let worst = fisher_aggregation_battery(opts)?;
    report.push(
        "theorem",
        "fisher_aggregation",
        worst.max(0.0),
        1e-10,
        format!("max(avg-step form - mean of forms) = {worst:.3e}"),
    );

    let t = theorem_threshold(0.9, 1.0, 1e-4, 1.0, 0.0)?;
    let c = 2.0 * 0.9 * 2f64.sqrt() / (0.1f64 * 0.1);
    report.push(
        "theorem",
        "threshold_constant",
        (t.c - c).abs().max((t.omega_min - c * 0.01).abs()),
        1e-9,
        format!("C = {:.4}, omega_min = {:.4}", t.c, t.omega_min),
    );

    let mut rng = RngStream::new(opts.seed, 12);
    let mut worst = 0.0f64;
    for _ in 0..opts.instances {
        let (k, d) = random_dims(&mut rng);
        let n = 1 + rng.below(8);
        let factors = random_factors(&mut rng, k, d, n, k)?;
        let step = random_step(&mut rng, k, d, 1.0)?;
        let alpha = 4.0 * rng.uniform() - 2.0;
        let a = shift_estimate(&factors, &step);
        let b = shift_estimate(&factors, &step.scaled(alpha));
        let scale = 1.0 + a.gdot.abs() + a.m_f + a.hquad.abs();
        worst = worst.max((b.gdot - alpha * a.gdot).abs() / scale);
        worst = worst.max((b.m_f - alpha * alpha * a.m_f).abs() / scale);
        worst = worst.max((b.hquad - alpha * alpha * a.hquad).abs() / scale);
    }
    report.push(
        "theorem",
        "shift_homogeneity",
        worst,
        1e-12,
        "relative deviation of gdot, hquad, m_F from alpha, alpha^2 scaling",
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn negated_hessian(f: &[TokenGradFactor], s: &CandidateStep) -> f64 {
        -estimators::directional_hessian(f, s)
    }

    #[test]
    fn all_suites_pass_on_the_real_kernels() {
        let opts = VerifyOptions {
            instances: 30,
            fuzz_cases: 500,
            ..VerifyOptions::default()
        };
        let report = run_verify(Suite::All, EstimatorFns::default(), &opts).unwrap();
        for c in &report.checks {
            assert!(c.passed, "{c:?}");
        }
    }

    #[test]
    fn corrupted_hessian_sign_fails_curvature_suite() {
        let opts = VerifyOptions {
            instances: 20,
            fuzz_cases: 10,
            ..VerifyOptions::default()
        };
        let fns = EstimatorFns {
            hessian: negated_hessian,
            ..EstimatorFns::default()
        };
        let report = run_verify(Suite::Curvature, fns, &opts).unwrap();
        assert!(!report.passed());
        assert!(!report.get("hessian_dense_equivalence").unwrap().passed);
        assert!(report.get("fisher_dense_equivalence").unwrap().passed);
    }
}
