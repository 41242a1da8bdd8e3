//! Brute-force references for the estimators.
//!
//! Nothing here calls into the estimator kernels: softmax, Kronecker
//! assembly and quadratic forms are re-derived densely, so agreement between
//! the two paths is evidence rather than a restatement.

pub mod theorem;
pub mod verify;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::Serialize;

use crate::env::{EnvSpec, Token, DEFAULT_ENUMERATION_BUDGET};
use crate::error::{Error, Result};
use crate::estimators::{CandidateStep, TokenGradFactor};
use crate::numerics::{DenseVec, RngStream, RowSparse, SparseVec};
use crate::policy::{action_distribution, LastLayer, Policy};

/// Largest `K * d` for which dense curvature is materialized.
pub const MAX_DENSE_PARAMS: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CurvatureKind {
    Hessian,
    Fisher,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseCurvature {
    pub matrix: DMatrix<f64>,
    pub kind: CurvatureKind,
}

impl DenseCurvature {
    /// `x^T M x` for `x = vec(U)` in row-major order.
    pub fn quad_form(&self, x: &[f64]) -> f64 {
        let v = DVector::from_column_slice(x);
        (v.transpose() * &self.matrix * &v)[(0, 0)]
    }

    pub fn eigenvalues(&self) -> Vec<f64> {
        SymmetricEigen::new(self.matrix.clone())
            .eigenvalues
            .iter()
            .copied()
            .collect()
    }

    pub fn max_asymmetry(&self) -> f64 {
        (&self.matrix - self.matrix.transpose()).amax()
    }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

fn log_softmax_at(w: &[f64], k: usize, h: &[f64], a: usize) -> f64 {
    let d = h.len();
    let logits: Vec<f64> = (0..k)
        .map(|r| (0..d).map(|j| w[r * d + j] * h[j]).sum())
        .collect();
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
    logits[a] - lse
}

fn probs_at(w: &[f64], k: usize, h: &[f64]) -> Vec<f64> {
    let d = h.len();
    let logits: Vec<f64> = (0..k)
        .map(|r| (0..d).map(|j| w[r * d + j] * h[j]).sum())
        .collect();
    softmax(&logits)
}

fn dense_of(v: &SparseVec) -> Vec<f64> {
    let mut out = vec![0.0; v.dim()];
    for (i, x) in v.iter() {
        out[i] = x;
    }
    out
}

fn check_size(factors: &[TokenGradFactor]) -> Result<(usize, usize)> {
    let f = factors
        .first()
        .ok_or_else(|| Error::rejected("no factors"))?;
    let (k, d) = (f.u.dim(), f.h.len());
    if k * d > MAX_DENSE_PARAMS {
        return Err(Error::Resource(format!(
            "dense curvature needs K*d <= {MAX_DENSE_PARAMS}, got {}",
            k * d
        )));
    }
    Ok((k, d))
}

// Adds `c * (A ⊗ h h^T)` with `A` a K x K matrix given as a closure.
fn add_kron(m: &mut DMatrix<f64>, c: f64, k: usize, a: impl Fn(usize, usize) -> f64, h: &[f64]) {
    let d = h.len();
    for r1 in 0..k {
        for r2 in 0..k {
            let arr = c * a(r1, r2);
            if arr == 0.0 {
                continue;
            }
            for i in 0..d {
                for j in 0..d {
                    m[(r1 * d + i, r2 * d + j)] += arr * h[i] * h[j];
                }
            }
        }
    }
}

/// `(1/N) sum_i (u_i u_i^T) ⊗ (h_i h_i^T)`.
pub fn dense_fisher(factors: &[TokenGradFactor]) -> Result<DenseCurvature> {
    let (k, d) = check_size(factors)?;
    let mut m = DMatrix::zeros(k * d, k * d);
    let c = 1.0 / factors.len() as f64;
    for f in factors {
        let u = dense_of(&f.u);
        add_kron(&mut m, c, k, |a, b| u[a] * u[b], f.h.as_slice());
    }
    Ok(DenseCurvature {
        matrix: m,
        kind: CurvatureKind::Fisher,
    })
}

/// `(1/N) sum_i w_i A_i (u_i u_i^T - diag(pi_i) + pi_i pi_i^T) ⊗ (h_i h_i^T)`.
pub fn dense_hessian(factors: &[TokenGradFactor]) -> Result<DenseCurvature> {
    let (k, d) = check_size(factors)?;
    let mut m = DMatrix::zeros(k * d, k * d);
    let n = factors.len() as f64;
    for f in factors {
        let u = dense_of(&f.u);
        let p = dense_of(&f.pi);
        let block = |a: usize, b: usize| {
            let diag = if a == b { p[a] } else { 0.0 };
            u[a] * u[b] - (diag - p[a] * p[b])
        };
        add_kron(&mut m, f.weight * f.advantage / n, k, block, f.h.as_slice());
    }
    Ok(DenseCurvature {
        matrix: m,
        kind: CurvatureKind::Hessian,
    })
}

/// Largest singular value by power iteration on `M^T M`, to 1e-8 relative
/// tolerance.
pub fn operator_norm(m: &DenseCurvature) -> Result<f64> {
    operator_norm_of(&m.matrix)
}

pub fn operator_norm_of(m: &DMatrix<f64>) -> Result<f64> {
    let n = m.ncols();
    if n == 0 || m.amax() == 0.0 {
        return Ok(0.0);
    }
    let mut rng = RngStream::new(0x5eed, 7);
    let mut x = DVector::from_fn(n, |_, _| rng.normal());
    x /= x.norm();
    let mut sigma = 0.0f64;
    for _ in 0..10_000 {
        let y = m * &x;
        let next = y.norm();
        let z = m.transpose() * y;
        let zn = z.norm();
        if zn == 0.0 {
            return Ok(next);
        }
        x = z / zn;
        if (next - sigma).abs() <= 1e-8 * next {
            return Ok(next);
        }
        sigma = next;
    }
    Err(Error::Numerical(
        "power iteration did not converge in 10^4 iterations".into(),
    ))
}

/// Central-difference check of `d log pi(a|h) / dW` against the analytic
/// factor `(e_a - pi) ⊗ h`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FdReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

/// Denominator floor for relative errors, so near-zero entries are judged
/// on absolute error scaled by this constant.
pub const FD_REL_FLOOR: f64 = 1e-3;

pub fn fd_gradient_check(
    layer: &LastLayer,
    h: &[f64],
    action: Token,
    h_fd: f64,
) -> Result<FdReport> {
    if !(1e-7..=1e-3).contains(&h_fd) {
        return Err(Error::rejected(format!(
            "finite-difference step {h_fd} outside [1e-7, 1e-3]"
        )));
    }
    fd_errors(layer, h, action, h_fd)
}

/// Ratio of the max absolute finite-difference error at `h_fd` to that at
/// `h_fd / 2`; about 4 for a second-order scheme above the roundoff floor.
pub fn fd_order_ratio(layer: &LastLayer, h: &[f64], action: Token, h_fd: f64) -> Result<f64> {
    let coarse = fd_errors(layer, h, action, h_fd)?.max_abs_error;
    let fine = fd_errors(layer, h, action, 0.5 * h_fd)?.max_abs_error;
    Ok(coarse / fine)
}

fn fd_errors(layer: &LastLayer, h: &[f64], action: Token, h_fd: f64) -> Result<FdReport> {
    if !(h_fd > 0.0) {
        return Err(Error::rejected("finite-difference step must be positive"));
    }
    let k = layer.vocab_size();
    let d = layer.feature_dim();
    let a = action as usize;
    let dist = action_distribution(layer, h, k)?;
    let factor = TokenGradFactor::new(
        a,
        dist.topk,
        std::sync::Arc::new(DenseVec::new(h.to_vec())?),
        1.0,
        1.0,
    )?;
    let mut w = layer.as_slice().to_vec();
    let mut report = FdReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
    };
    for r in 0..k {
        for j in 0..d {
            let idx = r * d + j;
            let orig = w[idx];
            w[idx] = orig + h_fd;
            let plus = log_softmax_at(&w, k, h, a);
            w[idx] = orig - h_fd;
            let minus = log_softmax_at(&w, k, h, a);
            w[idx] = orig;
            let fd = (plus - minus) / (2.0 * h_fd);
            let an = factor.u.get(r) * h[j];
            let abs = (fd - an).abs();
            let rel = abs / an.abs().max(fd.abs()).max(FD_REL_FLOOR);
            report.max_abs_error = report.max_abs_error.max(abs);
            report.max_rel_error = report.max_rel_error.max(rel);
        }
    }
    Ok(report)
}

/// `sum_a p_a log(p_a / q_a)`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    let mut kl = 0.0;
    for (&pa, &qa) in p.iter().zip(q) {
        if pa > 0.0 {
            if qa <= 0.0 {
                return Err(Error::Numerical(
                    "KL undefined: q_a = 0 where p_a > 0".into(),
                ));
            }
            kl += pa * (pa / qa).ln();
        }
    }
    Ok(kl)
}

/// Mean over `states` (given by their features) of `KL(pi_before || pi_after)`.
pub fn exact_kl(before: &LastLayer, after: &LastLayer, states: &[DenseVec]) -> Result<f64> {
    if states.is_empty() {
        return Err(Error::rejected("empty state set"));
    }
    let k = before.vocab_size();
    let mut total = 0.0;
    for h in states {
        let p = probs_at(before.as_slice(), k, h.as_slice());
        let q = probs_at(after.as_slice(), k, h.as_slice());
        total += kl_divergence(&p, &q)?;
    }
    Ok(total / states.len() as f64)
}

/// `½ mean_s sum_a pi_a ((e_a - pi)^T U h_s)^2`: the policy shift with the
/// expectation over actions taken exactly.
pub fn exact_fisher_shift(layer: &LastLayer, direction: &[f64], states: &[DenseVec]) -> f64 {
    let k = layer.vocab_size();
    let mut total = 0.0;
    for h in states {
        let hs = h.as_slice();
        let p = probs_at(layer.as_slice(), k, hs);
        let v: Vec<f64> = (0..k)
            .map(|r| {
                (0..hs.len())
                    .map(|j| direction[r * hs.len() + j] * hs[j])
                    .sum()
            })
            .collect();
        let pv: f64 = p.iter().zip(&v).map(|(a, b)| a * b).sum();
        total += p
            .iter()
            .zip(&v)
            .map(|(pa, va)| pa * (va - pv).powi(2))
            .sum::<f64>();
    }
    0.5 * total / states.len() as f64
}

/// `J`, `dJ/ds` and `d²J/ds²` at `s = 0` along `W + s U`, by exact
/// enumeration of every prompt and action sequence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ObjectiveExpansion {
    pub j: f64,
    pub d1: f64,
    pub d2: f64,
}

pub fn objective_expansion(
    spec: &EnvSpec,
    policy: &Policy,
    direction: &[f64],
) -> Result<ObjectiveExpansion> {
    spec.validate()?;
    if spec.enumeration_size() > DEFAULT_ENUMERATION_BUDGET {
        return Err(Error::Resource("objective enumeration over budget".into()));
    }
    let prompts = spec.all_prompts();
    let mut acc = ObjectiveExpansion {
        j: 0.0,
        d1: 0.0,
        d2: 0.0,
    };
    let rho = 1.0 / prompts.len() as f64;
    for p in &prompts {
        expand(spec, policy, direction, p, 0, rho, 0.0, 0.0, &mut acc)?;
    }
    Ok(acc)
}

#[allow(clippy::too_many_arguments)]
fn expand(
    spec: &EnvSpec,
    policy: &Policy,
    dir: &[f64],
    state: &[Token],
    t: usize,
    prob: f64,
    s1: f64,
    s2: f64,
    acc: &mut ObjectiveExpansion,
) -> Result<()> {
    let k = policy.vocab_size();
    let h = policy.encoder.encode(state);
    let hs = h.as_slice();
    let d = hs.len();
    let p = probs_at(policy.layer.as_slice(), k, hs);
    let v: Vec<f64> = (0..k)
        .map(|r| (0..d).map(|j| dir[r * d + j] * hs[j]).sum())
        .collect();
    let pv: f64 = p.iter().zip(&v).map(|(a, b)| a * b).sum();
    let fisher: f64 = p
        .iter()
        .zip(&v)
        .map(|(pa, va)| pa * (va - pv).powi(2))
        .sum();
    for a in 0..k {
        if p[a] == 0.0 {
            continue;
        }
        let l1 = v[a] - pv;
        let (n1, n2) = (s1 + l1, s2 - fisher);
        let tr = spec.step(state, a as Token)?;
        let pr = prob * p[a];
        if tr.reward != 0.0 {
            let r = spec.discount.powi(t as i32) * tr.reward;
            acc.j += pr * r;
            acc.d1 += pr * r * n1;
            acc.d2 += pr * r * (n1 * n1 + n2);
        }
        if !tr.done {
            expand(spec, policy, dir, &tr.next_state, t + 1, pr, n1, n2, acc)?;
        }
    }
    Ok(())
}

/// `max |Q(s, a) - V(s)|` over every reachable state and action.
pub fn max_abs_advantage(spec: &EnvSpec, policy: &Policy) -> Result<f64> {
    spec.validate()?;
    if spec.enumeration_size() > DEFAULT_ENUMERATION_BUDGET {
        return Err(Error::Resource("advantage enumeration over budget".into()));
    }
    let mut worst = 0.0f64;
    for p in spec.all_prompts() {
        state_value(spec, policy, &p, &mut worst)?;
    }
    Ok(worst)
}

fn state_value(spec: &EnvSpec, policy: &Policy, state: &[Token], worst: &mut f64) -> Result<f64> {
    let k = policy.vocab_size();
    let h = policy.encoder.encode(state);
    let p = probs_at(policy.layer.as_slice(), k, h.as_slice());
    let mut q = vec![0.0; k];
    for (a, qa) in q.iter_mut().enumerate() {
        let tr = spec.step(state, a as Token)?;
        *qa = tr.reward;
        if !tr.done {
            *qa += spec.discount * state_value(spec, policy, &tr.next_state, worst)?;
        }
    }
    let v: f64 = p.iter().zip(&q).map(|(a, b)| a * b).sum();
    for qa in &q {
        *worst = worst.max((qa - v).abs());
    }
    Ok(v)
}

/// Result of fitting `log error` against `log scale`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OrderFit {
    pub scales: Vec<f64>,
    pub errors: Vec<f64>,
    /// `None` when every error is exactly zero.
    pub slope: Option<f64>,
}

impl OrderFit {
    pub fn fit(scales: Vec<f64>, errors: Vec<f64>) -> Self {
        if errors.iter().all(|&e| e == 0.0) {
            return OrderFit {
                scales,
                errors,
                slope: None,
            };
        }
        let pts: Vec<(f64, f64)> = scales
            .iter()
            .zip(&errors)
            .filter(|(_, &e)| e > 0.0)
            .map(|(s, e)| (s.ln(), e.ln()))
            .collect();
        let n = pts.len() as f64;
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
        let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
        let slope = if sxx > 0.0 { Some(sxy / sxx) } else { None };
        OrderFit {
            scales,
            errors,
            slope,
        }
    }

    pub fn is_exact(&self) -> bool {
        self.errors.iter().all(|&e| e == 0.0)
    }
}

fn check_scales(scales: &[f64]) -> Result<()> {
    let (lo, hi) = scales.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &s| {
        (lo.min(s), hi.max(s))
    });
    if scales.len() < 2 || !(lo > 0.0) || hi / lo < 4.0 {
        return Err(Error::rejected(
            "scales must be positive and span at least two octaves",
        ));
    }
    Ok(())
}

/// `|exact KL - m_F|` at each scale of `direction`, fitted for its order.
pub fn kl_remainder_order(
    layer: &LastLayer,
    direction: &[f64],
    states: &[DenseVec],
    scales: &[f64],
) -> Result<OrderFit> {
    check_scales(scales)?;
    let k = layer.vocab_size();
    let d = layer.feature_dim();
    let mut errors = Vec::with_capacity(scales.len());
    for &s in scales {
        let step: Vec<f64> = direction.iter().map(|x| s * x).collect();
        let moved = LastLayer::from_row_major(
            k,
            d,
            layer
                .as_slice()
                .iter()
                .zip(&step)
                .map(|(w, u)| w + u)
                .collect(),
        )?;
        let kl = exact_kl(layer, &moved, states)?;
        if kl >= 0.1 {
            return Err(Error::rejected(format!("scale {s} too large: KL = {kl}")));
        }
        errors.push((kl - exact_fisher_shift(layer, &step, states)).abs());
    }
    Ok(OrderFit::fit(scales.to_vec(), errors))
}

/// `|J(W + sU) - J(W) - m_H(sU)|` at each scale, fitted for its order.
pub fn objective_remainder_order(
    spec: &EnvSpec,
    policy: &Policy,
    direction: &[f64],
    scales: &[f64],
) -> Result<OrderFit> {
    check_scales(scales)?;
    let base = objective_expansion(spec, policy, direction)?;
    let k = policy.vocab_size();
    let d = policy.feature_dim();
    let mut errors = Vec::with_capacity(scales.len());
    for &s in scales {
        let mut moved = policy.clone();
        moved.layer = LastLayer::from_row_major(
            k,
            d,
            policy
                .layer
                .as_slice()
                .iter()
                .zip(direction)
                .map(|(w, u)| w + s * u)
                .collect(),
        )?;
        let j = objective_expansion(spec, &moved, direction)?.j;
        let model = s * base.d1 + 0.5 * s * s * base.d2;
        errors.push((j - base.j - model).abs());
    }
    Ok(OrderFit::fit(scales.to_vec(), errors))
}

/// Random token factors for dense cross-checks. Probabilities come from a
/// softmax of random logits, truncated to the `top_k` largest.
pub fn random_factors(
    rng: &mut RngStream,
    k: usize,
    d: usize,
    n: usize,
    top_k: usize,
) -> Result<Vec<TokenGradFactor>> {
    (0..n)
        .map(|_| {
            let logits: Vec<f64> = (0..k).map(|_| 1.5 * rng.normal()).collect();
            let p = softmax(&logits);
            let mut order: Vec<usize> = (0..k).collect();
            order.sort_by(|a, b| p[*b].total_cmp(&p[*a]).then(a.cmp(b)));
            let mut keep = order[..top_k].to_vec();
            keep.sort_unstable();
            let pi = SparseVec::new(k, keep.iter().map(|&i| (i, p[i])))?;
            let mut renorm: Vec<f64> = keep.iter().map(|&i| p[i]).collect();
            let z: f64 = renorm.iter().sum();
            renorm.iter_mut().for_each(|x| *x /= z);
            let a = keep[rng.draw_categorical(&renorm)?];
            let h: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
            TokenGradFactor::new(
                a,
                pi,
                std::sync::Arc::new(DenseVec::new(h)?),
                rng.normal(),
                0.1 + 0.9 * rng.uniform(),
            )
        })
        .collect()
}

pub fn random_step(rng: &mut RngStream, k: usize, d: usize, scale: f64) -> Result<CandidateStep> {
    let rows = (0..k).map(|r| (r, (0..d).map(|_| scale * rng.normal()).collect()));
    Ok(CandidateStep::new(RowSparse::from_rows(k, d, rows)?))
}

/// `-E_a[∇² log pi]` and `E_a[∇ log pi ∇ log pi^T]` for one state, dense.
pub fn fisher_identity_sides(layer: &LastLayer, h: &[f64]) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let k = layer.vocab_size();
    let d = layer.feature_dim();
    if k * d > MAX_DENSE_PARAMS {
        return Err(Error::Resource("dense identity check too large".into()));
    }
    let p = probs_at(layer.as_slice(), k, h);
    // the Hessian of log pi_a does not depend on a: -(diag(p) - p p^T) ⊗ h h^T
    let mut neg_hess = DMatrix::zeros(k * d, k * d);
    add_kron(
        &mut neg_hess,
        1.0,
        k,
        |a, b| {
            if a == b {
                p[a] - p[a] * p[b]
            } else {
                -p[a] * p[b]
            }
        },
        h,
    );
    let mut outer = DMatrix::zeros(k * d, k * d);
    for a in 0..k {
        let dist = action_distribution(layer, h, k)?;
        let f = TokenGradFactor::new(
            a,
            dist.topk,
            std::sync::Arc::new(DenseVec::new(h.to_vec())?),
            1.0,
            1.0,
        )?;
        let g = DVector::from_fn(k * d, |i, _| f.u.get(i / d) * h[i % d]);
        outer += p[a] * &g * g.transpose();
    }
    Ok((neg_hess, outer))
}

/// Finite-difference Hessian of `log pi(a|h)` with respect to `W`.
pub fn fd_log_prob_hessian(layer: &LastLayer, h: &[f64], action: usize, step: f64) -> DMatrix<f64> {
    let k = layer.vocab_size();
    let n = layer.as_slice().len();
    let w0 = layer.as_slice().to_vec();
    let f = |w: &[f64]| log_softmax_at(w, k, h, action);
    DMatrix::from_fn(n, n, |i, j| {
        let mut w = w0.clone();
        let mut eval = |di: f64, dj: f64| {
            w.copy_from_slice(&w0);
            w[i] += di;
            w[j] += dj;
            f(&w)
        };
        (eval(step, step) - eval(step, -step) - eval(-step, step) + eval(-step, -step))
            / (4.0 * step * step)
    })
}
