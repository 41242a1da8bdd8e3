//! Advantages, factored token gradients and matrix-free curvature estimates.
//!
//! Each generated token contributes `A * w * (u ⊗ h)` to the last-layer
//! gradient, with `u = e_a - pi(s)` sparse over the top-k support and `h` the
//! state features. The Kronecker product is never formed: every quadratic
//! form reduces to `v = U h` evaluated on the rows of `u`'s support.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::env::GroupBatch;
use crate::error::{Error, Result};
use crate::numerics::{DenseVec, RowAccumulator, RowSparse, SparseVec};

pub const DEFAULT_ADVANTAGE_EPS: f64 = 1e-4;

/// Factored gradient of one token.
#[derive(Debug, Clone)]
pub struct TokenGradFactor {
    /// `e_a - pi` on the top-k support (plus the action).
    pub u: SparseVec,
    /// Temperature-1 probabilities on the top-k support.
    pub pi: SparseVec,
    pub h: Arc<DenseVec>,
    pub advantage: f64,
    /// `gamma^t`, `1/|tau|` or 1 depending on the objective.
    pub weight: f64,
    pub traj_id: usize,
    pub step_index: usize,
}

impl TokenGradFactor {
    /// Builds `u = e_action - pi` from the stored top-k probabilities.
    pub fn new(
        action: usize,
        pi: SparseVec,
        h: Arc<DenseVec>,
        advantage: f64,
        weight: f64,
    ) -> Result<Self> {
        if action >= pi.dim() {
            return Err(Error::Data(format!(
                "action {action} outside the vocabulary"
            )));
        }
        if !advantage.is_finite() || !weight.is_finite() {
            return Err(Error::Numerical("non-finite advantage or weight".into()));
        }
        let mut entries: Vec<(usize, f64)> = pi
            .iter()
            .map(|(i, p)| (i, if i == action { 1.0 - p } else { -p }))
            .collect();
        if pi.indices().binary_search(&action).is_err() {
            let pos = entries.partition_point(|&(i, _)| i < action);
            entries.insert(pos, (action, 1.0));
        }
        let u = SparseVec::new(pi.dim(), entries)?;
        Ok(TokenGradFactor {
            u,
            pi,
            h,
            advantage,
            weight,
            traj_id: 0,
            step_index: 0,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.u.dim()
    }

    pub fn feature_dim(&self) -> usize {
        self.h.len()
    }

    /// Rows of `W` this token's gradient touches.
    pub fn support(&self) -> &[usize] {
        self.u.indices()
    }

    /// `(u . v, v^T F(s) v)` with `v = U h` on the support rows of `u` and `pi`.
    pub fn quadratic_parts(&self, step: &RowSparse) -> (f64, f64) {
        let h = self.h.as_slice();
        let v_of = |row: usize| -> f64 {
            step.row(row)
                .map(|r| r.iter().zip(h).map(|(a, b)| a * b).sum())
                .unwrap_or(0.0)
        };
        let terms: Vec<(f64, f64)> = self.pi.iter().map(|(row, p)| (p, v_of(row))).collect();
        let uv: f64 = self
            .u
            .iter()
            .map(|(row, ui)| {
                let v = match self.pi.indices().binary_search(&row) {
                    Ok(j) => terms[j].1,
                    Err(_) => v_of(row),
                };
                ui * v
            })
            .sum();
        let m: f64 = terms.iter().map(|(p, v)| p * v).sum();
        let mass: f64 = terms.iter().map(|(p, _)| p).sum();
        (uv, state_fisher_quad(&terms, m, mass))
    }
}

// `sum p v^2 - (sum p v)^2`, written as a sum of non-negative terms:
// `sum p (v - m)^2 + m^2 (1 - sum p)` with `m = sum p v`.
fn state_fisher_quad(terms: &[(f64, f64)], m: f64, mass: f64) -> f64 {
    let centered: f64 = terms.iter().map(|&(p, v)| p * (v - m) * (v - m)).sum();
    centered + m * m * (1.0 - mass).max(0.0)
}

/// Per-state Fisher quadratic `v^T (diag(pi) - pi pi^T) v` over the stored support.
pub fn state_fisher(pi: &SparseVec, v: &SparseVec) -> Result<f64> {
    if pi.dim() != v.dim() {
        return Err(Error::rejected("dimension mismatch"));
    }
    let terms: Vec<(f64, f64)> = pi.iter().map(|(i, p)| (p, v.get(i))).collect();
    let m: f64 = terms.iter().map(|(p, v)| p * v).sum();
    Ok(state_fisher_quad(&terms, m, pi.sum()))
}

/// Candidate update `Δψ`, stored on its row support.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateStep {
    pub rows: RowSparse,
    pub norm: f64,
}

impl CandidateStep {
    pub fn new(rows: RowSparse) -> Self {
        let norm = rows.norm();
        CandidateStep { rows, norm }
    }

    pub fn zeros(vocab_size: usize, feature_dim: usize) -> Self {
        CandidateStep::new(RowSparse::zeros(vocab_size, feature_dim))
    }

    pub fn scaled(&self, alpha: f64) -> Self {
        CandidateStep::new(self.rows.scaled(alpha))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShiftEstimate {
    pub m_h: f64,
    pub m_f: f64,
    pub n_tokens: usize,
    pub gdot: f64,
    pub hquad: f64,
}

impl ShiftEstimate {
    pub fn zero(n_tokens: usize) -> Self {
        ShiftEstimate {
            m_h: 0.0,
            m_f: 0.0,
            n_tokens,
            gdot: 0.0,
            hquad: 0.0,
        }
    }
}

/// `(R_i - mean) / (sigma + eps)` with the population standard deviation.
pub fn grpo_advantages(returns: &[f64], eps: f64) -> Vec<f64> {
    let n = returns.len() as f64;
    if returns.is_empty() {
        return Vec::new();
    }
    let mean = returns.iter().sum::<f64>() / n;
    let var = returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let denom = var.sqrt() + eps;
    returns.iter().map(|r| (r - mean) / denom).collect()
}

/// `R_i - mean`, without scale normalization.
pub fn dr_grpo_advantages(returns: &[f64]) -> Vec<f64> {
    if returns.is_empty() {
        return Vec::new();
    }
    let mean = returns.iter().sum::<f64>() / returns.len() as f64;
    returns.iter().map(|r| r - mean).collect()
}

/// Per-token weight applied on top of the advantage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Weighting {
    /// `gamma^t`.
    Discounted { gamma: f64 },
    /// `1 / |tau|`.
    LengthNormalized,
    /// 1 for every token.
    Unit,
}

impl Weighting {
    pub fn weight(&self, step: usize, len: usize) -> f64 {
        match *self {
            Weighting::Discounted { gamma } => gamma.powi(step as i32),
            Weighting::LengthNormalized => 1.0 / len as f64,
            Weighting::Unit => 1.0,
        }
    }
}

/// One factor per generated token of `batch`, in trajectory order.
///
/// `advantages[i][t]` is the advantage of token `t` of trajectory `i`
/// (trajectories numbered in group order).
pub fn token_grad_factors(
    batch: &GroupBatch,
    advantages: &[Vec<f64>],
    weighting: Weighting,
) -> Result<Vec<TokenGradFactor>> {
    if advantages.len() != batch.n_trajectories() {
        return Err(Error::Data(format!(
            "{} advantage rows for {} trajectories",
            advantages.len(),
            batch.n_trajectories()
        )));
    }
    let mut out = Vec::with_capacity(batch.n_tokens());
    for (traj_id, (tr, adv)) in batch.trajectories().zip(advantages).enumerate() {
        if adv.len() != tr.len() {
            return Err(Error::Data(format!(
                "trajectory {traj_id}: {} advantages for {} tokens",
                adv.len(),
                tr.len()
            )));
        }
        for (t, (step, &a)) in tr.steps.iter().zip(adv).enumerate() {
            if step.topk_probs.is_empty() || step.features.is_empty() {
                return Err(Error::Data(format!(
                    "trajectory {traj_id} step {t}: missing probability snapshot"
                )));
            }
            let mut f = TokenGradFactor::new(
                step.action as usize,
                step.topk_probs.clone(),
                step.features.clone(),
                a,
                weighting.weight(t, tr.len()),
            )?;
            f.traj_id = traj_id;
            f.step_index = t;
            out.push(f);
        }
    }
    Ok(out)
}

fn shape_of(factors: &[TokenGradFactor]) -> Result<(usize, usize)> {
    let first = factors
        .first()
        .ok_or_else(|| Error::rejected("empty factor list"))?;
    let (k, d) = (first.vocab_size(), first.feature_dim());
    if factors
        .iter()
        .any(|f| f.vocab_size() != k || f.feature_dim() != d)
    {
        return Err(Error::rejected("factors disagree on shape"));
    }
    Ok((k, d))
}

/// `(1/N) sum_i A_i w_i (u_i ⊗ h_i)`, accumulated row-sparsely.
pub fn model_gradient(factors: &[TokenGradFactor]) -> Result<RowSparse> {
    let (k, d) = shape_of(factors)?;
    let mut acc = RowAccumulator::new(k, d);
    for f in factors {
        let c = f.advantage * f.weight;
        if c != 0.0 {
            acc.add_outer(c, &f.u, f.h.as_slice());
        }
    }
    acc.finish(1.0 / factors.len() as f64)
}

/// Un-halved `Δψ^T F Δψ`: `(1/N) sum_i (u_i . v_i)^2`.
pub fn directional_fisher(factors: &[TokenGradFactor], step: &CandidateStep) -> f64 {
    if factors.is_empty() {
        return 0.0;
    }
    let sum: f64 = factors
        .iter()
        .map(|f| {
            let (uv, _) = f.quadratic_parts(&step.rows);
            uv * uv
        })
        .sum();
    sum / factors.len() as f64
}

/// Un-halved `Δψ^T H Δψ`: `(1/N) sum_i w_i A_i ((u_i . v_i)^2 - v_i^T F(s_i) v_i)`.
pub fn directional_hessian(factors: &[TokenGradFactor], step: &CandidateStep) -> f64 {
    if factors.is_empty() {
        return 0.0;
    }
    let sum: f64 = factors
        .iter()
        .filter(|f| f.advantage != 0.0 && f.weight != 0.0)
        .map(|f| {
            let (uv, vfv) = f.quadratic_parts(&step.rows);
            f.weight * f.advantage * (uv * uv - vfv)
        })
        .sum();
    sum / factors.len() as f64
}

/// `g . Δψ` with `g` the model gradient of `factors`, evaluated matrix-free.
pub fn gradient_dot(factors: &[TokenGradFactor], step: &CandidateStep) -> f64 {
    if factors.is_empty() {
        return 0.0;
    }
    let sum: f64 = factors
        .iter()
        .filter(|f| f.advantage != 0.0 && f.weight != 0.0)
        .map(|f| f.advantage * f.weight * f.quadratic_parts(&step.rows).0)
        .sum();
    sum / factors.len() as f64
}

impl ShiftEstimate {
    /// Assembles the shifts from `g.Δψ` and the un-halved quadratic forms.
    pub fn from_parts(gdot: f64, hessian_quad: f64, fisher_quad: f64, n_tokens: usize) -> Self {
        let hquad = 0.5 * hessian_quad;
        ShiftEstimate {
            m_h: gdot + hquad,
            m_f: 0.5 * fisher_quad,
            n_tokens,
            gdot,
            hquad,
        }
    }
}

/// Objective shift `m_H = g.Δψ + ½ Δψ^T H Δψ` and policy shift `m_F = ½ Δψ^T F Δψ`.
pub fn shift_estimate(factors: &[TokenGradFactor], step: &CandidateStep) -> ShiftEstimate {
    ShiftEstimate::from_parts(
        gradient_dot(factors, step),
        directional_hessian(factors, step),
        directional_fisher(factors, step),
        factors.len(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn worked_factor(advantage: f64) -> TokenGradFactor {
        let pi = SparseVec::from_dense(&[0.5, 0.5]).unwrap();
        TokenGradFactor::new(
            0,
            pi,
            Arc::new(DenseVec::new(vec![1.0]).unwrap()),
            advantage,
            1.0,
        )
        .unwrap()
    }

    fn worked_step() -> CandidateStep {
        CandidateStep::new(
            RowSparse::from_rows(2, 1, vec![(0, vec![1.0]), (1, vec![-1.0])]).unwrap(),
        )
    }

    #[test]
    fn grpo_advantage_examples() {
        assert_eq!(grpo_advantages(&[1.0; 4], 1e-4), vec![0.0; 4]);
        let a = grpo_advantages(&[1.0, 0.0, 0.0, 1.0], 1e-4);
        let expect = 0.5 / 0.5001;
        for (x, s) in a.iter().zip([1.0, -1.0, -1.0, 1.0]) {
            assert_abs_diff_eq!(*x, s * expect, epsilon = 1e-15);
        }
        assert_abs_diff_eq!(a[0], 0.9998, epsilon = 1e-4);
        let b = grpo_advantages(&[1.0, 0.0], 1e-4);
        assert_abs_diff_eq!(b[0], 0.9998, epsilon = 1e-4);
        assert_abs_diff_eq!(b[1], -0.9998, epsilon = 1e-4);
    }

    #[test]
    fn dr_grpo_advantage_examples() {
        assert_eq!(dr_grpo_advantages(&[1.0, 1.0]), vec![0.0, 0.0]);
        assert_eq!(
            dr_grpo_advantages(&[1.0, 0.0, 0.0, 1.0]),
            vec![0.5, -0.5, -0.5, 0.5]
        );
        assert_eq!(
            dr_grpo_advantages(&[0.0, 0.0, 0.0, 1.0]),
            vec![-0.25, -0.25, -0.25, 0.75]
        );
    }

    #[test]
    fn factor_examples() {
        let f = worked_factor(1.0);
        assert_eq!(f.u.iter().collect::<Vec<_>>(), vec![(0, 0.5), (1, -0.5)]);

        let saturated = SparseVec::from_dense(&[1.0, 0.0]).unwrap();
        let f = TokenGradFactor::new(
            0,
            saturated,
            Arc::new(DenseVec::new(vec![1.0]).unwrap()),
            1.0,
            1.0,
        )
        .unwrap();
        assert!(f.u.is_empty());

        // action off the stored support still appears in u
        let pi = SparseVec::new(4, vec![(1, 0.6), (2, 0.3)]).unwrap();
        let f = TokenGradFactor::new(3, pi, Arc::new(DenseVec::new(vec![1.0]).unwrap()), 1.0, 1.0)
            .unwrap();
        assert_eq!(
            f.u.iter().collect::<Vec<_>>(),
            vec![(1, -0.6), (2, -0.3), (3, 1.0)]
        );
        assert!(f.u.nnz() <= 3);
    }

    #[test]
    fn model_gradient_examples() {
        let g = model_gradient(&[worked_factor(1.0)]).unwrap();
        assert_eq!(g.row(0), Some(&[0.5][..]));
        assert_eq!(g.row(1), Some(&[-0.5][..]));

        let g2 = model_gradient(&[worked_factor(1.0), worked_factor(1.0)]).unwrap();
        assert_eq!(g2, g);

        let z = model_gradient(&[worked_factor(0.0), worked_factor(0.0)]).unwrap();
        assert_eq!(z.norm(), 0.0);

        assert!(matches!(model_gradient(&[]), Err(Error::RejectedInput(_))));
    }

    #[test]
    fn curvature_examples() {
        let f = [worked_factor(1.0)];
        let zero = CandidateStep::zeros(2, 1);
        assert_eq!(directional_fisher(&f, &zero), 0.0);
        assert_eq!(directional_hessian(&f, &zero), 0.0);
        assert_abs_diff_eq!(directional_fisher(&f, &worked_step()), 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(
            directional_hessian(&f, &worked_step()),
            0.0,
            epsilon = 1e-15
        );
        assert_eq!(
            directional_hessian(&[worked_factor(0.0)], &worked_step()),
            0.0
        );

        let (_, vfv) = f[0].quadratic_parts(&worked_step().rows);
        assert_abs_diff_eq!(vfv, 1.0, epsilon = 1e-15);
    }

    #[test]
    fn shift_examples() {
        let s = shift_estimate(&[worked_factor(1.0)], &worked_step());
        assert_abs_diff_eq!(s.gdot, 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(s.hquad, 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(s.m_h, 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(s.m_f, 0.5, epsilon = 1e-15);
        assert_eq!(s.n_tokens, 1);

        let z = shift_estimate(&[worked_factor(1.0)], &CandidateStep::zeros(2, 1));
        assert_eq!((z.m_h, z.m_f), (0.0, 0.0));
    }

    #[test]
    fn state_fisher_on_worked_case() {
        let pi = SparseVec::from_dense(&[0.5, 0.5]).unwrap();
        let v = SparseVec::from_dense(&[1.0, -1.0]).unwrap();
        assert_abs_diff_eq!(state_fisher(&pi, &v).unwrap(), 1.0, epsilon = 1e-15);
    }

    fn arb_factor(k: usize, d: usize) -> impl Strategy<Value = TokenGradFactor> {
        (
            prop::collection::vec(-3.0f64..3.0, k),
            prop::collection::vec(-2.0f64..2.0, d),
            0..k,
            -2.0f64..2.0,
            0.1f64..1.0,
            1..=k,
        )
            .prop_map(move |(logits, h, a, adv, w, top)| {
                let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
                let z: f64 = e.iter().sum();
                let mut order: Vec<usize> = (0..k).collect();
                order.sort_by(|x, y| e[*y].total_cmp(&e[*x]));
                let mut keep: Vec<usize> = order[..top].to_vec();
                keep.sort_unstable();
                let pi = SparseVec::new(k, keep.iter().map(|&i| (i, e[i] / z))).unwrap();
                TokenGradFactor::new(a, pi, Arc::new(DenseVec::new(h).unwrap()), adv, w).unwrap()
            })
    }

    fn arb_case() -> impl Strategy<Value = (Vec<TokenGradFactor>, CandidateStep)> {
        (2usize..7, 1usize..4).prop_flat_map(|(k, d)| {
            (
                prop::collection::vec(arb_factor(k, d), 1..8),
                prop::collection::vec(-1.0f64..1.0, k * d),
            )
                .prop_map(move |(fs, u)| {
                    let rows = (0..k).map(|r| (r, u[r * d..(r + 1) * d].to_vec()));
                    (
                        fs,
                        CandidateStep::new(RowSparse::from_rows(k, d, rows).unwrap()),
                    )
                })
        })
    }

    proptest! {
        #[test]
        fn fisher_shift_is_nonnegative((fs, step) in arb_case()) {
            prop_assert!(shift_estimate(&fs, &step).m_f >= 0.0);
            prop_assert!(directional_fisher(&fs, &step) >= 0.0);
            for f in &fs {
                prop_assert!(f.quadratic_parts(&step.rows).1 >= 0.0);
            }
        }

        #[test]
        fn shift_is_homogeneous((fs, step) in arb_case(), alpha in -3.0f64..3.0) {
            let base = shift_estimate(&fs, &step);
            let s = shift_estimate(&fs, &step.scaled(alpha));
            let tol = 1e-12 * (1.0 + base.gdot.abs() + base.m_f + base.hquad.abs());
            prop_assert!((s.gdot - alpha * base.gdot).abs() <= tol * (1.0 + alpha.abs()));
            prop_assert!((s.m_f - alpha * alpha * base.m_f).abs() <= tol * (1.0 + alpha * alpha));
            prop_assert!((s.hquad - alpha * alpha * base.hquad).abs() <= tol * (1.0 + alpha * alpha));
            prop_assert!((s.m_h - (s.gdot + s.hquad)).abs() <= 1e-15 * (1.0 + s.m_h.abs()));
        }

        #[test]
        fn gdot_matches_model_gradient_dot((fs, step) in arb_case()) {
            let g = model_gradient(&fs).unwrap();
            let s = shift_estimate(&fs, &step);
            prop_assert!((g.dot(&step.rows).unwrap() - s.gdot).abs() <= 1e-12);
        }

        #[test]
        fn grpo_advantages_are_centered(rs in prop::collection::vec(0.0f64..1.0, 2..16)) {
            let a = grpo_advantages(&rs, 1e-4);
            prop_assert!((a.iter().sum::<f64>() / a.len() as f64).abs() <= 1e-12);
            let b = grpo_advantages(&rs, 1e-300);
            let n = rs.len() as f64;
            let mean = rs.iter().sum::<f64>() / n;
            let sigma = (rs.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
            if sigma > 1e-6 {
                let sd = (b.iter().map(|x| x * x).sum::<f64>() / n).sqrt();
                prop_assert!((sd - 1.0).abs() <= 1e-9);
            }
        }
    }
}
