//! Models of the optimizer step `Δψ` taken on the last layer.
//!
//! Proposals read the moment state but never write it, so a rejected
//! candidate leaves no trace. `commit` advances the moments once per
//! accepted update.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::CandidateStep;
use crate::numerics::RowSparse;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum StepKind {
    Sgd,
    #[default]
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepModelState {
    pub kind: StepKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub p: RowSparse,
    pub q: RowSparse,
    pub t: u64,
}

impl StepModelState {
    pub fn new(kind: StepKind, lr: f64, vocab_size: usize, feature_dim: usize) -> Self {
        StepModelState {
            kind,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            p: RowSparse::zeros(vocab_size, feature_dim),
            q: RowSparse::zeros(vocab_size, feature_dim),
            t: 0,
        }
    }

    pub fn with_betas(mut self, beta1: f64, beta2: f64) -> Self {
        self.beta1 = beta1;
        self.beta2 = beta2;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("optimizer.lr", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) {
            return Err(Error::config("optimizer.beta1", "must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("optimizer.beta2", "must lie in [0, 1)"));
        }
        if !(self.eps > 0.0) {
            return Err(Error::config("optimizer.eps", "must be positive"));
        }
        self.p.validate()?;
        self.q.validate()?;
        if self.q.values().iter().any(|&v| v < 0.0) {
            return Err(Error::Data("negative second moment".into()));
        }
        Ok(())
    }

    /// Step the optimizer would take on `grad`, without touching the state.
    pub fn propose_step(&self, grad: &RowSparse) -> Result<CandidateStep> {
        match self.kind {
            StepKind::Sgd => Ok(CandidateStep::new(grad.scaled(self.lr))),
            StepKind::Adam => {
                let rows = union_rows(&[
                    grad.row_indices(),
                    self.p.row_indices(),
                    self.q.row_indices(),
                ]);
                self.adam_on_rows(grad, &rows)
            }
        }
    }

    /// Like [`propose_step`](Self::propose_step) but only on `rows` (sorted).
    /// Rows outside this set are left at zero.
    pub fn propose_step_on_rows(&self, grad: &RowSparse, rows: &[usize]) -> Result<CandidateStep> {
        match self.kind {
            StepKind::Sgd => Ok(CandidateStep::new(grad.restrict_rows(rows).scaled(self.lr))),
            StepKind::Adam => self.adam_on_rows(grad, rows),
        }
    }

    fn adam_on_rows(&self, grad: &RowSparse, rows: &[usize]) -> Result<CandidateStep> {
        let d = grad.n_cols();
        if grad.n_rows() != self.p.n_rows() || d != self.p.n_cols() {
            return Err(Error::rejected(
                "gradient shape does not match the moment state",
            ));
        }
        let t1 = (self.t + 1) as i32;
        let c1 = 1.0 - self.beta1.powi(t1);
        let c2 = 1.0 - self.beta2.powi(t1);
        let zero = vec![0.0; d];
        let mut out = Vec::with_capacity(rows.len());
        for &r in rows {
            let g = grad.row(r);
            let p = self.p.row(r);
            let q = self.q.row(r);
            if g.is_none() && p.is_none() && q.is_none() {
                continue;
            }
            let (g, p, q) = (g.unwrap_or(&zero), p.unwrap_or(&zero), q.unwrap_or(&zero));
            let step: Vec<f64> = (0..d)
                .map(|j| {
                    let p1 = self.beta1 * p[j] + (1.0 - self.beta1) * g[j];
                    let q1 = self.beta2 * q[j] + (1.0 - self.beta2) * g[j] * g[j];
                    self.lr * (p1 / c1) / ((q1 / c2).sqrt() + self.eps)
                })
                .collect();
            out.push((r, step));
        }
        Ok(CandidateStep::new(RowSparse::from_rows(
            grad.n_rows(),
            d,
            out,
        )?))
    }

    /// Advances the moments with the gradient of the accepted update.
    pub fn commit(&mut self, grad: &RowSparse) -> Result<()> {
        if self.kind == StepKind::Adam {
            let p = self
                .p
                .scaled(self.beta1)
                .add_scaled(grad, 1.0 - self.beta1)?;
            let g2 = RowSparse::from_rows(
                grad.n_rows(),
                grad.n_cols(),
                grad.iter()
                    .map(|(r, v)| (r, v.iter().map(|x| x * x).collect())),
            )?;
            let q = self
                .q
                .scaled(self.beta2)
                .add_scaled(&g2, 1.0 - self.beta2)?;
            self.p = p;
            self.q = q;
        }
        self.t += 1;
        Ok(())
    }
}

fn union_rows(sets: &[&[usize]]) -> Vec<usize> {
    let mut all: Vec<usize> = sets.iter().flat_map(|s| s.iter().copied()).collect();
    all.sort_unstable();
    all.dedup();
    all
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn single(k: usize, d: usize, row: usize, v: Vec<f64>) -> RowSparse {
        RowSparse::from_rows(k, d, vec![(row, v)]).unwrap()
    }

    #[test]
    fn sgd_scales_gradient() {
        let s = StepModelState::new(StepKind::Sgd, 0.1, 2, 1);
        let step = s.propose_step(&single(2, 1, 0, vec![1.0])).unwrap();
        assert_eq!(step.rows.row(0), Some(&[0.1][..]));
        assert_eq!(step.rows.stored_rows(), 1);
    }

    #[test]
    fn adam_first_step() {
        let s = StepModelState::new(StepKind::Adam, 0.01, 2, 1);
        let step = s.propose_step(&single(2, 1, 0, vec![0.5])).unwrap();
        let v = step.rows.row(0).unwrap()[0];
        assert_abs_diff_eq!(v, 0.01 * 0.5 / (0.5 + 1e-8), epsilon = 1e-17);
        assert_abs_diff_eq!(v, 0.01, epsilon = 1e-9);
    }

    #[test]
    fn zero_everything_gives_zero_step() {
        let s = StepModelState::new(StepKind::Adam, 0.01, 3, 2);
        let step = s.propose_step(&RowSparse::zeros(3, 2)).unwrap();
        assert_eq!(step.norm, 0.0);
    }

    #[test]
    fn commit_decays_and_accumulates() {
        let g = single(2, 1, 1, vec![2.0]);
        let mut s = StepModelState::new(StepKind::Adam, 0.01, 2, 1);
        s.commit(&g).unwrap();
        s.commit(&g).unwrap();
        assert_eq!(s.t, 2);
        assert_abs_diff_eq!(
            s.p.row(1).unwrap()[0],
            (1.0 - 0.9) * (1.0 + 0.9) * 2.0,
            epsilon = 1e-15
        );

        let p0 = s.p.row(1).unwrap()[0];
        let zero = RowSparse::zeros(2, 1);
        let before = s.propose_step(&zero).unwrap().norm;
        for m in 1..=5 {
            s.commit(&zero).unwrap();
            assert_abs_diff_eq!(s.p.row(1).unwrap()[0], 0.9f64.powi(m) * p0, epsilon = 1e-15);
        }
        assert!(s.propose_step(&zero).unwrap().norm < before);
        assert_eq!(s.t, 7);
    }

    #[test]
    fn sgd_commit_only_counts() {
        let mut s = StepModelState::new(StepKind::Sgd, 0.1, 2, 1);
        s.commit(&single(2, 1, 0, vec![1.0])).unwrap();
        assert_eq!(s.t, 1);
        assert!(s.p.is_empty() && s.q.is_empty());
    }

    #[test]
    fn proposal_matches_commit() {
        // the hypothetical step equals the step computed from committed moments
        let g =
            RowSparse::from_rows(4, 2, vec![(0, vec![0.3, -0.2]), (2, vec![1.0, 0.0])]).unwrap();
        let mut s = StepModelState::new(StepKind::Adam, 0.05, 4, 2);
        s.commit(&single(4, 2, 3, vec![0.1, 0.1])).unwrap();
        let proposed = s.propose_step(&g).unwrap();
        let mut after = s.clone();
        after.commit(&g).unwrap();
        let c1 = 1.0 - 0.9f64.powi(after.t as i32);
        let c2 = 1.0 - 0.999f64.powi(after.t as i32);
        for r in [0, 2, 3] {
            let p = after.p.row(r).unwrap();
            let q = after.q.row(r).unwrap();
            for j in 0..2 {
                let expect = 0.05 * (p[j] / c1) / ((q[j] / c2).sqrt() + 1e-8);
                assert_abs_diff_eq!(proposed.rows.row(r).unwrap()[j], expect, epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn restricted_proposal_matches_full_on_its_rows() {
        let g = RowSparse::from_rows(4, 1, vec![(0, vec![0.3]), (2, vec![1.0])]).unwrap();
        let mut s = StepModelState::new(StepKind::Adam, 0.05, 4, 1);
        s.commit(&single(4, 1, 3, vec![0.1])).unwrap();
        let full = s.propose_step(&g).unwrap();
        let part = s.propose_step_on_rows(&g, &[2, 3]).unwrap();
        assert_eq!(part.rows.row_indices(), &[2, 3]);
        assert_eq!(part.rows.row(2), full.rows.row(2));
        assert_eq!(part.rows.row(3), full.rows.row(3));
    }

    fn arb_grad() -> impl Strategy<Value = RowSparse> {
        prop::collection::btree_map(0usize..6, prop::collection::vec(-2.0f64..2.0, 3), 0..6)
            .prop_map(|m| RowSparse::from_rows(6, 3, m).unwrap())
    }

    proptest! {
        #[test]
        fn proposals_are_pure(g in arb_grad(), h in arb_grad()) {
            let mut s = StepModelState::new(StepKind::Adam, 0.01, 6, 3);
            s.commit(&h).unwrap();
            let snapshot = s.clone();
            let a = s.propose_step(&g).unwrap();
            let b = s.propose_step(&g).unwrap();
            prop_assert_eq!(a, b);
            prop_assert_eq!(s, snapshot);
        }

        #[test]
        fn first_adam_step_is_below_lr(g in arb_grad()) {
            let s = StepModelState::new(StepKind::Adam, 0.01, 6, 3);
            let step = s.propose_step(&g).unwrap();
            for (r, vals) in step.rows.iter() {
                let gr = g.row(r).unwrap();
                for (v, gv) in vals.iter().zip(gr) {
                    prop_assert!(v.abs() <= 0.01 * gv.abs() / (gv.abs() + 1e-8) * (1.0 + 1e-12));
                    prop_assert!(v.abs() < 0.01);
                }
            }
        }

        #[test]
        fn zero_betas_give_normalized_sgd(g in arb_grad(), h in arb_grad()) {
            let mut s = StepModelState::new(StepKind::Adam, 0.01, 6, 3).with_betas(0.0, 0.0);
            s.commit(&h).unwrap();
            let step = s.propose_step(&g).unwrap();
            for (r, vals) in step.rows.iter() {
                let gr = g.row(r).unwrap_or(&[0.0; 3]);
                for (v, gv) in vals.iter().zip(gr) {
                    prop_assert!((v - 0.01 * gv / (gv.abs() + 1e-8)).abs() <= 1e-15);
                }
            }
        }

        #[test]
        fn untouched_rows_stay_empty(g in arb_grad()) {
            let mut s = StepModelState::new(StepKind::Adam, 0.01, 6, 3);
            s.commit(&g).unwrap();
            prop_assert_eq!(s.p.row_indices(), g.row_indices());
            prop_assert_eq!(s.q.row_indices(), g.row_indices());
            prop_assert!(s.q.values().iter().all(|&v| v >= 0.0));
        }
    }
}
