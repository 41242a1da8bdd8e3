//! Invariants of the estimators, thresholds and advantages on random inputs.

use capo::estimators::{
    directional_fisher, directional_hessian, dr_grpo_advantages, gradient_dot, grpo_advantages,
    shift_estimate, CandidateStep,
};
use capo::numerics::{RngStream, RowSparse};
use capo::optimizer::{theorem_threshold, Reason, ThresholdConfig, ThresholdMode};
use capo::oracle::{dense_fisher, dense_hessian, random_factors, random_step};
use proptest::prelude::*;

fn case(
    seed: u64,
    top_full: bool,
) -> (
    Vec<capo::estimators::TokenGradFactor>,
    CandidateStep,
    usize,
    usize,
) {
    let mut rng = RngStream::new(seed, 0);
    let k = 2 + rng.below(7);
    let d = 1 + rng.below(4);
    let n = 1 + rng.below(16);
    let top_k = if top_full { k } else { 1 + rng.below(k) };
    let factors = random_factors(&mut rng, k, d, n, top_k).unwrap();
    let step = random_step(&mut rng, k, d, 0.5).unwrap();
    (factors, step, k, d)
}

fn average(steps: &[CandidateStep]) -> CandidateStep {
    let mut acc = RowSparse::zeros(steps[0].rows.n_rows(), steps[0].rows.n_cols());
    for s in steps {
        acc = acc.add_scaled(&s.rows, 1.0 / steps.len() as f64).unwrap();
    }
    CandidateStep::new(acc)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn directional_forms_match_dense(seed in any::<u64>()) {
        let (factors, step, _, _) = case(seed, true);
        let x = step.rows.to_dense();
        let f = dense_fisher(&factors).unwrap().quad_form(&x);
        let h = dense_hessian(&factors).unwrap().quad_form(&x);
        prop_assert!((directional_fisher(&factors, &step) - f).abs() <= 1e-10);
        prop_assert!((directional_hessian(&factors, &step) - h).abs() <= 1e-10);
    }

    #[test]
    fn shifts_scale_with_the_step(seed in any::<u64>(), alpha in -3.0f64..3.0) {
        let (factors, step, _, _) = case(seed, false);
        let a = shift_estimate(&factors, &step);
        let b = shift_estimate(&factors, &step.scaled(alpha));
        let tol = 1e-12 * (1.0 + a.gdot.abs() + a.hquad.abs() + a.m_f);
        prop_assert!((b.gdot - alpha * a.gdot).abs() <= tol * (1.0 + alpha.abs()));
        prop_assert!((b.m_f - alpha * alpha * a.m_f).abs() <= tol * (1.0 + alpha * alpha));
        prop_assert!((b.hquad - alpha * alpha * a.hquad).abs() <= tol * (1.0 + alpha * alpha));
        prop_assert!((a.m_h - (a.gdot + a.hquad)).abs() <= tol);
        prop_assert!((a.gdot - gradient_dot(&factors, &step)).abs() <= tol);
    }

    #[test]
    fn fisher_form_of_an_average_is_at_most_the_average_form(seed in any::<u64>(), parts in 2usize..6) {
        let (factors, _, k, d) = case(seed, false);
        let mut rng = RngStream::new(seed, 1);
        let steps: Vec<CandidateStep> = (0..parts).map(|_| random_step(&mut rng, k, d, 1.0).unwrap()).collect();
        let lhs = directional_fisher(&factors, &average(&steps));
        let rhs = steps.iter().map(|s| directional_fisher(&factors, s)).sum::<f64>() / parts as f64;
        prop_assert!(lhs <= rhs + 1e-10);
    }

    #[test]
    fn fisher_shift_is_never_negative(seed in any::<u64>()) {
        let (factors, step, _, _) = case(seed, false);
        prop_assert!(shift_estimate(&factors, &step).m_f >= 0.0);
    }

    #[test]
    fn group_advantages_are_centered(returns in prop::collection::vec(-5.0f64..5.0, 2..16)) {
        let a = grpo_advantages(&returns, 1e-4);
        let b = dr_grpo_advantages(&returns);
        let n = returns.len() as f64;
        prop_assert!((a.iter().sum::<f64>() / n).abs() <= 1e-9);
        prop_assert!((b.iter().sum::<f64>() / n).abs() <= 1e-9);
    }

    #[test]
    fn grpo_advantages_ignore_affine_reward_changes(
        returns in prop::collection::vec(0.0f64..1.0, 2..12),
        scale in 0.5f64..4.0,
        shift in -2.0f64..2.0,
    ) {
        let spread = returns.iter().copied().fold(f64::NEG_INFINITY, f64::max)
            - returns.iter().copied().fold(f64::INFINITY, f64::min);
        prop_assume!(spread > 0.1);
        let moved: Vec<f64> = returns.iter().map(|r| scale * r + shift).collect();
        let a = grpo_advantages(&returns, 1e-12);
        let b = grpo_advantages(&moved, 1e-12);
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() <= 1e-8);
        }
    }

    #[test]
    fn looser_thresholds_accept_a_superset(seed in any::<u64>(), dh in 1e-4f64..1.0, df in 1e-4f64..1.0) {
        let (factors, step, _, _) = case(seed, false);
        let s = shift_estimate(&factors, &step);
        for mode in [ThresholdMode::Symmetric, ThresholdMode::Interval] {
            let strict = ThresholdConfig { mode, delta_h: dh, delta_f: df, ..ThresholdConfig::default() };
            let loose = ThresholdConfig {
                delta_h: if mode == ThresholdMode::Symmetric { 2.0 * dh } else { dh / 2.0 - 1.0 },
                delta_f: 2.0 * df,
                ..strict.clone()
            };
            if strict.judge(&s) == Reason::Ok {
                prop_assert_eq!(loose.judge(&s), Reason::Ok);
            }
        }
        prop_assert_eq!(ThresholdConfig::vacuous().judge(&s), Reason::Ok);
    }

    #[test]
    fn required_margin_grows_with_discount_and_advantage(
        g1 in 0.0f64..0.95, dg in 0.0f64..0.04, eps in 0.0f64..2.0, df in 0.0f64..1.0,
    ) {
        let a = theorem_threshold(g1, eps, df, 1.0, 0.1).unwrap();
        let b = theorem_threshold(g1 + dg, eps, df, 1.0, 0.1).unwrap();
        let c = theorem_threshold(g1, 2.0 * eps, df, 1.0, 0.1).unwrap();
        prop_assert!(b.delta_h_required >= a.delta_h_required);
        prop_assert!((c.omega_min - 2.0 * a.omega_min).abs() <= 1e-12 * (1.0 + a.omega_min));
        prop_assert!((a.delta_h_required - a.omega_min - 0.005).abs() <= 1e-12);
    }
}
