//! Matrix-free directional Fisher and Hessian against their dense references.
//!
//! cargo run --example sparse_curvature

use capo::estimators::{directional_fisher, directional_hessian, shift_estimate};
use capo::numerics::RngStream;
use capo::oracle::{dense_fisher, dense_hessian, operator_norm, random_factors, random_step};

fn main() -> capo::Result<()> {
    let (k, d, n) = (6, 3, 12);
    let mut rng = RngStream::new(1, 0);
    let factors = random_factors(&mut rng, k, d, n, k)?;
    let step = random_step(&mut rng, k, d, 0.1)?;

    let f = dense_fisher(&factors)?;
    let h = dense_hessian(&factors)?;
    let fast_f = directional_fisher(&factors, &step);
    let fast_h = directional_hessian(&factors, &step);
    let x = step.rows.to_dense();
    let dense_f = f.quad_form(&x);
    let dense_h = h.quad_form(&x);
    println!("K={k} d={d} tokens={n}, |step|={:.4}", step.norm);
    println!(
        "Fisher  matrix-free {fast_f:+.12e}  dense {dense_f:+.12e}  diff {:.1e}",
        (fast_f - dense_f).abs()
    );
    println!(
        "Hessian matrix-free {fast_h:+.12e}  dense {dense_h:+.12e}  diff {:.1e}",
        (fast_h - dense_h).abs()
    );
    println!(
        "operator norm of the dense Hessian: {:.4}",
        operator_norm(&h)?
    );

    let s = shift_estimate(&factors, &step);
    println!(
        "m_H = {:+.6e} (gdot {:+.6e}, hquad {:+.6e}), m_F = {:.6e}",
        s.m_h, s.gdot, s.hquad, s.m_f
    );

    // Sparse top-k supports: the estimators never touch rows outside them.
    let sparse = random_factors(&mut rng, 64, d, n, 4)?;
    let big_step = random_step(&mut rng, 64, d, 0.1)?;
    let support: usize = sparse.iter().map(|f| f.support().len()).sum();
    println!(
        "K=64 top_k=4: {support} support entries over {n} tokens, m_F = {:.6e}",
        directional_fisher(&sparse, &big_step) / 2.0
    );
    Ok(())
}
