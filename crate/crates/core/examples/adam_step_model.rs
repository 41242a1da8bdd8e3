//! Adam step proposals use hypothetical moments; only `commit` advances them.
//!
//! cargo run --example adam_step_model

use capo::numerics::RowSparse;
use capo::stepmodel::{StepKind, StepModelState};

fn main() -> capo::Result<()> {
    let (k, d) = (4, 3);
    let g1 = RowSparse::from_rows(k, d, [(0, vec![1.0, -2.0, 0.5]), (2, vec![0.1, 0.0, -0.1])])?;
    let g2 = RowSparse::from_rows(k, d, [(0, vec![-1.0, 0.0, 0.5])])?;

    let mut adam = StepModelState::new(StepKind::Adam, 1e-2, k, d);
    let first = adam.propose_step(&g1)?;
    let again = adam.propose_step(&g1)?;
    println!("proposal is pure: {}", first == again);
    println!(
        "first Adam step (bias-corrected): {:?}",
        first.rows.to_dense()
    );

    adam.commit(&g1)?;
    let second = adam.propose_step(&g2)?;
    println!(
        "after one commit, rows touched by the step: {:?}",
        second.rows.row_indices()
    );
    println!("second step: {:?}", second.rows.to_dense());

    let sgd = StepModelState::new(StepKind::Sgd, 1e-2, k, d);
    println!("SGD step: {:?}", sgd.propose_step(&g1)?.rows.to_dense());
    Ok(())
}
