//! A two-axis sweep over learning rate and CAPO on/off, written to a temp dir.
//!
//! cargo run --release --example sweep_grid

use std::collections::BTreeMap;

use capo::harness::{run_sweep, GridSpec};

fn main() -> capo::Result<()> {
    let out = tempfile::tempdir().map_err(|e| capo::Error::io(std::env::temp_dir(), e))?;
    let mut axes = BTreeMap::new();
    axes.insert(
        "optimizer.lr".to_string(),
        vec![toml::Value::Float(0.01), toml::Value::Float(0.05)],
    );
    axes.insert(
        "capo.enabled".to_string(),
        vec![toml::Value::Boolean(false), toml::Value::Boolean(true)],
    );
    let grid = GridSpec {
        base: None,
        set: [
            "env.vocab_size=4",
            "env.horizon=3",
            "env.prompt_length=3",
            "policy.feature_dim=32",
            "optimizer.schedule=constant",
            "capo.delta_f=1.0",
            "capo.delta_h=1.0",
            "run.iterations=60",
            "run.checkpoint_every=60",
        ]
        .map(String::from)
        .to_vec(),
        seeds: Some(vec![0, 1]),
        max_runs: 16,
        axes,
    };
    let res = run_sweep(&grid, None, &[], out.path())?;
    println!("{} cells, {} runs", res.cells.len(), res.runs.len());
    print!(
        "{}",
        std::fs::read_to_string(out.path().join("summary.csv"))
            .map_err(|e| capo::Error::io(out.path(), e))?
    );
    Ok(())
}
