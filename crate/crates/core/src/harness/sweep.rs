//! Grid sweeps over config overrides, and CSV export of metrics streams.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::{load_config, parse_override, set_path, Preset, RunConfig};
use super::train::{read_jsonl, seed_dir, train_seed, MetricsRecord, RunSummary, METRICS_FILE};
use crate::error::{Error, Result};

/// Runs (cells x seeds) allowed when the grid does not set its own cap.
pub const DEFAULT_MAX_RUNS: usize = 64;

/// Trailing window, in iterations, for the peak and final statistics.
pub const SUMMARY_WINDOW: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    /// Base config file, relative to the grid file.
    #[serde(default)]
    pub base: Option<PathBuf>,
    /// Overrides applied to every cell before the axes.
    #[serde(default)]
    pub set: Vec<String>,
    #[serde(default)]
    pub seeds: Option<Vec<u64>>,
    #[serde(default = "default_max_runs")]
    pub max_runs: usize,
    /// Dotted config key -> values; cells are the cross product.
    pub axes: BTreeMap<String, Vec<toml::Value>>,
}

fn default_max_runs() -> usize {
    DEFAULT_MAX_RUNS
}

impl GridSpec {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| {
            Error::config(path.display().to_string(), e.to_string())
        })?;
        let mut spec: GridSpec = serde_path_to_error::deserialize(toml::Value::Table(table))
            .map_err(|e| Error::config(format!("grid.{}", e.path()), e.into_inner().to_string()))?;
        if let Some(base) = &spec.base {
            if base.is_relative() {
                spec.base = Some(path.parent().unwrap_or(Path::new(".")).join(base));
            }
        }
        Ok(spec)
    }

    /// Every cell as its list of `(key, value)` assignments, in axis order.
    pub fn cells(&self) -> Vec<Vec<(String, toml::Value)>> {
        let mut cells = vec![Vec::new()];
        for (key, values) in &self.axes {
            cells = cells
                .into_iter()
                .flat_map(|cell| {
                    values.iter().map(move |v| {
                        let mut c = cell.clone();
                        c.push((key.clone(), v.clone()));
                        c
                    })
                })
                .collect();
        }
        cells
    }
}

/// Config of one cell: preset/base file, grid-wide overrides, then the cell's values.
pub fn cell_config(
    grid: &GridSpec,
    preset: Option<Preset>,
    overrides: &[String],
    cell: &[(String, toml::Value)],
) -> Result<RunConfig> {
    let base = load_config(grid.base.as_deref(), preset, &[])?;
    let mut table = base.to_table()?;
    for o in grid.set.iter().chain(overrides) {
        let (k, v) = parse_override(o)?;
        set_path(&mut table, &k, v)?;
    }
    for (k, v) in cell {
        set_path(&mut table, k, v.clone())?;
    }
    let mut cfg = RunConfig::from_table(table)?;
    if let Some(seeds) = &grid.seeds {
        cfg.run.seeds = seeds.clone();
        cfg.validate()?;
    }
    Ok(cfg)
}

/// Trailing-window statistics of one run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunStats {
    pub final_reward: f64,
    pub peak_reward: f64,
    pub final_exact_j: Option<f64>,
    pub mean_rejection_rate: f64,
    pub max_rejection_rate: f64,
    pub skipped_updates: usize,
}

/// Moving average of `xs` over `window` trailing points (shorter at the start).
pub fn trailing_mean(xs: &[f64], window: usize) -> Vec<f64> {
    let w = window.max(1);
    (0..xs.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(w);
            xs[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64
        })
        .collect()
}

impl RunStats {
    /// Reward statistics use the batch rewards of iterations >= 1; `window`
    /// sets both the smoothing for the peak and the final averaging span.
    pub fn from_records(records: &[MetricsRecord], window: usize) -> Self {
        let train: Vec<&MetricsRecord> =
            records.iter().filter(|r| r.reward_mean.is_some()).collect();
        let rewards: Vec<f64> = train.iter().map(|r| r.reward_mean.unwrap_or(0.0)).collect();
        let smooth = trailing_mean(&rewards, window);
        let tail = &rewards[rewards.len().saturating_sub(window)..];
        let rates: Vec<f64> = train.iter().map(|r| r.rejection_rate).collect();
        RunStats {
            final_reward: mean(tail),
            peak_reward: smooth.iter().copied().fold(f64::NAN, f64::max),
            final_exact_j: records.last().and_then(|r| r.exact_j),
            mean_rejection_rate: mean(&rates),
            max_rejection_rate: rates.iter().copied().fold(0.0, f64::max),
            skipped_updates: train.iter().map(|r| r.skipped_updates).sum(),
        }
    }
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        f64::NAN
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

fn std_dev(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

fn value_label(v: &toml::Value) -> String {
    match v {
        toml::Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    pub cells: Vec<Vec<(String, toml::Value)>>,
    /// `(cell index, run summary)` in execution order.
    pub runs: Vec<(usize, RunSummary)>,
}

/// Runs every cell and seed under `root/cell-<i>/seed-<s>` and writes
/// `results.csv` (one row per run) and `summary.csv` (one row per cell).
pub fn run_sweep(
    grid: &GridSpec,
    preset: Option<Preset>,
    overrides: &[String],
    root: &Path,
) -> Result<SweepResult> {
    let cells = grid.cells();
    let configs = cells
        .iter()
        .map(|c| cell_config(grid, preset, overrides, c))
        .collect::<Result<Vec<_>>>()?;
    let total: usize = configs.iter().map(|c| c.run.seeds.len()).sum();
    if total > grid.max_runs {
        return Err(Error::Resource(format!(
            "grid has {} cells and {total} runs, above the cap of {}",
            cells.len(),
            grid.max_runs
        )));
    }
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;

    let mut runs = Vec::with_capacity(total);
    for (i, cfg) in configs.iter().enumerate() {
        let cell_root = root.join(format!("cell-{i}"));
        for &seed in &cfg.run.seeds {
            runs.push((
                i,
                train_seed(cfg, seed, &seed_dir(&cell_root, seed), false)?,
            ));
        }
    }
    write_tables(&cells, &runs, root)?;
    Ok(SweepResult { cells, runs })
}

fn write_tables(
    cells: &[Vec<(String, toml::Value)>],
    runs: &[(usize, RunSummary)],
    root: &Path,
) -> Result<()> {
    let keys: Vec<String> = cells
        .first()
        .map(|c| c.iter().map(|(k, _)| k.clone()).collect())
        .unwrap_or_default();
    let csv_err = |p: &Path| {
        let p = p.to_path_buf();
        move |e: csv::Error| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(&p, io),
            other => Error::Data(format!("{other:?}")),
        }
    };

    let path = root.join("results.csv");
    let mut w = csv::Writer::from_path(&path).map_err(csv_err(&path))?;
    let mut header = vec!["cell".to_string()];
    header.extend(keys.iter().cloned());
    header.extend(
        [
            "seed",
            "final_reward",
            "peak_reward",
            "final_exact_j",
            "mean_rejection_rate",
            "max_rejection_rate",
            "skipped_updates",
        ]
        .map(String::from),
    );
    w.write_record(&header).map_err(csv_err(&path))?;
    let mut by_cell: BTreeMap<usize, Vec<RunStats>> = BTreeMap::new();
    for (cell, run) in runs {
        let s = RunStats::from_records(&run.records, SUMMARY_WINDOW);
        let mut row = vec![cell.to_string()];
        row.extend(cells[*cell].iter().map(|(_, v)| value_label(v)));
        row.extend([
            run.seed.to_string(),
            s.final_reward.to_string(),
            s.peak_reward.to_string(),
            opt(s.final_exact_j),
            s.mean_rejection_rate.to_string(),
            s.max_rejection_rate.to_string(),
            s.skipped_updates.to_string(),
        ]);
        w.write_record(&row).map_err(csv_err(&path))?;
        by_cell.entry(*cell).or_default().push(s);
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let path = root.join("summary.csv");
    let mut w = csv::Writer::from_path(&path).map_err(csv_err(&path))?;
    let mut header = vec!["cell".to_string()];
    header.extend(keys.iter().cloned());
    header.extend(
        [
            "seeds",
            "final_reward_mean",
            "final_reward_std",
            "peak_reward_mean",
            "final_exact_j_mean",
            "mean_rejection_rate",
        ]
        .map(String::from),
    );
    w.write_record(&header).map_err(csv_err(&path))?;
    for (cell, stats) in &by_cell {
        let finals: Vec<f64> = stats.iter().map(|s| s.final_reward).collect();
        let peaks: Vec<f64> = stats.iter().map(|s| s.peak_reward).collect();
        let js: Vec<f64> = stats.iter().filter_map(|s| s.final_exact_j).collect();
        let rates: Vec<f64> = stats.iter().map(|s| s.mean_rejection_rate).collect();
        let mut row = vec![cell.to_string()];
        row.extend(cells[*cell].iter().map(|(_, v)| value_label(v)));
        row.extend([
            stats.len().to_string(),
            mean(&finals).to_string(),
            std_dev(&finals).to_string(),
            mean(&peaks).to_string(),
            if js.is_empty() {
                String::new()
            } else {
                mean(&js).to_string()
            },
            mean(&rates).to_string(),
        ]);
        w.write_record(&row).map_err(csv_err(&path))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))
}

/// Plotting columns of a metrics stream.
#[derive(Debug, Serialize)]
struct ExportRow {
    iteration: u64,
    completions: u64,
    reward: Option<f64>,
    #[serde(rename = "m_H")]
    m_h: f64,
    #[serde(rename = "m_F")]
    m_f: f64,
    rejection_rate: f64,
}

/// Writes the CSV export of `run_dir/metrics.jsonl` to `out`. Returns the row count.
pub fn export_csv(run_dir: &Path, out: &Path) -> Result<usize> {
    let records: Vec<MetricsRecord> = read_jsonl(&run_dir.join(METRICS_FILE))?;
    let mut w = csv::Writer::from_path(out).map_err(|e| Error::Data(e.to_string()))?;
    for r in &records {
        w.serialize(ExportRow {
            iteration: r.iteration,
            completions: r.completions,
            reward: r.reward_mean,
            m_h: r.m_h,
            m_f: r.m_f,
            rejection_rate: r.rejection_rate,
        })
        .map_err(|e| Error::Data(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(out, e))?;
    Ok(records.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(text: &str) -> GridSpec {
        toml::from_str(text).unwrap()
    }

    const BASE: &str = r#"
        set = ["env.vocab_size=4", "env.horizon=2", "env.prompt_length=2", "policy.feature_dim=4",
               "run.iterations=3", "run.group_size=2", "run.n_prompts=2", "optimizer.lr=0.05"]
    "#;

    #[test]
    fn cells_are_the_cross_product() {
        let g = grid(&format!(
            "{BASE}\n[axes]\n\"objective.clip_eps\" = [0.2, 0.1, 0.05]\n\"run.t_reuse\" = [2, 5]\n"
        ));
        let cells = g.cells();
        assert_eq!(cells.len(), 6);
        let c = cell_config(&g, None, &[], &cells[5]).unwrap();
        assert_eq!(c.objective.clip_eps, 0.05);
        assert_eq!(c.run.t_reuse, 5);
    }

    #[test]
    fn cap_exceeded_is_a_resource_error() {
        let g = grid(&format!(
            "{BASE}\nmax_runs = 5\nseeds = [0, 1]\n[axes]\n\"optimizer.kind\" = [\"sgd\", \"adam\"]\n\"objective.kind\" = [\"grpo\", \"dr_grpo\", \"reinforce\"]\n"
        ));
        let dir = tempfile::tempdir().unwrap();
        let err = run_sweep(&g, None, &[], dir.path()).unwrap_err();
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn single_cell_matches_train_and_writes_tables() {
        let g = grid(&format!(
            "{BASE}\nseeds = [4]\n[axes]\n\"objective.kind\" = [\"dr_grpo\"]\n"
        ));
        let dir = tempfile::tempdir().unwrap();
        let res = run_sweep(&g, None, &[], dir.path()).unwrap();
        assert_eq!(res.runs.len(), 1);

        let cfg = cell_config(&g, None, &[], &g.cells()[0]).unwrap();
        let solo = tempfile::tempdir().unwrap();
        train_seed(&cfg, 4, solo.path(), false).unwrap();
        assert_eq!(
            fs::read(solo.path().join(METRICS_FILE)).unwrap(),
            fs::read(dir.path().join("cell-0/seed-4").join(METRICS_FILE)).unwrap()
        );
        let results = fs::read_to_string(dir.path().join("results.csv")).unwrap();
        assert_eq!(results.lines().count(), 2);
        assert!(results.starts_with("cell,objective.kind,seed,"));
        assert!(
            fs::read_to_string(dir.path().join("summary.csv"))
                .unwrap()
                .lines()
                .count()
                == 2
        );

        let out = dir.path().join("export.csv");
        assert_eq!(
            export_csv(&dir.path().join("cell-0/seed-4"), &out).unwrap(),
            4
        );
        let text = fs::read_to_string(&out).unwrap();
        assert!(text.starts_with("iteration,completions,reward,m_H,m_F,rejection_rate\n0,0,,"));
    }

    #[test]
    fn trailing_mean_smooths() {
        assert_eq!(trailing_mean(&[1.0, 3.0, 5.0], 2), vec![1.0, 2.0, 4.0]);
    }
}
