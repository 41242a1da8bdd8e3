//! Run configuration: a TOML tree with presets and dotted `key=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::env::{EnvSpec, TaskFamily, DEFAULT_ENUMERATION_BUDGET};
use crate::error::{Error, Result};
use crate::optimizer::{Granularity, ObjectiveConfig, ThresholdConfig, ThresholdMode};
use crate::policy::{BehaviorLogprob, EncoderConfig, Nonlinearity};
use crate::stepmodel::{StepKind, StepModelState};

/// Sampling support when `policy.top_k` is 0, capped at the vocabulary size.
pub const DEFAULT_TOP_K: usize = 50;

/// Environment variable naming the default output root.
pub const OUTPUT_ROOT_VAR: &str = "CAPO_OUTPUT_ROOT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyConfig {
    pub window: usize,
    pub feature_dim: usize,
    pub nonlinearity: Nonlinearity,
    pub encoder_seed: u64,
    /// Embedding standard deviation; `1/sqrt(window)` when absent.
    pub encoder_scale: Option<f64>,
    /// 0 means `min(50, K)`.
    pub top_k: usize,
    pub temperature: f64,
    pub behavior_logprob: BehaviorLogprob,
    /// Standard deviation of the initial weights; 0 starts from the uniform policy.
    pub init_std: f64,
    /// Initial weights from a run or policy checkpoint; overrides `init_std`.
    pub init_from: Option<PathBuf>,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            window: 4,
            feature_dim: 16,
            nonlinearity: Nonlinearity::Tanh,
            encoder_seed: 7,
            encoder_scale: None,
            top_k: 0,
            temperature: 0.9,
            behavior_logprob: BehaviorLogprob::TopK,
            init_std: 0.0,
            init_from: None,
        }
    }
}

impl PolicyConfig {
    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            window: self.window,
            feature_dim: self.feature_dim,
            nonlinearity: self.nonlinearity,
            seed: self.encoder_seed,
            scale: self.encoder_scale,
        }
    }

    pub fn effective_top_k(&self, vocab_size: usize) -> usize {
        if self.top_k == 0 {
            vocab_size.min(DEFAULT_TOP_K)
        } else {
            self.top_k
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CapoConfig {
    pub enabled: bool,
    pub mode: ThresholdMode,
    pub delta_h: f64,
    pub delta_h_high: f64,
    pub delta_f: f64,
    pub granularity: Granularity,
}

impl Default for CapoConfig {
    fn default() -> Self {
        let t = ThresholdConfig::default();
        CapoConfig {
            enabled: true,
            mode: t.mode,
            delta_h: t.delta_h,
            delta_h_high: t.delta_h_high,
            delta_f: t.delta_f,
            granularity: t.granularity,
        }
    }
}

impl CapoConfig {
    pub fn thresholds(&self) -> ThresholdConfig {
        ThresholdConfig {
            mode: self.mode,
            delta_h: self.delta_h,
            delta_h_high: self.delta_h_high,
            delta_f: self.delta_f,
            granularity: self.granularity,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Constant,
    #[default]
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub kind: StepKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub schedule: Schedule,
    pub warmup_ratio: f64,
    /// Floor of the cosine decay as a fraction of `lr`.
    pub min_lr_ratio: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: StepKind::Adam,
            lr: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            schedule: Schedule::Cosine,
            warmup_ratio: 0.1,
            min_lr_ratio: 0.0,
        }
    }
}

impl OptimizerConfig {
    /// Learning rate for 0-based `iteration` out of `total`.
    pub fn lr_at(&self, iteration: u64, total: u64) -> f64 {
        match self.schedule {
            Schedule::Constant => self.lr,
            Schedule::Cosine => {
                let warm = (self.warmup_ratio * total as f64).ceil() as u64;
                if iteration < warm {
                    return self.lr * (iteration + 1) as f64 / warm as f64;
                }
                let span = total.saturating_sub(warm).max(1) as f64;
                let progress = ((iteration - warm) as f64 / span).min(1.0);
                let cos = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
                self.lr * (self.min_lr_ratio + (1.0 - self.min_lr_ratio) * cos)
            }
        }
    }

    pub fn step_model(&self, vocab_size: usize, feature_dim: usize) -> StepModelState {
        let mut s = StepModelState::new(self.kind, self.lr, vocab_size, feature_dim)
            .with_betas(self.beta1, self.beta2);
        s.eps = self.eps;
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub iterations: u64,
    pub group_size: usize,
    pub n_prompts: usize,
    pub seeds: Vec<u64>,
    /// Optimization passes over each sampled batch.
    pub t_reuse: usize,
    pub checkpoint_every: u64,
    /// Compute the exact objective each iteration when the task is small enough.
    pub eval_exact: bool,
    pub enumeration_budget: u64,
    pub output_dir: Option<PathBuf>,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            iterations: 100,
            group_size: 8,
            n_prompts: 8,
            seeds: vec![0],
            t_reuse: 1,
            checkpoint_every: 10,
            eval_exact: true,
            enumeration_budget: DEFAULT_ENUMERATION_BUDGET,
            output_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub env: EnvSpec,
    #[serde(default)]
    pub policy: PolicyConfig,
    #[serde(default)]
    pub objective: ObjectiveConfig,
    #[serde(default)]
    pub capo: CapoConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub run: RunSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            env: EnvSpec::new(TaskFamily::Copy, 8, 4, 4),
            policy: PolicyConfig::default(),
            objective: ObjectiveConfig::default(),
            capo: CapoConfig::default(),
            optimizer: OptimizerConfig::default(),
            run: RunSection::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Preset {
    /// Small learning rate, large batch.
    Conservative,
    /// 5x the learning rate, 12x smaller batch.
    Aggressive,
}

impl Preset {
    pub fn config(self) -> RunConfig {
        let mut c = RunConfig::default();
        c.run.group_size = 8;
        match self {
            Preset::Conservative => {
                c.optimizer.lr = 3e-6;
                c.run.n_prompts = 144;
            }
            Preset::Aggressive => {
                c.optimizer.lr = 1.5e-5;
                c.run.n_prompts = 12;
            }
        }
        c
    }
}

fn ensure(ok: bool, path: &str, msg: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::config(path, msg))
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        let k = self.env.vocab_size;
        let p = &self.policy;
        ensure(p.window >= 1, "policy.window", "must be >= 1")?;
        ensure(p.feature_dim >= 1, "policy.feature_dim", "must be >= 1")?;
        ensure(
            p.top_k <= k,
            "policy.top_k",
            "must not exceed env.vocab_size",
        )?;
        ensure(
            p.temperature > 0.0 && p.temperature.is_finite(),
            "policy.temperature",
            "must be positive",
        )?;
        ensure(
            p.init_std >= 0.0 && p.init_std.is_finite(),
            "policy.init_std",
            "must be >= 0",
        )?;
        if let Some(s) = p.encoder_scale {
            ensure(
                s > 0.0 && s.is_finite(),
                "policy.encoder_scale",
                "must be positive",
            )?;
        }
        self.objective.validate()?;
        if self.capo.enabled {
            self.capo.thresholds().validate()?;
        }
        let o = &self.optimizer;
        ensure(
            (0.0..1.0).contains(&o.warmup_ratio),
            "optimizer.warmup_ratio",
            "must lie in [0, 1)",
        )?;
        ensure(
            (0.0..=1.0).contains(&o.min_lr_ratio),
            "optimizer.min_lr_ratio",
            "must lie in [0, 1]",
        )?;
        o.step_model(k, p.feature_dim).validate()?;
        let r = &self.run;
        ensure(r.group_size >= 2, "run.group_size", "must be >= 2")?;
        ensure(r.n_prompts >= 1, "run.n_prompts", "must be >= 1")?;
        ensure(
            !r.seeds.is_empty(),
            "run.seeds",
            "must list at least one seed",
        )?;
        ensure(r.t_reuse >= 1, "run.t_reuse", "must be >= 1")?;
        ensure(
            r.checkpoint_every >= 1,
            "run.checkpoint_every",
            "must be >= 1",
        )?;
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config("<root>", e.to_string()))
    }

    pub fn to_table(&self) -> Result<toml::Table> {
        toml::Table::try_from(self).map_err(|e| Error::config("<root>", e.to_string()))
    }

    /// Deserializes and validates, reporting the offending field path.
    pub fn from_table(table: toml::Table) -> Result<Self> {
        let cfg: RunConfig =
            serde_path_to_error::deserialize(toml::Value::Table(table)).map_err(|e| {
                let path = e.path().to_string();
                Error::config(path, e.into_inner().to_string())
            })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::config("<root>", e.to_string()))?;
        Self::from_table(table)
    }

    /// Output root: `run.output_dir`, else `$CAPO_OUTPUT_ROOT`, else `runs`.
    pub fn output_root(&self) -> PathBuf {
        self.run
            .output_dir
            .clone()
            .or_else(|| std::env::var_os(OUTPUT_ROOT_VAR).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("runs"))
    }
}

/// Parses `a.b.c=value`. The value is read as a TOML literal, falling back to a bare string.
pub fn parse_override(s: &str) -> Result<(String, toml::Value)> {
    let (key, raw) = s
        .split_once('=')
        .ok_or_else(|| Error::config(s, "override must look like key=value"))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(Error::config(s, "override key must be a dotted path"));
    }
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    Ok((key.to_string(), value))
}

pub fn set_path(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().expect("split yields at least one part");
    let mut cur = table;
    for (i, p) in parts.iter().enumerate() {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::config(parts[..=i].join("."), "is not a table"))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

/// Recursively overlays `top` onto `base`.
pub fn merge(base: &mut toml::Table, top: toml::Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Loads a config: preset (or defaults), then the file, then overrides.
pub fn load_config(
    path: Option<&Path>,
    preset: Option<Preset>,
    overrides: &[String],
) -> Result<RunConfig> {
    let mut table = preset.map(Preset::config).unwrap_or_default().to_table()?;
    if let Some(path) = path {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: toml::Table = text.parse().map_err(|e: toml::de::Error| {
            Error::config(path.display().to_string(), e.to_string())
        })?;
        merge(&mut table, file);
    }
    for o in overrides {
        let (k, v) = parse_override(o)?;
        set_path(&mut table, &k, v)?;
    }
    RunConfig::from_table(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let c = RunConfig::default();
        c.validate().unwrap();
        let back = RunConfig::from_toml_str(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn presets_differ_by_five_and_twelve() {
        let c = Preset::Conservative.config();
        let a = Preset::Aggressive.config();
        assert_eq!(c.run.group_size * c.run.n_prompts, 1152);
        assert_eq!(a.run.group_size * a.run.n_prompts, 96);
        assert!((a.optimizer.lr / c.optimizer.lr - 5.0).abs() < 1e-12);
        assert_eq!(
            (c.run.group_size * c.run.n_prompts) / (a.run.group_size * a.run.n_prompts),
            12
        );
    }

    #[test]
    fn overrides_are_typed() {
        let c = load_config(
            None,
            None,
            &[
                "objective.clip_eps=0.05".into(),
                "optimizer.kind=sgd".into(),
                "run.seeds=[1,2]".into(),
            ],
        )
        .unwrap();
        assert_eq!(c.objective.clip_eps, 0.05);
        assert_eq!(c.optimizer.kind, StepKind::Sgd);
        assert_eq!(c.run.seeds, vec![1, 2]);
    }

    #[test]
    fn bad_field_reports_its_path() {
        let err = load_config(None, None, &["capo.delta_f=\"x\"".into()]).unwrap_err();
        match err {
            Error::Config { path, .. } => assert_eq!(path, "capo.delta_f"),
            e => panic!("{e}"),
        }
        let err = load_config(None, None, &["run.bogus=1".into()]).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        let err = load_config(None, None, &["run.seeds=[]".into()]).unwrap_err();
        assert!(matches!(err, Error::Config { ref path, .. } if path == "run.seeds"));
    }

    #[test]
    fn cosine_schedule_warms_up_then_decays() {
        let o = OptimizerConfig::default();
        let lrs: Vec<f64> = (0..100).map(|i| o.lr_at(i, 100)).collect();
        assert!((lrs[9] - o.lr).abs() < 1e-15);
        assert!(lrs[..10].windows(2).all(|w| w[0] < w[1]));
        assert!(lrs[10..].windows(2).all(|w| w[0] >= w[1]));
        assert!(lrs[99] < 0.01 * o.lr);
    }
}
