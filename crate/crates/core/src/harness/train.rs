//! Training loop, metrics streams and checkpoints.
//!
//! A run directory holds `resolved.config`, `metrics.jsonl` (deterministic),
//! `timings.jsonl` (wall clock, not deterministic) and `checkpoint.json`.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use crate::env::{exact_objective, sample_group_batch};
use crate::error::{Error, Result};
use crate::estimators::shift_estimate;
use crate::numerics::RngStream;
use crate::optimizer::{
    aggregate_and_update, capo_filter, objective_terms, partition, PhaseTimes, Reason,
};
use crate::policy::{FeatureEncoder, LastLayer, Policy, PolicyCheckpoint};
use crate::stepmodel::StepModelState;

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const TIMINGS_FILE: &str = "timings.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const RESOLVED_CONFIG_FILE: &str = "resolved.config";

const RUN_CHECKPOINT_VERSION: u32 = 1;
/// Random streams of iteration `i` start at `i * STREAM_STRIDE`.
const STREAM_STRIDE: u64 = 1 << 24;
const INIT_STREAM: u64 = u64::MAX - 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub iteration: u64,
    pub completions: u64,
    pub lr: f64,
    /// Mean reward of the batch sampled this iteration; absent on the initial record.
    pub reward_mean: Option<f64>,
    /// Exact objective after the update, when the task is enumerable.
    pub exact_j: Option<f64>,
    /// Estimated shifts of the first committed step on the whole batch.
    pub m_h: f64,
    pub m_f: f64,
    pub rejection_rate: f64,
    pub rejections: BTreeMap<String, usize>,
    pub subsets: usize,
    pub tokens: usize,
    pub clipped_tokens: usize,
    pub skipped_updates: usize,
    pub step_norm: f64,
    pub grad_norm: f64,
}

impl MetricsRecord {
    fn empty(iteration: u64, completions: u64, lr: f64) -> Self {
        MetricsRecord {
            iteration,
            completions,
            lr,
            reward_mean: None,
            exact_j: None,
            m_h: 0.0,
            m_f: 0.0,
            rejection_rate: 0.0,
            rejections: Reason::ALL
                .iter()
                .map(|r| (r.as_str().to_string(), 0))
                .collect(),
            subsets: 0,
            tokens: 0,
            clipped_tokens: 0,
            skipped_updates: 0,
            step_norm: 0.0,
            grad_norm: 0.0,
        }
    }
}

/// Wall-clock seconds per phase of one iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRecord {
    pub iteration: u64,
    pub generation: f64,
    pub token_gradients: f64,
    pub proposal: f64,
    pub m_h: f64,
    pub m_f: f64,
    pub mask: f64,
    pub update: f64,
    pub moment_update: f64,
    /// Proposal, m_H, m_F, masking and moment update.
    pub capo_overhead: f64,
    /// Sum of the training phases above.
    pub step_total: f64,
    /// Batch-level shift estimates written to the metrics record.
    pub diagnostics: f64,
    pub evaluation: f64,
}

impl TimingRecord {
    fn new(iteration: u64, t: &PhaseTimes, diagnostics: Duration, evaluation: Duration) -> Self {
        TimingRecord {
            iteration,
            generation: t.generation.as_secs_f64(),
            token_gradients: t.token_gradients.as_secs_f64(),
            proposal: t.proposal.as_secs_f64(),
            m_h: t.m_h.as_secs_f64(),
            m_f: t.m_f.as_secs_f64(),
            mask: t.mask.as_secs_f64(),
            update: t.update.as_secs_f64(),
            moment_update: t.moment_update.as_secs_f64(),
            capo_overhead: t.capo_overhead().as_secs_f64(),
            step_total: t.total().as_secs_f64(),
            diagnostics: diagnostics.as_secs_f64(),
            evaluation: evaluation.as_secs_f64(),
        }
    }
}

/// Policy at iteration 0: the configured encoder with `W` from `init_from`,
/// or `W ~ N(0, init_std^2)`.
pub fn initial_policy(cfg: &RunConfig, seed: u64) -> Result<Policy> {
    let k = cfg.env.vocab_size;
    let d = cfg.policy.feature_dim;
    let encoder = FeatureEncoder::new(cfg.policy.encoder(), k)?;
    let layer = if let Some(path) = &cfg.policy.init_from {
        let ck = load_policy_weights(path)?;
        if ck.vocab_size != k || ck.encoder != cfg.policy.encoder() {
            return Err(Error::config(
                "policy.init_from",
                format!(
                    "{} was trained with a different vocabulary or encoder",
                    path.display()
                ),
            ));
        }
        LastLayer::from_row_major(k, d, ck.w)?
    } else if cfg.policy.init_std > 0.0 {
        let mut rng = RngStream::new(seed, INIT_STREAM);
        LastLayer::from_row_major(
            k,
            d,
            (0..k * d)
                .map(|_| cfg.policy.init_std * rng.normal())
                .collect(),
        )?
    } else {
        LastLayer::zeros(k, d)
    };
    Policy::new(
        encoder,
        layer,
        cfg.policy.effective_top_k(k),
        cfg.policy.temperature,
        cfg.policy.behavior_logprob,
    )
}

/// Reads the policy of a run checkpoint, or a bare policy checkpoint.
pub fn load_policy_weights(path: &Path) -> Result<PolicyCheckpoint> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let data = |e: serde_json::Error| Error::Data(format!("{}: {e}", path.display()));
    let mut value: serde_json::Value = serde_json::from_str(&text).map_err(data)?;
    if let Some(policy) = value.get_mut("policy") {
        value = policy.take();
    }
    serde_json::from_value(value).map_err(data)
}

/// In-memory training state for one seed.
#[derive(Debug, Clone)]
pub struct Trainer {
    cfg: RunConfig,
    seed: u64,
    policy: Policy,
    ref_policy: Option<Policy>,
    stepmodel: StepModelState,
    iteration: u64,
    enumerable: bool,
}

impl Trainer {
    pub fn new(cfg: &RunConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let policy = initial_policy(cfg, seed)?;
        let stepmodel = cfg
            .optimizer
            .step_model(cfg.env.vocab_size, cfg.policy.feature_dim);
        Self::assemble(cfg, seed, policy, stepmodel, 0)
    }

    fn assemble(
        cfg: &RunConfig,
        seed: u64,
        policy: Policy,
        stepmodel: StepModelState,
        iteration: u64,
    ) -> Result<Self> {
        let ref_policy = if cfg.objective.kl_beta > 0.0 {
            Some(initial_policy(cfg, seed)?)
        } else {
            None
        };
        let enumerable =
            cfg.run.eval_exact && cfg.env.enumeration_size() <= cfg.run.enumeration_budget;
        Ok(Trainer {
            cfg: cfg.clone(),
            seed,
            policy,
            ref_policy,
            stepmodel,
            iteration,
            enumerable,
        })
    }

    pub fn from_checkpoint(cfg: &RunConfig, ck: &RunCheckpoint) -> Result<Self> {
        cfg.validate()?;
        if ck.version != RUN_CHECKPOINT_VERSION {
            return Err(Error::Data(format!(
                "unsupported run checkpoint version {}",
                ck.version
            )));
        }
        let policy = Policy::from_checkpoint(&ck.policy)?;
        let fresh = initial_policy(cfg, ck.seed)?;
        if policy.encoder != fresh.encoder
            || policy.top_k != fresh.top_k
            || policy.temperature != fresh.temperature
        {
            return Err(Error::Data(
                "checkpoint policy does not match the configuration".into(),
            ));
        }
        ck.stepmodel.validate()?;
        Self::assemble(cfg, ck.seed, policy, ck.stepmodel.clone(), ck.iteration)
    }

    pub fn policy(&self) -> &Policy {
        &self.policy
    }

    pub fn stepmodel(&self) -> &StepModelState {
        &self.stepmodel
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn finished(&self) -> bool {
        self.iteration >= self.cfg.run.iterations
    }

    fn completions(&self, iteration: u64) -> u64 {
        iteration * (self.cfg.run.group_size * self.cfg.run.n_prompts) as u64
    }

    fn evaluate(&self) -> Result<(Option<f64>, Duration)> {
        if !self.enumerable {
            return Ok((None, Duration::ZERO));
        }
        let t = Instant::now();
        let j = exact_objective(&self.cfg.env, &self.policy, self.cfg.run.enumeration_budget)?;
        Ok((Some(j), t.elapsed()))
    }

    /// Record for the current policy without training (iteration 0).
    pub fn initial_record(&self) -> Result<(MetricsRecord, TimingRecord)> {
        let mut rec = MetricsRecord::empty(
            self.iteration,
            self.completions(self.iteration),
            self.cfg.optimizer.lr_at(0, self.cfg.run.iterations.max(1)),
        );
        let (j, eval) = self.evaluate()?;
        rec.exact_j = j;
        Ok((
            rec,
            TimingRecord::new(self.iteration, &PhaseTimes::default(), Duration::ZERO, eval),
        ))
    }

    pub fn checkpoint(&self, metrics_bytes: u64, timings_bytes: u64) -> RunCheckpoint {
        RunCheckpoint {
            version: RUN_CHECKPOINT_VERSION,
            seed: self.seed,
            iteration: self.iteration,
            policy: self.policy.to_checkpoint(),
            stepmodel: self.stepmodel.clone(),
            metrics_bytes,
            timings_bytes,
        }
    }

    /// One iteration: sample a batch, run `t_reuse` filtered updates on it.
    pub fn step(&mut self) -> Result<(MetricsRecord, TimingRecord)> {
        let cfg = &self.cfg;
        let it = self.iteration + 1;
        let lr = cfg.optimizer.lr_at(self.iteration, cfg.run.iterations);
        self.stepmodel.lr = lr;
        let mut times = PhaseTimes::default();
        let mut diagnostics = Duration::ZERO;

        let t = Instant::now();
        let batch = sample_group_batch(
            &cfg.env,
            &self.policy,
            cfg.run.group_size,
            cfg.run.n_prompts,
            self.seed,
            it * STREAM_STRIDE,
        )?;
        times.generation = t.elapsed();

        let mut rec = MetricsRecord::empty(it, self.completions(it), lr);
        rec.reward_mean = Some(batch.mean_reward());
        let thresholds = cfg.capo.thresholds();
        let mut rejected_tokens = 0usize;

        for pass in 0..cfg.run.t_reuse {
            let t = Instant::now();
            let terms = objective_terms(
                &batch,
                &self.policy,
                &cfg.objective,
                cfg.env.discount,
                self.ref_policy.as_ref(),
            )?;
            times.token_gradients += t.elapsed();
            rec.tokens += terms.n_tokens();
            rec.clipped_tokens += terms.clipped;

            let mask = if cfg.capo.enabled {
                let t = Instant::now();
                let subsets = partition(&batch, thresholds.granularity);
                times.mask += t.elapsed();
                let out = capo_filter(
                    &terms.factors,
                    &subsets,
                    &self.stepmodel,
                    &thresholds,
                    &mut times,
                )?;
                rejected_tokens += terms.n_tokens() - out.accepted_tokens();
                rec.subsets += out.records.len();
                for (k, v) in out.histogram() {
                    *rec.rejections.entry(k.to_string()).or_default() += v;
                }
                Some(out.mask)
            } else {
                None
            };

            let upd = aggregate_and_update(
                &terms,
                mask.as_deref(),
                &mut self.policy,
                &mut self.stepmodel,
                &mut times,
            )?;
            if upd.skipped {
                rec.skipped_updates += 1;
            }
            if pass == 0 {
                let t = Instant::now();
                if let (Some(step), Some(grad)) = (&upd.step, &upd.grad) {
                    let s = shift_estimate(&terms.factors, step);
                    rec.m_h = s.m_h;
                    rec.m_f = s.m_f;
                    rec.step_norm = step.norm;
                    rec.grad_norm = grad.norm();
                }
                diagnostics += t.elapsed();
            }
        }
        rec.rejection_rate = if rec.tokens == 0 {
            0.0
        } else {
            rejected_tokens as f64 / rec.tokens as f64
        };

        self.iteration = it;
        let (j, eval) = self.evaluate()?;
        rec.exact_j = j;
        Ok((rec, TimingRecord::new(it, &times, diagnostics, eval)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunCheckpoint {
    pub version: u32,
    pub seed: u64,
    pub iteration: u64,
    pub policy: PolicyCheckpoint,
    pub stepmodel: StepModelState,
    /// Lengths of the metric streams at this checkpoint; resuming truncates to them.
    pub metrics_bytes: u64,
    pub timings_bytes: u64,
}

/// Writes `bytes` to `path` through a temporary file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let write = || -> std::io::Result<()> {
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<RunCheckpoint> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

/// Reads a line-delimited JSON stream.
pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    BufReader::new(f)
        .lines()
        .enumerate()
        .map(|(i, line)| {
            let line = line.map_err(|e| Error::io(path, e))?;
            serde_json::from_str(&line)
                .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}

struct Sink {
    path: PathBuf,
    file: File,
}

impl Sink {
    fn open(path: PathBuf, truncate_to: Option<u64>) -> Result<Self> {
        let file = match truncate_to {
            None => File::create(&path),
            Some(len) => OpenOptions::new().write(true).open(&path).and_then(|f| {
                f.set_len(len)?;
                Ok(f)
            }),
        }
        .map_err(|e| Error::io(&path, e))?;
        let mut s = Sink { path, file };
        if truncate_to.is_some() {
            use std::io::Seek;
            s.file
                .seek(std::io::SeekFrom::End(0))
                .map_err(|e| Error::io(&s.path, e))?;
        }
        Ok(s)
    }

    fn emit<T: Serialize>(&mut self, record: &T) -> Result<()> {
        let mut line = serde_json::to_string(record).map_err(|e| Error::Data(e.to_string()))?;
        line.push('\n');
        self.file
            .write_all(line.as_bytes())
            .map_err(|e| Error::io(&self.path, e))?;
        self.file.flush().map_err(|e| Error::io(&self.path, e))
    }

    fn len(&self) -> Result<u64> {
        self.file
            .metadata()
            .map(|m| m.len())
            .map_err(|e| Error::io(&self.path, e))
    }
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub seed: u64,
    pub dir: PathBuf,
    pub records: Vec<MetricsRecord>,
    pub timings: Vec<TimingRecord>,
}

impl RunSummary {
    pub fn final_record(&self) -> &MetricsRecord {
        self.records
            .last()
            .expect("a run always has its initial record")
    }
}

pub fn seed_dir(root: &Path, seed: u64) -> PathBuf {
    root.join(format!("seed-{seed}"))
}

/// Trains one seed into `dir`. With `resume`, continues from the checkpoint
/// there if one exists and its resolved config matches.
pub fn train_seed(cfg: &RunConfig, seed: u64, dir: &Path, resume: bool) -> Result<RunSummary> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let resolved = cfg.to_toml()?;
    let config_path = dir.join(RESOLVED_CONFIG_FILE);
    let ck_path = dir.join(CHECKPOINT_FILE);

    let (mut trainer, mut metrics, mut timings) = if resume && ck_path.exists() {
        let previous = fs::read_to_string(&config_path).map_err(|e| Error::io(&config_path, e))?;
        if previous != resolved {
            return Err(Error::config(
                "resume",
                format!(
                    "{} differs from the requested config",
                    config_path.display()
                ),
            ));
        }
        let ck = load_checkpoint(&ck_path)?;
        if ck.seed != seed {
            return Err(Error::Data(format!(
                "checkpoint is for seed {}, not {seed}",
                ck.seed
            )));
        }
        let trainer = Trainer::from_checkpoint(cfg, &ck)?;
        let metrics = Sink::open(dir.join(METRICS_FILE), Some(ck.metrics_bytes))?;
        let timings = Sink::open(dir.join(TIMINGS_FILE), Some(ck.timings_bytes))?;
        (trainer, metrics, timings)
    } else {
        let trainer = Trainer::new(cfg, seed)?;
        write_atomic(&config_path, resolved.as_bytes())?;
        let mut metrics = Sink::open(dir.join(METRICS_FILE), None)?;
        let mut timings = Sink::open(dir.join(TIMINGS_FILE), None)?;
        let (rec, tim) = trainer.initial_record()?;
        metrics.emit(&rec)?;
        timings.emit(&tim)?;
        save_checkpoint(&trainer, &metrics, &timings, &ck_path)?;
        (trainer, metrics, timings)
    };

    while !trainer.finished() {
        let (rec, tim) = trainer.step()?;
        metrics.emit(&rec)?;
        timings.emit(&tim)?;
        let it = trainer.iteration();
        if it % cfg.run.checkpoint_every == 0 || trainer.finished() {
            save_checkpoint(&trainer, &metrics, &timings, &ck_path)?;
        }
    }

    Ok(RunSummary {
        seed,
        dir: dir.to_path_buf(),
        records: read_jsonl(&dir.join(METRICS_FILE))?,
        timings: read_jsonl(&dir.join(TIMINGS_FILE))?,
    })
}

fn save_checkpoint(trainer: &Trainer, metrics: &Sink, timings: &Sink, path: &Path) -> Result<()> {
    let ck = trainer.checkpoint(metrics.len()?, timings.len()?);
    let text = serde_json::to_string(&ck).map_err(|e| Error::Data(e.to_string()))?;
    write_atomic(path, text.as_bytes())
}

/// Trains every configured seed under `root`.
pub fn train_all(cfg: &RunConfig, root: &Path, resume: bool) -> Result<Vec<RunSummary>> {
    cfg.run
        .seeds
        .iter()
        .map(|&s| train_seed(cfg, s, &seed_dir(root, s), resume))
        .collect()
}
