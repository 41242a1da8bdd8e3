//! Softmax policy `pi(a|s) = softmax(W h(s))` over a fixed random feature
//! encoder. Only the last layer `W` (K x d, row-major) is trainable, so its
//! gradient and curvature formulas are exact rather than approximations.

use std::cmp::Ordering;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::env::{ActionModel, SampledStep, StepSampler, Token};
use crate::error::{Error, Result};
use crate::numerics::{DenseVec, RngStream, RowSparse, SparseVec};

pub const CHECKPOINT_VERSION: u32 = 1;

/// Stream id reserved for drawing the encoder's embedding matrix.
const ENCODER_STREAM: u64 = u64::MAX - 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Nonlinearity {
    #[default]
    Tanh,
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    /// Number of trailing tokens the encoder sees.
    pub window: usize,
    pub feature_dim: usize,
    #[serde(default)]
    pub nonlinearity: Nonlinearity,
    pub seed: u64,
    /// Standard deviation of the embedding entries. Defaults to `1/sqrt(window)`.
    #[serde(default)]
    pub scale: Option<f64>,
}

/// Fixed map from the one-hot encoded last-`window` tokens to `R^d`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureEncoder {
    config: EncoderConfig,
    vocab_size: usize,
    // d x (window * K), row-major
    embed: Vec<f64>,
}

impl FeatureEncoder {
    pub fn new(config: EncoderConfig, vocab_size: usize) -> Result<Self> {
        if config.window == 0 {
            return Err(Error::config("policy.encoder.window", "must be >= 1"));
        }
        if config.feature_dim == 0 {
            return Err(Error::config("policy.encoder.feature_dim", "must be >= 1"));
        }
        let scale = config.scale.unwrap_or(1.0 / (config.window as f64).sqrt());
        if !(scale.is_finite() && scale >= 0.0) {
            return Err(Error::config(
                "policy.encoder.scale",
                "must be finite and >= 0",
            ));
        }
        let mut rng = RngStream::new(config.seed, ENCODER_STREAM);
        let n = config.feature_dim * config.window * vocab_size;
        let embed = (0..n).map(|_| scale * rng.normal()).collect();
        Ok(FeatureEncoder {
            config,
            vocab_size,
            embed,
        })
    }

    /// Builds an encoder from an explicit `d x (window * K)` row-major matrix.
    pub fn from_matrix(config: EncoderConfig, vocab_size: usize, embed: Vec<f64>) -> Result<Self> {
        if embed.len() != config.feature_dim * config.window * vocab_size {
            return Err(Error::rejected("embedding matrix has the wrong size"));
        }
        if embed.iter().any(|x| !x.is_finite()) {
            return Err(Error::rejected("embedding matrix has non-finite entries"));
        }
        Ok(FeatureEncoder {
            config,
            vocab_size,
            embed,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim
    }

    pub fn pad_token(&self) -> Token {
        (self.vocab_size - 1) as Token
    }

    /// Features of the last `window` tokens; missing positions read as the pad token.
    pub fn encode(&self, state: &[Token]) -> DenseVec {
        let n = self.config.window;
        let k = self.vocab_size;
        let cols = n * k;
        let missing = n.saturating_sub(state.len());
        let tail = &state[state.len().saturating_sub(n)..];
        let window = std::iter::repeat_n(self.pad_token(), missing).chain(tail.iter().copied());
        let active: Vec<usize> = window
            .enumerate()
            .map(|(pos, tok)| pos * k + (tok as usize).min(k - 1))
            .collect();
        let h = (0..self.config.feature_dim)
            .map(|i| {
                let row = &self.embed[i * cols..(i + 1) * cols];
                let pre: f64 = active.iter().map(|&c| row[c]).sum();
                match self.config.nonlinearity {
                    Nonlinearity::Tanh => pre.tanh(),
                    Nonlinearity::Identity => pre,
                }
            })
            .collect();
        DenseVec::new(h).expect("finite embedding gives finite features")
    }
}

/// The trainable matrix `W`, stored row-major so `psi[row * d + col] = W[row][col]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LastLayer {
    vocab_size: usize,
    feature_dim: usize,
    w: Vec<f64>,
}

impl LastLayer {
    pub fn zeros(vocab_size: usize, feature_dim: usize) -> Self {
        LastLayer {
            vocab_size,
            feature_dim,
            w: vec![0.0; vocab_size * feature_dim],
        }
    }

    pub fn from_row_major(vocab_size: usize, feature_dim: usize, w: Vec<f64>) -> Result<Self> {
        if w.len() != vocab_size * feature_dim {
            return Err(Error::rejected(format!(
                "expected {} weights, got {}",
                vocab_size * feature_dim,
                w.len()
            )));
        }
        if w.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numerical("non-finite weight".into()));
        }
        Ok(LastLayer {
            vocab_size,
            feature_dim,
            w,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    /// `psi = vec(W)` in row-major order.
    pub fn as_slice(&self) -> &[f64] {
        &self.w
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.w[r * self.feature_dim..(r + 1) * self.feature_dim]
    }

    pub fn logits(&self, h: &[f64]) -> Vec<f64> {
        (0..self.vocab_size)
            .map(|r| self.row(r).iter().zip(h).map(|(w, x)| w * x).sum())
            .collect()
    }

    /// Log-probability of `action` under the temperature-1 softmax.
    pub fn log_prob(&self, h: &[f64], action: Token) -> Result<f64> {
        let a = action as usize;
        if a >= self.vocab_size {
            return Err(Error::rejected(format!("action {a} outside vocabulary")));
        }
        let logits = self.logits(h);
        Ok(logits[a] - log_sum_exp(&logits)?)
    }

    /// `W + scale * delta`. Rows absent from `delta` are copied unchanged.
    pub fn apply_update(&self, delta: &RowSparse, scale: f64) -> Result<LastLayer> {
        let mut out = self.clone();
        out.apply_update_in_place(delta, scale)?;
        Ok(out)
    }

    pub fn apply_update_in_place(&mut self, delta: &RowSparse, scale: f64) -> Result<()> {
        if delta.n_rows() != self.vocab_size || delta.n_cols() != self.feature_dim {
            return Err(Error::rejected(format!(
                "update shape {}x{} does not match layer {}x{}",
                delta.n_rows(),
                delta.n_cols(),
                self.vocab_size,
                self.feature_dim
            )));
        }
        if scale == 0.0 {
            return Ok(());
        }
        let d = self.feature_dim;
        for (r, vals) in delta.iter() {
            for (w, v) in self.w[r * d..(r + 1) * d].iter_mut().zip(vals) {
                *w += scale * v;
            }
        }
        if self.w.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numerical(
                "update produced non-finite weights".into(),
            ));
        }
        Ok(())
    }
}

fn log_sum_exp(logits: &[f64]) -> Result<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() || logits.iter().any(|l| !l.is_finite()) {
        return Err(Error::Numerical("non-finite logits".into()));
    }
    Ok(max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln())
}

/// Full softmax plus its top-k truncation.
#[derive(Debug, Clone)]
pub struct ActionDistribution {
    pub logits: Vec<f64>,
    pub full: DenseVec,
    /// The `top_k` largest temperature-1 probabilities, not renormalized.
    pub topk: SparseVec,
}

impl ActionDistribution {
    /// Sampling distribution on the top-k support: `exp(logit / temperature)`
    /// renormalized over the support. Returned in index order.
    pub fn sampling_probs(&self, temperature: f64) -> (Vec<usize>, Vec<f64>) {
        let support = self.topk.indices().to_vec();
        let scaled: Vec<f64> = support
            .iter()
            .map(|&a| self.logits[a] / temperature)
            .collect();
        let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = scaled.iter().map(|x| (x - max).exp()).collect();
        let z: f64 = e.iter().sum();
        (support, e.into_iter().map(|x| x / z).collect())
    }

    /// Log-probability of `action` under the sampling distribution; `-inf` off support.
    pub fn sampling_log_prob(&self, action: usize, temperature: f64) -> f64 {
        let support = self.topk.indices();
        if support.binary_search(&action).is_err() {
            return f64::NEG_INFINITY;
        }
        let scaled: Vec<f64> = support
            .iter()
            .map(|&a| self.logits[a] / temperature)
            .collect();
        let lse = log_sum_exp(&scaled).expect("logits already checked finite");
        self.logits[action] / temperature - lse
    }
}

/// Softmax of `W h`, stabilized by subtracting the max logit, plus the
/// `top_k` largest entries. Ties keep the lower token index.
pub fn action_distribution(
    layer: &LastLayer,
    h: &[f64],
    top_k: usize,
) -> Result<ActionDistribution> {
    let k = layer.vocab_size();
    if top_k == 0 || top_k > k {
        return Err(Error::rejected(format!("top_k {top_k} outside [1, {k}]")));
    }
    if h.len() != layer.feature_dim() {
        return Err(Error::rejected("feature length does not match layer"));
    }
    let logits = layer.logits(h);
    let lse = log_sum_exp(&logits)?;
    let full: Vec<f64> = logits.iter().map(|l| (l - lse).exp()).collect();
    let support: Vec<usize> = if top_k == k {
        (0..k).collect()
    } else {
        let mut idx: Vec<usize> = (0..k).collect();
        let order =
            |a: &usize, b: &usize| -> Ordering { logits[*b].total_cmp(&logits[*a]).then(a.cmp(b)) };
        idx.select_nth_unstable_by(top_k - 1, order);
        idx.truncate(top_k);
        idx.sort_unstable();
        idx
    };
    // Probabilities can underflow to exactly zero; keep the entry anyway so
    // the support is always `top_k` wide.
    let topk = SparseVec::new(k, support.iter().map(|&a| (a, full[a])))?;
    Ok(ActionDistribution {
        logits,
        full: DenseVec::new(full)?,
        topk,
    })
}

/// How behavior log-probabilities (the denominator of the clipping ratio) are recorded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BehaviorLogprob {
    /// Log of the renormalized top-k sampling probability at the sampling temperature.
    #[default]
    TopK,
    /// Log of the untruncated temperature-1 model probability.
    Full,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    pub encoder: FeatureEncoder,
    pub layer: LastLayer,
    pub top_k: usize,
    pub temperature: f64,
    pub behavior_logprob: BehaviorLogprob,
}

impl Policy {
    pub fn new(
        encoder: FeatureEncoder,
        layer: LastLayer,
        top_k: usize,
        temperature: f64,
        behavior_logprob: BehaviorLogprob,
    ) -> Result<Self> {
        if layer.vocab_size() != encoder.vocab_size || layer.feature_dim() != encoder.feature_dim()
        {
            return Err(Error::rejected("encoder and last layer disagree on shape"));
        }
        if top_k == 0 || top_k > layer.vocab_size() {
            return Err(Error::config(
                "policy.top_k",
                format!("must lie in [1, {}]", layer.vocab_size()),
            ));
        }
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::config("policy.temperature", "must be positive"));
        }
        Ok(Policy {
            encoder,
            layer,
            top_k,
            temperature,
            behavior_logprob,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.layer.vocab_size()
    }

    pub fn feature_dim(&self) -> usize {
        self.layer.feature_dim()
    }

    pub fn distribution(&self, h: &[f64]) -> Result<ActionDistribution> {
        action_distribution(&self.layer, h, self.top_k)
    }

    /// Log-probability used in the clipping ratio, recomputed from stored features.
    pub fn ratio_log_prob(&self, h: &[f64], action: Token) -> Result<f64> {
        match self.behavior_logprob {
            BehaviorLogprob::Full => self.layer.log_prob(h, action),
            BehaviorLogprob::TopK => Ok(self
                .distribution(h)?
                .sampling_log_prob(action as usize, self.temperature)),
        }
    }

    pub fn to_checkpoint(&self) -> PolicyCheckpoint {
        PolicyCheckpoint {
            version: CHECKPOINT_VERSION,
            vocab_size: self.vocab_size(),
            feature_dim: self.feature_dim(),
            encoder: self.encoder.config().clone(),
            top_k: self.top_k,
            temperature: self.temperature,
            behavior_logprob: self.behavior_logprob,
            w: self.layer.as_slice().to_vec(),
        }
    }

    pub fn from_checkpoint(ck: &PolicyCheckpoint) -> Result<Self> {
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Data(format!(
                "unsupported checkpoint version {}",
                ck.version
            )));
        }
        if ck.encoder.feature_dim != ck.feature_dim {
            return Err(Error::Data(
                "checkpoint feature_dim disagrees with encoder".into(),
            ));
        }
        let encoder = FeatureEncoder::new(ck.encoder.clone(), ck.vocab_size)?;
        let layer = LastLayer::from_row_major(ck.vocab_size, ck.feature_dim, ck.w.clone())?;
        Policy::new(
            encoder,
            layer,
            ck.top_k,
            ck.temperature,
            ck.behavior_logprob,
        )
    }
}

impl StepSampler for Policy {
    fn sample_step(&self, state: &[Token], rng: &mut RngStream) -> Result<SampledStep> {
        let h = self.encoder.encode(state);
        let dist = self.distribution(h.as_slice())?;
        let (support, probs) = dist.sampling_probs(self.temperature);
        let j = rng.draw_categorical(&probs)?;
        let action = support[j];
        // Same arithmetic as `ratio_log_prob`, so the first-pass ratio is exactly 1.
        let logprob_behavior = match self.behavior_logprob {
            BehaviorLogprob::TopK => dist.sampling_log_prob(action, self.temperature),
            BehaviorLogprob::Full => self.layer.log_prob(h.as_slice(), action as Token)?,
        };
        Ok(SampledStep {
            action: action as Token,
            features: Arc::new(h),
            full_support: self.top_k == self.vocab_size(),
            topk_probs: dist.topk,
            logprob_behavior,
        })
    }
}

/// Reports the untruncated temperature-1 model distribution.
impl ActionModel for Policy {
    fn vocab_size(&self) -> usize {
        self.layer.vocab_size()
    }

    fn action_probs(&self, state: &[Token]) -> Vec<f64> {
        let h = self.encoder.encode(state);
        let logits = self.layer.logits(h.as_slice());
        let lse = log_sum_exp(&logits).expect("finite weights give finite logits");
        logits.iter().map(|l| (l - lse).exp()).collect()
    }
}

/// Serialized policy: shapes, encoder configuration (the embedding is
/// regenerated from its seed) and row-major `W`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyCheckpoint {
    pub version: u32,
    pub vocab_size: usize,
    pub feature_dim: usize,
    pub encoder: EncoderConfig,
    pub top_k: usize,
    pub temperature: f64,
    pub behavior_logprob: BehaviorLogprob,
    pub w: Vec<f64>,
}
