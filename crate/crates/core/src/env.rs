//! Synthetic autoregressive token-generation tasks.
//!
//! A state is the prompt followed by the tokens generated so far; the
//! transition just appends the chosen token. Rewards are terminal and binary:
//! `reward_bound` when the completed answer verifies, zero otherwise.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{DenseVec, RngStream, SparseVec};

pub type Token = u32;

/// Default cap on `prompts * vocab^steps` for exact enumeration.
pub const DEFAULT_ENUMERATION_BUDGET: u64 = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskFamily {
    /// Reproduce the prompt token by token.
    Copy,
    /// Prompt is a bit string; answer with one token, its parity.
    Parity,
    /// Prompt is `a b`; answer with one token, `(a + b) mod K`.
    ModularSum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvSpec {
    pub family: TaskFamily,
    pub vocab_size: usize,
    pub horizon: usize,
    pub prompt_length: usize,
    #[serde(default = "default_reward_bound")]
    pub reward_bound: f64,
    #[serde(default = "default_discount")]
    pub discount: f64,
}

fn default_reward_bound() -> f64 {
    1.0
}

fn default_discount() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub next_state: Vec<Token>,
    pub reward: f64,
    pub done: bool,
}

impl EnvSpec {
    pub fn new(
        family: TaskFamily,
        vocab_size: usize,
        horizon: usize,
        prompt_length: usize,
    ) -> Self {
        EnvSpec {
            family,
            vocab_size,
            horizon,
            prompt_length,
            reward_bound: 1.0,
            discount: 1.0,
        }
    }

    pub fn with_discount(mut self, discount: f64) -> Self {
        self.discount = discount;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(Error::config("env.vocab_size", "must be >= 2"));
        }
        if self.vocab_size > u32::MAX as usize {
            return Err(Error::config("env.vocab_size", "exceeds the token range"));
        }
        if self.horizon < 1 {
            return Err(Error::config("env.horizon", "must be >= 1"));
        }
        if self.prompt_length < 1 {
            return Err(Error::config("env.prompt_length", "must be >= 1"));
        }
        if !(self.reward_bound > 0.0 && self.reward_bound.is_finite()) {
            return Err(Error::config(
                "env.reward_bound",
                "must be a positive finite number",
            ));
        }
        if !(0.0..=1.0).contains(&self.discount) {
            return Err(Error::config("env.discount", "must lie in [0, 1]"));
        }
        match self.family {
            TaskFamily::Parity if self.vocab_size < 3 => {
                return Err(Error::config(
                    "env.vocab_size",
                    "parity needs tokens 0 and 1 plus a separate pad token (K >= 3)",
                ))
            }
            TaskFamily::ModularSum if self.prompt_length != 2 => {
                return Err(Error::config(
                    "env.prompt_length",
                    "modular_sum prompts are `a b` (length 2)",
                ))
            }
            _ => {}
        }
        if self.horizon < self.answer_length() {
            return Err(Error::config(
                "env.horizon",
                format!(
                    "must be at least the answer length {}",
                    self.answer_length()
                ),
            ));
        }
        Ok(())
    }

    /// Token reserved for padding the feature window. Prompts never contain it.
    pub fn pad_token(&self) -> Token {
        (self.vocab_size - 1) as Token
    }

    pub fn answer_length(&self) -> usize {
        match self.family {
            TaskFamily::Copy => self.prompt_length,
            TaskFamily::Parity | TaskFamily::ModularSum => 1,
        }
    }

    /// Longest possible number of generated tokens.
    pub fn max_steps(&self) -> usize {
        self.answer_length().min(self.horizon)
    }

    fn prompt_alphabet(&self) -> usize {
        match self.family {
            TaskFamily::Parity => 2,
            TaskFamily::Copy | TaskFamily::ModularSum => self.vocab_size - 1,
        }
    }

    /// Number of distinct prompts; the initial distribution is uniform over them.
    pub fn prompt_count(&self) -> u64 {
        (self.prompt_alphabet() as u64).saturating_pow(self.prompt_length as u32)
    }

    /// All prompts in lexicographic order.
    pub fn all_prompts(&self) -> Vec<Vec<Token>> {
        let base = self.prompt_alphabet();
        let n = self.prompt_count() as usize;
        (0..n)
            .map(|mut code| {
                let mut p = vec![0; self.prompt_length];
                for slot in p.iter_mut().rev() {
                    *slot = (code % base) as Token;
                    code /= base;
                }
                p
            })
            .collect()
    }

    /// Draws a prompt from the uniform initial distribution.
    pub fn reset(&self, rng: &mut RngStream) -> Vec<Token> {
        let base = self.prompt_alphabet();
        (0..self.prompt_length)
            .map(|_| rng.below(base) as Token)
            .collect()
    }

    pub fn generated<'a>(&self, state: &'a [Token]) -> &'a [Token] {
        &state[self.prompt_length.min(state.len())..]
    }

    /// Appends `action` to `state` and scores the answer if it is complete.
    pub fn step(&self, state: &[Token], action: Token) -> Result<Transition> {
        if action as usize >= self.vocab_size {
            return Err(Error::rejected(format!(
                "action {action} outside vocabulary of size {}",
                self.vocab_size
            )));
        }
        if state.len() < self.prompt_length || state.len() >= self.prompt_length + self.horizon {
            return Err(Error::rejected(format!(
                "state length {} outside [{}, {})",
                state.len(),
                self.prompt_length,
                self.prompt_length + self.horizon
            )));
        }
        let mut next_state = Vec::with_capacity(state.len() + 1);
        next_state.extend_from_slice(state);
        next_state.push(action);
        let answer = self.generated(&next_state);
        let done = answer.len() >= self.answer_length() || answer.len() >= self.horizon;
        let reward = if done && self.verify(&next_state[..self.prompt_length], answer) {
            self.reward_bound
        } else {
            0.0
        };
        Ok(Transition {
            next_state,
            reward,
            done,
        })
    }

    /// True when `answer` solves `prompt`.
    pub fn verify(&self, prompt: &[Token], answer: &[Token]) -> bool {
        match self.family {
            TaskFamily::Copy => answer == prompt,
            TaskFamily::Parity => {
                let parity = prompt.iter().map(|&t| t as usize).sum::<usize>() % 2;
                answer.len() == 1 && answer[0] as usize == parity
            }
            TaskFamily::ModularSum => {
                let target = (prompt[0] as usize + prompt[1] as usize) % self.vocab_size;
                answer.len() == 1 && answer[0] as usize == target
            }
        }
    }

    /// The unique rewarded answer for `prompt`.
    pub fn correct_answer(&self, prompt: &[Token]) -> Vec<Token> {
        match self.family {
            TaskFamily::Copy => prompt.to_vec(),
            TaskFamily::Parity => {
                vec![(prompt.iter().map(|&t| t as usize).sum::<usize>() % 2) as Token]
            }
            TaskFamily::ModularSum => {
                vec![((prompt[0] as usize + prompt[1] as usize) % self.vocab_size) as Token]
            }
        }
    }

    pub fn enumeration_size(&self) -> u64 {
        self.prompt_count()
            .saturating_mul((self.vocab_size as u64).saturating_pow(self.max_steps() as u32))
    }
}

/// Anything that can report a full next-token distribution for a state.
pub trait ActionModel {
    fn vocab_size(&self) -> usize;
    fn action_probs(&self, state: &[Token]) -> Vec<f64>;
}

/// Exact expected discounted return, by enumerating every prompt and every
/// action sequence.
pub fn exact_objective(spec: &EnvSpec, policy: &impl ActionModel, budget: u64) -> Result<f64> {
    spec.validate()?;
    let size = spec.enumeration_size();
    if size > budget {
        return Err(Error::Resource(format!(
            "exact enumeration needs {size} paths, budget is {budget}"
        )));
    }
    let prompts = spec.all_prompts();
    let weight = 1.0 / prompts.len() as f64;
    let mut total = 0.0;
    for prompt in &prompts {
        total += weight * subtree_value(spec, policy, prompt, 0)?;
    }
    Ok(total)
}

// Expected discounted return from `state`, where `t` steps have been taken.
fn subtree_value(
    spec: &EnvSpec,
    policy: &impl ActionModel,
    state: &[Token],
    t: usize,
) -> Result<f64> {
    let probs = policy.action_probs(state);
    let discount = spec.discount.powi(t as i32);
    let mut value = 0.0;
    for (a, &p) in probs.iter().enumerate() {
        if p == 0.0 {
            continue;
        }
        let tr = spec.step(state, a as Token)?;
        let mut v = discount * tr.reward;
        if !tr.done {
            v += subtree_value(spec, policy, &tr.next_state, t + 1)?;
        }
        value += p * v;
    }
    Ok(value)
}

/// What a sampler reports for one generated token.
#[derive(Debug, Clone)]
pub struct SampledStep {
    pub action: Token,
    pub features: Arc<DenseVec>,
    /// Temperature-1 probabilities on the top-k support (not renormalized).
    pub topk_probs: SparseVec,
    /// Log-probability of `action` under the behavior (sampling) policy.
    pub logprob_behavior: f64,
    /// True when the top-k support is the whole vocabulary.
    pub full_support: bool,
}

pub trait StepSampler {
    fn sample_step(&self, state: &[Token], rng: &mut RngStream) -> Result<SampledStep>;
}

#[derive(Debug, Clone)]
pub struct StepRecord {
    pub action: Token,
    pub reward: f64,
    pub features: Arc<DenseVec>,
    pub topk_probs: SparseVec,
    pub logprob_behavior: f64,
    pub full_support: bool,
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub prompt: Vec<Token>,
    pub steps: Vec<StepRecord>,
    pub group_id: usize,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn actions(&self) -> Vec<Token> {
        self.steps.iter().map(|s| s.action).collect()
    }

    /// Discounted return from step 0.
    pub fn discounted_return(&self, gamma: f64) -> f64 {
        self.steps
            .iter()
            .enumerate()
            .map(|(t, s)| gamma.powi(t as i32) * s.reward)
            .sum()
    }

    /// Discounted reward-to-go from each step.
    pub fn returns_to_go(&self, gamma: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.steps.len()];
        let mut acc = 0.0;
        for (t, s) in self.steps.iter().enumerate().rev() {
            acc = s.reward + gamma * acc;
            out[t] = acc;
        }
        out
    }

    pub fn total_reward(&self) -> f64 {
        self.steps.iter().map(|s| s.reward).sum()
    }
}

#[derive(Debug, Clone)]
pub struct Group {
    pub prompt: Vec<Token>,
    pub trajectories: Vec<Trajectory>,
}

#[derive(Debug, Clone)]
pub struct GroupBatch {
    pub groups: Vec<Group>,
    pub group_size: usize,
}

impl GroupBatch {
    pub fn trajectories(&self) -> impl Iterator<Item = &Trajectory> + '_ {
        self.groups.iter().flat_map(|g| g.trajectories.iter())
    }

    pub fn n_trajectories(&self) -> usize {
        self.groups.iter().map(|g| g.trajectories.len()).sum()
    }

    pub fn n_tokens(&self) -> usize {
        self.trajectories().map(Trajectory::len).sum()
    }

    pub fn mean_reward(&self) -> f64 {
        let n = self.n_trajectories();
        if n == 0 {
            return 0.0;
        }
        self.trajectories()
            .map(Trajectory::total_reward)
            .sum::<f64>()
            / n as f64
    }
}

/// Samples one complete trajectory from `prompt`.
pub fn rollout(
    spec: &EnvSpec,
    sampler: &impl StepSampler,
    prompt: &[Token],
    group_id: usize,
    rng: &mut RngStream,
) -> Result<Trajectory> {
    let mut state = prompt.to_vec();
    let mut steps = Vec::with_capacity(spec.max_steps());
    loop {
        let s = sampler.sample_step(&state, rng)?;
        let tr = spec.step(&state, s.action)?;
        steps.push(StepRecord {
            action: s.action,
            reward: tr.reward,
            features: s.features,
            topk_probs: s.topk_probs,
            logprob_behavior: s.logprob_behavior,
            full_support: s.full_support,
        });
        state = tr.next_state;
        if tr.done {
            break;
        }
    }
    Ok(Trajectory {
        prompt: prompt.to_vec(),
        steps,
        group_id,
    })
}

/// Samples `n_prompts` groups of `group_size` trajectories. Group `i` draws
/// its prompt and all its trajectories from `RngStream::new(seed, stream_base + i)`,
/// so groups are independent of each other and of evaluation order.
pub fn sample_group_batch(
    spec: &EnvSpec,
    sampler: &impl StepSampler,
    group_size: usize,
    n_prompts: usize,
    seed: u64,
    stream_base: u64,
) -> Result<GroupBatch> {
    if group_size < 2 {
        return Err(Error::rejected("group size must be >= 2"));
    }
    let groups = (0..n_prompts)
        .map(|gi| {
            let mut rng = RngStream::new(seed, stream_base + gi as u64);
            let prompt = spec.reset(&mut rng);
            let trajectories = (0..group_size)
                .map(|_| rollout(spec, sampler, &prompt, gi, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            Ok(Group {
                prompt,
                trajectories,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(GroupBatch { groups, group_size })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Table policy over the vocabulary: probabilities depend on the state
    /// through a cheap hash so different states see different distributions.
    struct HashedPolicy {
        k: usize,
        salt: u64,
    }

    impl ActionModel for HashedPolicy {
        fn vocab_size(&self) -> usize {
            self.k
        }

        fn action_probs(&self, state: &[Token]) -> Vec<f64> {
            let mut h = self.salt;
            for &t in state {
                h = h
                    .wrapping_mul(6364136223846793005)
                    .wrapping_add(t as u64 + 1);
            }
            let raw: Vec<f64> = (0..self.k)
                .map(|a| 1.0 + ((h >> (a * 5 % 60)) & 0xf) as f64)
                .collect();
            let z: f64 = raw.iter().sum();
            raw.into_iter().map(|r| r / z).collect()
        }
    }

    impl StepSampler for HashedPolicy {
        fn sample_step(&self, state: &[Token], rng: &mut RngStream) -> Result<SampledStep> {
            let probs = self.action_probs(state);
            let a = rng.draw_categorical(&probs)?;
            Ok(SampledStep {
                action: a as Token,
                features: Arc::new(DenseVec::zeros(1)),
                topk_probs: SparseVec::from_dense(&probs)?,
                logprob_behavior: probs[a].ln(),
                full_support: true,
            })
        }
    }

    struct Fixed(Vec<f64>);

    impl ActionModel for Fixed {
        fn vocab_size(&self) -> usize {
            self.0.len()
        }

        fn action_probs(&self, _: &[Token]) -> Vec<f64> {
            self.0.clone()
        }
    }

    /// All mass on the correct next token (or on one wrong token).
    struct Oracle {
        spec: EnvSpec,
        correct: bool,
    }

    impl ActionModel for Oracle {
        fn vocab_size(&self) -> usize {
            self.spec.vocab_size
        }

        fn action_probs(&self, state: &[Token]) -> Vec<f64> {
            let prompt = &state[..self.spec.prompt_length];
            let answer = self.spec.correct_answer(prompt);
            let pos = state.len() - self.spec.prompt_length;
            let mut target = answer[pos] as usize;
            if !self.correct {
                target = (target + 1) % self.spec.vocab_size;
            }
            let mut p = vec![0.0; self.spec.vocab_size];
            p[target] = 1.0;
            p
        }
    }

    #[test]
    fn reset_examples() {
        let spec = EnvSpec::new(TaskFamily::Copy, 4, 3, 3);
        let mut rng = RngStream::new(3, 0);
        let p = spec.reset(&mut rng);
        assert_eq!(p.len(), 3);
        assert!(p.iter().all(|&t| t < 4 && t != spec.pad_token()));
        assert_eq!(p, spec.reset(&mut RngStream::new(3, 0)));

        let ms = EnvSpec::new(TaskFamily::ModularSum, 10, 1, 2);
        let p = ms.reset(&mut rng);
        assert_eq!(p.len(), 2);
        assert!(p.iter().all(|&t| t < 10));
    }

    #[test]
    fn step_examples() {
        let spec = EnvSpec::new(TaskFamily::Copy, 4, 2, 2);
        let tr = spec.step(&[2, 1, 2], 1).unwrap();
        assert_eq!((tr.reward, tr.done), (1.0, true));
        assert_eq!(tr.next_state, vec![2, 1, 2, 1]);
        let tr = spec.step(&[2, 1, 2], 0).unwrap();
        assert_eq!((tr.reward, tr.done), (0.0, true));
        let tr = spec.step(&[2, 1], 2).unwrap();
        assert_eq!((tr.reward, tr.done), (0.0, false));

        let parity = EnvSpec::new(TaskFamily::Parity, 3, 1, 2);
        let tr = parity.step(&[1, 1], 0).unwrap();
        assert_eq!((tr.reward, tr.done), (1.0, true));
        assert_eq!(parity.step(&[1, 0], 0).unwrap().reward, 0.0);

        let ms = EnvSpec::new(TaskFamily::ModularSum, 5, 1, 2);
        assert_eq!(ms.step(&[3, 4], 2).unwrap().reward, 1.0);
        assert_eq!(ms.step(&[3, 4], 1).unwrap().reward, 0.0);
    }

    #[test]
    fn step_rejects_bad_inputs() {
        let spec = EnvSpec::new(TaskFamily::Copy, 4, 2, 2);
        assert!(matches!(
            spec.step(&[1, 1], 4),
            Err(Error::RejectedInput(_))
        ));
        assert!(spec.step(&[1, 1, 0, 0], 0).is_err());
        assert!(spec.step(&[1], 0).is_err());
    }

    #[test]
    fn validation() {
        assert!(EnvSpec::new(TaskFamily::Copy, 1, 2, 2).validate().is_err());
        assert!(EnvSpec::new(TaskFamily::Copy, 4, 1, 2).validate().is_err());
        assert!(EnvSpec::new(TaskFamily::Parity, 2, 1, 2)
            .validate()
            .is_err());
        assert!(EnvSpec::new(TaskFamily::ModularSum, 5, 1, 3)
            .validate()
            .is_err());
        assert!(EnvSpec::new(TaskFamily::Copy, 4, 3, 2)
            .with_discount(1.5)
            .validate()
            .is_err());
        assert!(EnvSpec::new(TaskFamily::Copy, 4, 3, 2).validate().is_ok());
    }

    #[test]
    fn exact_objective_examples() {
        let spec = EnvSpec::new(TaskFamily::Copy, 2, 1, 1);
        let j = exact_objective(&spec, &Fixed(vec![0.5, 0.5]), DEFAULT_ENUMERATION_BUDGET).unwrap();
        assert_eq!(j, 0.5);

        for family in [TaskFamily::Copy, TaskFamily::Parity, TaskFamily::ModularSum] {
            let plen = if family == TaskFamily::ModularSum {
                2
            } else {
                3
            };
            let spec = EnvSpec::new(family, 4, 3, plen);
            let good = Oracle {
                spec: spec.clone(),
                correct: true,
            };
            let bad = Oracle {
                spec: spec.clone(),
                correct: false,
            };
            let j = exact_objective(&spec, &good, DEFAULT_ENUMERATION_BUDGET).unwrap();
            assert!((j - 1.0).abs() < 1e-12, "{family:?}: {j}");
            assert_eq!(
                exact_objective(&spec, &bad, DEFAULT_ENUMERATION_BUDGET).unwrap(),
                0.0
            );
        }
    }

    #[test]
    fn exact_objective_discounts_late_rewards() {
        let spec = EnvSpec::new(TaskFamily::Copy, 3, 2, 2).with_discount(0.5);
        let good = Oracle {
            spec: spec.clone(),
            correct: true,
        };
        // reward lands on the second generated token, t = 1
        assert_eq!(exact_objective(&spec, &good, 1_000).unwrap(), 0.5);
    }

    #[test]
    fn exact_objective_budget() {
        let spec = EnvSpec::new(TaskFamily::Copy, 8, 4, 4);
        let err =
            exact_objective(&spec, &Fixed(vec![0.125; 8]), DEFAULT_ENUMERATION_BUDGET).unwrap_err();
        assert!(matches!(err, Error::Resource(_)));
    }

    #[test]
    fn monte_carlo_matches_exact_objective() {
        let n = 10_000;
        for (family, k, t, plen) in [
            (TaskFamily::Copy, 3, 2, 2),
            (TaskFamily::Parity, 3, 1, 3),
            (TaskFamily::ModularSum, 4, 1, 2),
        ] {
            let spec = EnvSpec::new(family, k, t, plen).with_discount(0.9);
            let policy = HashedPolicy { k, salt: 17 };
            let exact = exact_objective(&spec, &policy, DEFAULT_ENUMERATION_BUDGET).unwrap();
            let mut rng = RngStream::new(11, 0);
            let returns: Vec<f64> = (0..n)
                .map(|_| {
                    let prompt = spec.reset(&mut rng);
                    rollout(&spec, &policy, &prompt, 0, &mut rng)
                        .unwrap()
                        .discounted_return(spec.discount)
                })
                .collect();
            let mean = returns.iter().sum::<f64>() / n as f64;
            let var = returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            let tol = 3.0 * var.sqrt() / (n as f64).sqrt();
            assert!(
                (mean - exact).abs() <= tol,
                "{family:?}: MC {mean} vs exact {exact} (tol {tol})"
            );
        }
    }

    #[test]
    fn group_batch_shapes_and_invariants() {
        let spec = EnvSpec::new(TaskFamily::Copy, 5, 3, 3);
        let policy = HashedPolicy { k: 5, salt: 3 };
        let batch = sample_group_batch(&spec, &policy, 8, 12, 1, 0).unwrap();
        assert_eq!(batch.n_trajectories(), 96);
        for g in &batch.groups {
            assert_eq!(g.trajectories.len(), 8);
            for tr in &g.trajectories {
                assert_eq!(tr.prompt, g.prompt);
                assert!(tr.len() <= spec.horizon);
                assert!(tr
                    .steps
                    .iter()
                    .all(|s| (0.0..=spec.reward_bound).contains(&s.reward)));
                assert!(tr.steps.iter().all(|s| s.topk_probs.sum() <= 1.0 + 1e-9));
            }
        }
        let small = sample_group_batch(&spec, &policy, 2, 1, 1, 0).unwrap();
        assert_eq!(small.n_trajectories(), 2);
        assert!(sample_group_batch(&spec, &policy, 1, 1, 1, 0).is_err());
    }

    #[test]
    fn deterministic_policy_gives_identical_group_members() {
        struct Det(EnvSpec);
        impl StepSampler for Det {
            fn sample_step(&self, state: &[Token], rng: &mut RngStream) -> Result<SampledStep> {
                let o = Oracle {
                    spec: self.0.clone(),
                    correct: true,
                };
                let p = o.action_probs(state);
                let a = rng.draw_categorical(&p)?;
                Ok(SampledStep {
                    action: a as Token,
                    features: Arc::new(DenseVec::zeros(1)),
                    topk_probs: SparseVec::from_dense(&p)?,
                    logprob_behavior: 0.0,
                    full_support: true,
                })
            }
        }
        let spec = EnvSpec::new(TaskFamily::Copy, 4, 3, 3);
        let batch = sample_group_batch(&spec, &Det(spec.clone()), 4, 3, 9, 0).unwrap();
        for g in &batch.groups {
            let first = g.trajectories[0].actions();
            assert!(g.trajectories.iter().all(|t| t.actions() == first));
        }
    }

    #[test]
    fn returns_to_go() {
        let spec = EnvSpec::new(TaskFamily::Copy, 3, 2, 2);
        let policy = HashedPolicy { k: 3, salt: 1 };
        let mut rng = RngStream::new(0, 0);
        let mut tr = rollout(&spec, &policy, &[0, 1], 0, &mut rng).unwrap();
        tr.steps.last_mut().unwrap().reward = 1.0;
        let g = tr.returns_to_go(0.5);
        assert_eq!(g, vec![0.5, 1.0]);
        assert_eq!(tr.discounted_return(0.5), 0.5);
    }
}
