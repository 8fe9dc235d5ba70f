//! Synthetic question-answering world with confidence emission as an MDP.
//!
//! Each question carries a latent probability `p_star` that the (already
//! generated) answer is correct. The agent sees only a quantized, optionally
//! noisy view of `p_star` and then emits confidence tokens. The answer's
//! correctness is sampled when the question is drawn and is never touched by
//! the confidence actions, so answering and confidence estimation stay
//! separate.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF};
use thiserror::Error;

use crate::reward::{normalized_reward, out_of_format_reward, ConfidenceLevel, RewardSpec, MAX_LEVEL};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EnvError {
    #[error("episode already terminated")]
    Terminated,
    #[error("action {0:?} is not available in {1:?} mode")]
    ActionNotAllowed(Action, ConfidenceMode),
    #[error("invalid world spec: {0}")]
    InvalidWorld(String),
}

/// Distribution of the latent correctness probability.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Prior {
    Beta { alpha: f64, beta: f64 },
    Uniform,
    Point { p: f64 },
}

impl Default for Prior {
    fn default() -> Self {
        Prior::Beta { alpha: 2.0, beta: 2.0 }
    }
}

impl Prior {
    fn validate(&self) -> Result<(), String> {
        match *self {
            Prior::Beta { alpha, beta } if !(alpha > 0.0 && beta > 0.0 && alpha.is_finite() && beta.is_finite()) => {
                Err(format!("beta prior needs positive parameters, got ({alpha}, {beta})"))
            }
            Prior::Point { p } if !(0.0..=1.0).contains(&p) => Err(format!("point prior {p} outside [0, 1]")),
            _ => Ok(()),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            Prior::Beta { alpha, beta } => rand_distr::Beta::new(alpha, beta)
                .expect("validated beta parameters")
                .sample(rng),
            Prior::Uniform => rng.random::<f64>(),
            Prior::Point { p } => p,
        }
    }

    /// Density on (0, 1). Not defined for point priors.
    fn density(&self, p: f64) -> f64 {
        match *self {
            Prior::Beta { alpha, beta } => statrs::distribution::Beta::new(alpha, beta)
                .expect("validated beta parameters")
                .pdf(p.clamp(1e-12, 1.0 - 1e-12)),
            Prior::Uniform => 1.0,
            Prior::Point { .. } => unreachable!("point prior has no density"),
        }
    }

    pub fn mean(&self) -> f64 {
        match *self {
            Prior::Beta { alpha, beta } => alpha / (alpha + beta),
            Prior::Uniform => 0.5,
            Prior::Point { p } => p,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfidenceMode {
    /// One action: a whole level `0..=10`.
    #[default]
    SingleToken,
    /// Up to two digit tokens followed by end-of-sequence.
    DigitSequence,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorldSpec {
    pub n_buckets: usize,
    pub prior: Prior,
    pub observation_noise_sigma: f64,
    pub seed: u64,
    pub confidence_mode: ConfidenceMode,
}

impl Default for WorldSpec {
    fn default() -> Self {
        Self {
            n_buckets: 11,
            prior: Prior::default(),
            observation_noise_sigma: 0.0,
            seed: 0,
            confidence_mode: ConfidenceMode::SingleToken,
        }
    }
}

impl WorldSpec {
    pub fn validate(&self) -> Result<(), EnvError> {
        let mut problems = Vec::new();
        if self.n_buckets < 2 {
            problems.push(format!("n_buckets must be at least 2, got {}", self.n_buckets));
        }
        if !(self.observation_noise_sigma >= 0.0 && self.observation_noise_sigma.is_finite()) {
            problems.push(format!(
                "observation_noise_sigma must be finite and non-negative, got {}",
                self.observation_noise_sigma
            ));
        }
        if let Err(e) = self.prior.validate() {
            problems.push(e);
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(EnvError::InvalidWorld(problems.join("; ")))
        }
    }

    /// Index of the nearest bucket center `k / (n_buckets - 1)`; halfway points go down.
    pub fn quantize(&self, x: f64) -> usize {
        let top = (self.n_buckets - 1) as f64;
        let idx = (x.clamp(0.0, 1.0) * top - 0.5).ceil();
        idx.clamp(0.0, top) as usize
    }

    /// Range of observation values that quantize to `bucket`.
    pub fn bucket_preimage(&self, bucket: usize) -> (f64, f64) {
        let top = (self.n_buckets - 1) as f64;
        let k = bucket as f64;
        (((k - 0.5) / top).max(0.0), ((k + 0.5) / top).min(1.0))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuestionInstance {
    pub id: u64,
    pub p_star: f64,
    pub observation: usize,
    pub answer_correct: bool,
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Draws `p*`, then the answer's correctness, then the observation.
pub fn sample_question<R: Rng + ?Sized>(world: &WorldSpec, id: u64, rng: &mut R) -> QuestionInstance {
    let p_star = world.prior.sample(rng);
    let answer_correct = rng.random::<f64>() < p_star;
    let seen = if world.observation_noise_sigma > 0.0 {
        let noise = Normal::new(0.0, world.observation_noise_sigma)
            .expect("validated sigma")
            .sample(rng);
        sigmoid(logit(p_star) + noise)
    } else {
        p_star
    };
    QuestionInstance {
        id,
        p_star,
        observation: world.quantize(seen),
        answer_correct,
    }
}

/// A confidence token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Digit(u8),
    /// The single token "10".
    Ten,
    EndOfSequence,
    Invalid,
}

impl ConfidenceMode {
    /// Actions in policy-index order.
    pub fn action_space(self) -> Vec<Action> {
        let mut actions: Vec<Action> = (0..10).map(Action::Digit).collect();
        if self == ConfidenceMode::SingleToken {
            actions.push(Action::Ten);
        }
        actions.push(Action::EndOfSequence);
        actions.push(Action::Invalid);
        actions
    }

    /// Number of distinct token prefixes the policy conditions on.
    pub fn n_contexts(self) -> usize {
        match self {
            ConfidenceMode::SingleToken => 1,
            // empty, one digit (10 ways), two digits
            ConfidenceMode::DigitSequence => 12,
        }
    }

    /// Action sequence that emits `level`.
    pub fn encode(self, level: ConfidenceLevel) -> Vec<Action> {
        match (self, level.value()) {
            (ConfidenceMode::SingleToken, 10) => vec![Action::Ten],
            (ConfidenceMode::SingleToken, d) => vec![Action::Digit(d)],
            (ConfidenceMode::DigitSequence, 10) => {
                vec![Action::Digit(1), Action::Digit(0), Action::EndOfSequence]
            }
            (ConfidenceMode::DigitSequence, d) => vec![Action::Digit(d), Action::EndOfSequence],
        }
    }
}

const MAX_DIGITS: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub question: QuestionInstance,
    pub tokens: Vec<Action>,
    pub terminated: bool,
}

impl EnvState {
    /// Prefix index used by tabular policies, in `0..mode.n_contexts()`.
    pub fn context(&self) -> usize {
        match self.tokens.as_slice() {
            [] => 0,
            [Action::Digit(d)] => 1 + *d as usize,
            _ => 11,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepResult {
    pub next_state: EnvState,
    pub reward: f64,
    pub done: bool,
    /// Parsed confidence at termination; `None` while running or on a format failure.
    pub level: Option<ConfidenceLevel>,
}

/// World plus reward shaping. Pure: `step` never mutates anything it is given.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Environment {
    pub world: WorldSpec,
    pub reward: RewardSpec,
}

impl Environment {
    pub fn new(world: WorldSpec, reward: RewardSpec) -> Result<Self, EnvError> {
        world.validate()?;
        reward.validate().map_err(|e| EnvError::InvalidWorld(e.to_string()))?;
        Ok(Self { world, reward })
    }

    pub fn reset<R: Rng + ?Sized>(&self, id: u64, rng: &mut R) -> EnvState {
        EnvState {
            question: sample_question(&self.world, id, rng),
            tokens: Vec::new(),
            terminated: false,
        }
    }

    fn finish(&self, state: &EnvState, action: Action, level: Option<ConfidenceLevel>) -> StepResult {
        let mut next_state = state.clone();
        next_state.tokens.push(action);
        next_state.terminated = true;
        let reward = match level {
            Some(l) => normalized_reward(state.question.answer_correct, l, &self.reward).normalized,
            None => out_of_format_reward(&self.reward),
        };
        StepResult {
            next_state,
            reward,
            done: true,
            level,
        }
    }

    pub fn step(&self, state: &EnvState, action: Action) -> Result<StepResult, EnvError> {
        if state.terminated {
            return Err(EnvError::Terminated);
        }
        let mode = self.world.confidence_mode;
        match (mode, action) {
            (_, Action::Digit(d)) if d > 9 => Err(EnvError::ActionNotAllowed(action, mode)),
            (ConfidenceMode::SingleToken, Action::Digit(d)) => {
                Ok(self.finish(state, action, Some(ConfidenceLevel::new(d as u32).expect("digit"))))
            }
            (ConfidenceMode::SingleToken, Action::Ten) => Ok(self.finish(
                state,
                action,
                Some(ConfidenceLevel::new(MAX_LEVEL as u32).expect("max level")),
            )),
            (ConfidenceMode::SingleToken, _) => Ok(self.finish(state, action, None)),
            (ConfidenceMode::DigitSequence, Action::Ten) => Err(EnvError::ActionNotAllowed(action, mode)),
            (ConfidenceMode::DigitSequence, Action::Digit(_)) if state.tokens.len() >= MAX_DIGITS => {
                Ok(self.finish(state, action, None))
            }
            (ConfidenceMode::DigitSequence, Action::Digit(_)) => {
                let mut next_state = state.clone();
                next_state.tokens.push(action);
                Ok(StepResult {
                    next_state,
                    reward: 0.0,
                    done: false,
                    level: None,
                })
            }
            (ConfidenceMode::DigitSequence, Action::EndOfSequence) => {
                let level = parse_digits(&state.tokens);
                Ok(self.finish(state, action, level))
            }
            (ConfidenceMode::DigitSequence, Action::Invalid) => Ok(self.finish(state, action, None)),
        }
    }
}

fn parse_digits(tokens: &[Action]) -> Option<ConfidenceLevel> {
    if tokens.is_empty() {
        return None;
    }
    let mut value = 0u32;
    for t in tokens {
        match t {
            Action::Digit(d) => value = value * 10 + *d as u32,
            _ => return None,
        }
    }
    ConfidenceLevel::new(value).ok()
}

const ORACLE_GRID: usize = 20_001;

fn trapezoid(n: usize, lo: f64, hi: f64, f: impl Fn(f64) -> f64) -> f64 {
    let h = (hi - lo) / (n - 1) as f64;
    let mut acc = 0.0;
    for i in 0..n {
        let x = lo + h * i as f64;
        let w = if i == 0 || i == n - 1 { 0.5 } else { 1.0 };
        acc += w * f(x);
    }
    acc * h
}

/// `E[p* | observation = bucket]` by numerical integration over the prior.
///
/// Returns `None` when the bucket has zero probability under the world.
pub fn posterior_mean_oracle(world: &WorldSpec, bucket: usize) -> Option<f64> {
    if bucket >= world.n_buckets {
        return None;
    }
    let (lo, hi) = world.bucket_preimage(bucket);
    let sigma = world.observation_noise_sigma;
    if sigma == 0.0 {
        if let Prior::Point { p } = world.prior {
            return (world.quantize(p) == bucket).then_some(p);
        }
        let den = trapezoid(ORACLE_GRID, lo, hi, |p| world.prior.density(p));
        let num = trapezoid(ORACLE_GRID, lo, hi, |p| p * world.prior.density(p));
        return (den > 0.0).then(|| num / den);
    }

    let std_normal = statrs::distribution::Normal::new(0.0, 1.0).expect("standard normal");
    let likelihood = |p: f64| {
        let z = logit(p.clamp(1e-15, 1.0 - 1e-15));
        let upper = if hi >= 1.0 { 1.0 } else { std_normal.cdf((logit(hi) - z) / sigma) };
        let lower = if lo <= 0.0 { 0.0 } else { std_normal.cdf((logit(lo) - z) / sigma) };
        (upper - lower).max(0.0)
    };
    if let Prior::Point { p } = world.prior {
        return (likelihood(p) > 0.0).then_some(p);
    }
    let den = trapezoid(ORACLE_GRID, 0.0, 1.0, |p| world.prior.density(p) * likelihood(p));
    let num = trapezoid(ORACLE_GRID, 0.0, 1.0, |p| p * world.prior.density(p) * likelihood(p));
    (den > 0.0).then(|| num / den)
}

/// Probability that a question lands in each bucket.
pub fn bucket_masses(world: &WorldSpec) -> Vec<f64> {
    let sigma = world.observation_noise_sigma;
    if let Prior::Point { p } = world.prior {
        if sigma == 0.0 {
            let mut m = vec![0.0; world.n_buckets];
            m[world.quantize(p)] = 1.0;
            return m;
        }
    }
    let std_normal = statrs::distribution::Normal::new(0.0, 1.0).expect("standard normal");
    (0..world.n_buckets)
        .map(|b| {
            let (lo, hi) = world.bucket_preimage(b);
            if sigma == 0.0 {
                return trapezoid(ORACLE_GRID, lo, hi, |p| world.prior.density(p));
            }
            let likelihood = |p: f64| {
                let z = logit(p.clamp(1e-15, 1.0 - 1e-15));
                let upper = if hi >= 1.0 { 1.0 } else { std_normal.cdf((logit(hi) - z) / sigma) };
                let lower = if lo <= 0.0 { 0.0 } else { std_normal.cdf((logit(lo) - z) / sigma) };
                (upper - lower).max(0.0)
            };
            match world.prior {
                Prior::Point { p } => likelihood(p),
                _ => trapezoid(ORACLE_GRID, 0.0, 1.0, |p| world.prior.density(p) * likelihood(p)),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn env(mode: ConfidenceMode) -> Environment {
        Environment::new(
            WorldSpec {
                confidence_mode: mode,
                ..WorldSpec::default()
            },
            RewardSpec::default(),
        )
        .unwrap()
    }

    fn state(correct: bool) -> EnvState {
        EnvState {
            question: QuestionInstance {
                id: 0,
                p_star: 0.5,
                observation: 5,
                answer_correct: correct,
            },
            tokens: vec![],
            terminated: false,
        }
    }

    #[test]
    fn quantization() {
        let w = WorldSpec::default();
        assert_eq!(w.quantize(0.73), 7);
        assert_eq!(w.quantize(0.0), 0);
        assert_eq!(w.quantize(1.0), 10);
        // halfway goes to the lower index
        assert_eq!(w.quantize(0.25), 2);
        assert_eq!(w.quantize(0.2500001), 3);
        assert_eq!(w.bucket_preimage(0), (0.0, 0.05));
        let (lo, hi) = w.bucket_preimage(7);
        assert!((lo - 0.65).abs() < 1e-12 && (hi - 0.75).abs() < 1e-12);
    }

    #[test]
    fn sampling_is_deterministic_and_respects_degenerate_prior() {
        let w = WorldSpec {
            prior: Prior::Point { p: 1.0 },
            ..WorldSpec::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for i in 0..200 {
            let q = sample_question(&w, i, &mut rng);
            assert!(q.answer_correct);
            assert_eq!(q.observation, 10);
        }
        let mut a = ChaCha8Rng::seed_from_u64(9);
        let mut b = ChaCha8Rng::seed_from_u64(9);
        let w = WorldSpec {
            observation_noise_sigma: 0.7,
            ..WorldSpec::default()
        };
        for i in 0..50 {
            assert_eq!(sample_question(&w, i, &mut a), sample_question(&w, i, &mut b));
        }
    }

    #[test]
    fn single_token_steps() {
        let e = env(ConfidenceMode::SingleToken);
        let r = e.step(&state(true), Action::Ten).unwrap();
        assert!(r.done);
        assert!((r.reward - 1.0).abs() < 1e-12);
        assert_eq!(r.level.unwrap().value(), 10);

        for correct in [true, false] {
            let r = e.step(&state(correct), Action::Invalid).unwrap();
            assert!(r.done);
            assert_eq!(r.reward, -3.0);
            assert_eq!(r.level, None);
        }
        let r = e.step(&state(true), Action::EndOfSequence).unwrap();
        assert_eq!(r.reward, -3.0);

        let done = r.next_state;
        assert_eq!(e.step(&done, Action::Digit(3)), Err(EnvError::Terminated));
    }

    #[test]
    fn digit_sequence_steps() {
        let e = env(ConfidenceMode::DigitSequence);
        let s0 = state(true);
        let s1 = e.step(&s0, Action::Digit(1)).unwrap();
        assert!(!s1.done && s1.reward == 0.0);
        assert_eq!(s1.next_state.context(), 2);
        let s2 = e.step(&s1.next_state, Action::Digit(0)).unwrap();
        assert!(!s2.done && s2.reward == 0.0);
        assert_eq!(s2.next_state.context(), 11);
        let s3 = e.step(&s2.next_state, Action::EndOfSequence).unwrap();
        assert!(s3.done);
        assert!((s3.reward - 1.0).abs() < 1e-12);
        assert_eq!(s3.level.unwrap().value(), 10);

        // 11 is out of range
        let a = e.step(&s0, Action::Digit(1)).unwrap().next_state;
        let b = e.step(&a, Action::Digit(1)).unwrap().next_state;
        assert_eq!(e.step(&b, Action::EndOfSequence).unwrap().reward, -3.0);
        // a third digit is a format failure
        let c = e.step(&b, Action::Digit(0)).unwrap();
        assert!(c.done && c.reward == -3.0);
        // bare end-of-sequence
        assert_eq!(e.step(&s0, Action::EndOfSequence).unwrap().reward, -3.0);
        assert!(matches!(e.step(&s0, Action::Ten), Err(EnvError::ActionNotAllowed(..))));
    }

    #[test]
    fn step_leaves_answer_untouched() {
        let e = env(ConfidenceMode::DigitSequence);
        let s = state(false);
        let r = e.step(&s, Action::Digit(4)).unwrap();
        assert_eq!(r.next_state.question, s.question);
        assert_eq!(e.step(&s, Action::Digit(4)).unwrap(), r);
    }

    #[test]
    fn encode_round_trips_through_step() {
        for mode in [ConfidenceMode::SingleToken, ConfidenceMode::DigitSequence] {
            let e = env(mode);
            for level in ConfidenceLevel::all() {
                let mut s = state(true);
                let mut last = None;
                for a in mode.encode(level) {
                    let r = e.step(&s, a).unwrap();
                    s = r.next_state.clone();
                    last = Some(r);
                }
                let r = last.unwrap();
                assert!(r.done);
                assert_eq!(r.level, Some(level));
            }
        }
    }

    #[test]
    fn oracle_uniform_interval_and_point() {
        let w = WorldSpec {
            prior: Prior::Uniform,
            ..WorldSpec::default()
        };
        assert!((posterior_mean_oracle(&w, 7).unwrap() - 0.7).abs() < 1e-9);
        assert!((posterior_mean_oracle(&w, 0).unwrap() - 0.025).abs() < 1e-9);
        let w = WorldSpec {
            prior: Prior::Point { p: 0.3 },
            ..WorldSpec::default()
        };
        assert_eq!(posterior_mean_oracle(&w, 3), Some(0.3));
        assert_eq!(posterior_mean_oracle(&w, 4), None);
        let w = WorldSpec {
            prior: Prior::Point { p: 0.3 },
            observation_noise_sigma: 0.5,
            ..WorldSpec::default()
        };
        assert_eq!(posterior_mean_oracle(&w, 4), Some(0.3));
    }

    #[test]
    fn bucket_masses_sum_to_one() {
        for sigma in [0.0, 0.8] {
            let w = WorldSpec {
                observation_noise_sigma: sigma,
                ..WorldSpec::default()
            };
            let total: f64 = bucket_masses(&w).iter().sum();
            assert!((total - 1.0).abs() < 1e-6, "sigma {sigma}: {total}");
        }
    }

    #[test]
    fn world_validation() {
        let w = WorldSpec {
            n_buckets: 1,
            observation_noise_sigma: -1.0,
            ..WorldSpec::default()
        };
        let msg = w.validate().unwrap_err().to_string();
        assert!(msg.contains("n_buckets") && msg.contains("sigma"));
    }
}
