//! Training loop: alternate rollouts and PPO updates, evaluate per window.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::Environment;
use crate::exec::Execution;
use crate::metrics::{self, Binning, ScoredSample};
use crate::policy::{collect_batch, rollout, ActionSelection, Episode, TabularPolicy, ValueBaseline};
use crate::ppo::{ppo_update, AdamState, PpoConfig, PpoError, UpdateDiagnostics};
use crate::reward::ConfidenceLevel;
use crate::rng::Domain;

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Ppo(#[from] PpoError),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("checkpoint schema {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },
}

/// Initial logit offset toward one level, to start from a biased policy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InitBias {
    pub level: ConfidenceLevel,
    pub amount: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainSchedule {
    /// Training episodes per statistics window.
    pub eval_every: usize,
    /// Episodes in the fixed evaluation set scored at the end of each window.
    pub window_eval_episodes: usize,
    /// Episodes in the final held-out evaluation.
    pub heldout_episodes: usize,
    pub eval_selection: ActionSelection,
    /// Final fraction of training over which the entropy bonus decays to zero.
    pub entropy_decay_fraction: f64,
    /// Learning rate at the end of training as a fraction of the initial
    /// one; the rate decays linearly in between. `1.0` keeps it constant.
    pub final_learning_rate_fraction: f64,
    pub init_bias: Option<InitBias>,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            eval_every: 5_000,
            window_eval_episodes: 2_000,
            heldout_episodes: 10_000,
            eval_selection: ActionSelection::Greedy,
            entropy_decay_fraction: 0.2,
            final_learning_rate_fraction: 0.3,
            init_bias: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainConfig {
    pub ppo: PpoConfig,
    pub schedule: TrainSchedule,
}

impl TrainConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut out = self.ppo.problems();
        let s = &self.schedule;
        if s.eval_every == 0 {
            out.push("eval_every must be positive".into());
        }
        if s.heldout_episodes == 0 {
            out.push("heldout_episodes must be positive".into());
        }
        if !(0.0..=1.0).contains(&s.entropy_decay_fraction) {
            out.push(format!(
                "entropy_decay_fraction must be in [0, 1], got {}",
                s.entropy_decay_fraction
            ));
        }
        if !(s.final_learning_rate_fraction > 0.0 && s.final_learning_rate_fraction <= 1.0) {
            out.push(format!(
                "final_learning_rate_fraction must be in (0, 1], got {}",
                s.final_learning_rate_fraction
            ));
        }
        if let Some(b) = s.init_bias {
            if !b.amount.is_finite() {
                out.push("init_bias amount must be finite".into());
            }
        }
        out
    }
}

/// One contiguous, non-overlapping span of training episodes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainWindow {
    pub window: usize,
    pub episode_start: usize,
    pub episode_end: usize,
    pub mean_reward: f64,
    pub out_of_format_rate: f64,
    pub accuracy: f64,
    pub policy_entropy: f64,
    pub eval_ece: Option<f64>,
    pub eval_auroc: Option<f64>,
    pub eval_out_of_format_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainStats {
    pub windows: Vec<TrainWindow>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
struct WindowAcc {
    start: usize,
    episodes: usize,
    reward_sum: f64,
    out_of_format: usize,
    correct: usize,
}

/// Counter-based position in the rollout random streams.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RngCursor {
    pub seed: u64,
    pub next_batch: u64,
}

/// Summary of a policy on evaluation episodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyEval {
    pub episodes: usize,
    pub samples: Vec<ScoredSample>,
    /// `(p_star, correct)` for every episode, format failures included.
    pub oracle_samples: Vec<ScoredSample>,
    pub out_of_format_rate: f64,
    pub mean_reward: f64,
    pub ece: Option<f64>,
    pub auroc: Option<f64>,
    /// AUROC obtained by ranking on the latent `p_star`.
    pub oracle_auroc: Option<f64>,
    pub histogram: [u64; 11],
}

impl PolicyEval {
    pub fn from_episodes(episodes: &[Episode]) -> Self {
        let samples: Vec<ScoredSample> = episodes.iter().filter_map(Episode::scored).collect();
        let oracle_samples: Vec<ScoredSample> = episodes
            .iter()
            .map(|e| ScoredSample {
                confidence: e.p_star,
                correct: e.answer_correct,
            })
            .collect();
        let n = episodes.len().max(1) as f64;
        let ece = (!samples.is_empty()).then(|| metrics::ece(&samples, Binning::DiscreteLevels).expect("valid samples"));
        Self {
            episodes: episodes.len(),
            out_of_format_rate: (episodes.len() - samples.len()) as f64 / n,
            mean_reward: episodes.iter().map(|e| e.reward).sum::<f64>() / n,
            ece,
            auroc: metrics::auroc(&samples),
            oracle_auroc: metrics::auroc(&oracle_samples),
            histogram: metrics::confidence_histogram(&samples).0,
            samples,
            oracle_samples,
        }
    }

    /// Fraction of scored predictions at level 8 or above.
    pub fn high_confidence_fraction(&self) -> f64 {
        let total: u64 = self.histogram.iter().sum();
        if total == 0 {
            return 0.0;
        }
        self.histogram[8..].iter().sum::<u64>() as f64 / total as f64
    }
}

/// Everything needed to resume training bit-for-bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub schema_version: u32,
    pub env: Environment,
    pub config: TrainConfig,
    pub policy: TabularPolicy,
    pub baseline: ValueBaseline,
    pub optimizer: AdamState,
    pub rng: RngCursor,
    pub episodes_done: usize,
    pub stats: TrainStats,
    window: WindowAcc,
    pub last_update: Option<UpdateDiagnostics>,
}

pub struct Trainer {
    state: Checkpoint,
    exec: Execution,
}

impl Trainer {
    pub fn new(env: Environment, config: TrainConfig, exec: Execution) -> Result<Self, TrainError> {
        let problems = config.problems();
        if !problems.is_empty() {
            return Err(TrainError::InvalidConfig(problems.join("; ")));
        }
        let mut policy = TabularPolicy::uniform(env.world.confidence_mode, env.world.n_buckets);
        if let Some(bias) = config.schedule.init_bias {
            policy.bias_toward(bias.level, bias.amount);
        }
        let optimizer = AdamState::new(policy.logits.len());
        Ok(Self {
            state: Checkpoint {
                schema_version: CHECKPOINT_SCHEMA_VERSION,
                env,
                config,
                baseline: ValueBaseline::zeros(env.world.n_buckets),
                policy,
                optimizer,
                rng: RngCursor {
                    seed: config.ppo.seed,
                    next_batch: 0,
                },
                episodes_done: 0,
                stats: TrainStats::default(),
                window: WindowAcc::default(),
                last_update: None,
            },
            exec,
        })
    }

    pub fn from_checkpoint(checkpoint: Checkpoint, exec: Execution) -> Result<Self, TrainError> {
        if checkpoint.schema_version != CHECKPOINT_SCHEMA_VERSION {
            return Err(TrainError::CheckpointVersion {
                found: checkpoint.schema_version,
                expected: CHECKPOINT_SCHEMA_VERSION,
            });
        }
        Ok(Self { state: checkpoint, exec })
    }

    pub fn checkpoint(&self) -> &Checkpoint {
        &self.state
    }

    pub fn policy(&self) -> &TabularPolicy {
        &self.state.policy
    }

    pub fn stats(&self) -> &TrainStats {
        &self.state.stats
    }

    pub fn is_done(&self) -> bool {
        self.state.episodes_done >= self.state.config.ppo.total_episodes
    }

    fn entropy_coef(&self) -> f64 {
        let ppo = &self.state.config.ppo;
        let total = ppo.total_episodes as f64;
        let decay_start = total * (1.0 - self.state.config.schedule.entropy_decay_fraction);
        let done = self.state.episodes_done as f64;
        if done < decay_start {
            ppo.entropy_coef
        } else {
            ppo.entropy_coef * ((total - done) / (total - decay_start)).clamp(0.0, 1.0)
        }
    }

    fn learning_rate_factor(&self) -> f64 {
        let progress = self.state.episodes_done as f64 / self.state.config.ppo.total_episodes as f64;
        let end = self.state.config.schedule.final_learning_rate_fraction;
        1.0 - (1.0 - end) * progress
    }

    /// Mean first-token entropy over buckets.
    fn mean_entropy(&self) -> f64 {
        let p = &self.state.policy;
        (0..p.n_buckets)
            .map(|b| p.entropy(p.state_index(b, 0)))
            .sum::<f64>()
            / p.n_buckets as f64
    }

    /// Collects one batch and applies one PPO update.
    pub fn step_batch(&mut self) -> Result<(), TrainError> {
        if self.is_done() {
            return Ok(());
        }
        let ppo = self.state.config.ppo;
        let schedule = self.state.config.schedule;
        let remaining = ppo.total_episodes - self.state.episodes_done;
        let window_left = schedule.eval_every - self.state.window.episodes;
        let n = ppo.batch_size.min(remaining).min(window_left);

        let batch = collect_batch(
            &self.state.env,
            &self.state.policy,
            n,
            self.state.rng.next_batch,
            self.state.rng.seed,
            self.exec,
        );
        self.state.rng.next_batch += 1;

        let acc = &mut self.state.window;
        if acc.episodes == 0 {
            acc.start = self.state.episodes_done;
        }
        for ep in &batch {
            acc.episodes += 1;
            acc.reward_sum += ep.reward;
            acc.out_of_format += ep.level.is_none() as usize;
            acc.correct += ep.answer_correct as usize;
        }

        let coef = self.entropy_coef();
        let mut step_config = ppo;
        step_config.learning_rate *= self.learning_rate_factor();
        let diag = ppo_update(
            &mut self.state.policy,
            &mut self.state.baseline,
            &mut self.state.optimizer,
            &batch,
            &step_config,
            coef,
        )?;
        self.state.last_update = Some(diag);
        self.state.episodes_done += n;

        if self.state.window.episodes >= schedule.eval_every || self.is_done() {
            self.close_window();
        }
        Ok(())
    }

    fn close_window(&mut self) {
        let acc = self.state.window;
        if acc.episodes == 0 {
            return;
        }
        let schedule = self.state.config.schedule;
        let eval = (schedule.window_eval_episodes > 0).then(|| {
            self.evaluate(schedule.window_eval_episodes, Domain::WindowEval)
        });
        let n = acc.episodes as f64;
        let window = TrainWindow {
            window: self.state.stats.windows.len(),
            episode_start: acc.start,
            episode_end: acc.start + acc.episodes,
            mean_reward: acc.reward_sum / n,
            out_of_format_rate: acc.out_of_format as f64 / n,
            accuracy: acc.correct as f64 / n,
            policy_entropy: self.mean_entropy(),
            eval_ece: eval.as_ref().and_then(|e| e.ece),
            eval_auroc: eval.as_ref().and_then(|e| e.auroc),
            eval_out_of_format_rate: eval.as_ref().map_or(0.0, |e| e.out_of_format_rate),
        };
        self.state.stats.windows.push(window);
        self.state.window = WindowAcc::default();
    }

    pub fn run(&mut self) -> Result<(), TrainError> {
        while !self.is_done() {
            self.step_batch()?;
        }
        Ok(())
    }

    /// Scores the current policy on questions drawn from `domain`, which
    /// never overlap the training streams.
    pub fn evaluate(&self, episodes: usize, domain: Domain) -> PolicyEval {
        evaluate_policy(
            &self.state.env,
            &self.state.policy,
            episodes,
            self.state.env.world.seed,
            domain,
            self.state.config.schedule.eval_selection,
            self.exec,
        )
    }

    pub fn evaluate_heldout(&self) -> PolicyEval {
        self.evaluate(self.state.config.schedule.heldout_episodes, Domain::HeldOut)
    }
}

pub fn evaluate_policy(
    env: &Environment,
    policy: &TabularPolicy,
    episodes: usize,
    seed: u64,
    domain: Domain,
    selection: ActionSelection,
    exec: Execution,
) -> PolicyEval {
    let eps = rollout(env, policy, episodes, seed, domain, 0, selection, exec);
    PolicyEval::from_episodes(&eps)
}

pub struct TrainOutcome {
    pub policy: TabularPolicy,
    pub stats: TrainStats,
    pub initial: PolicyEval,
    pub heldout: PolicyEval,
    pub checkpoint: Checkpoint,
}

/// Trains from scratch and evaluates the initial and final policies on the
/// same held-out questions.
pub fn train(env: Environment, config: TrainConfig, exec: Execution) -> Result<TrainOutcome, TrainError> {
    train_with_progress(env, config, exec, |_| {})
}

/// [`train`], calling `on_window` as each stats window closes.
pub fn train_with_progress(
    env: Environment,
    config: TrainConfig,
    exec: Execution,
    mut on_window: impl FnMut(&TrainWindow),
) -> Result<TrainOutcome, TrainError> {
    let mut trainer = Trainer::new(env, config, exec)?;
    let initial = trainer.evaluate_heldout();
    let mut reported = 0;
    while !trainer.is_done() {
        trainer.step_batch()?;
        for w in &trainer.state.stats.windows[reported..] {
            on_window(w);
        }
        reported = trainer.state.stats.windows.len();
    }
    let heldout = trainer.evaluate_heldout();
    Ok(TrainOutcome {
        policy: trainer.state.policy.clone(),
        stats: trainer.state.stats.clone(),
        initial,
        heldout,
        checkpoint: trainer.state,
    })
}
