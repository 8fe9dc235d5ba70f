//! Tabular softmax policy over confidence tokens and rollout collection.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{Action, ConfidenceMode, EnvState, Environment};
use crate::exec::{self, Execution};
use crate::metrics::ScoredSample;
use crate::reward::ConfidenceLevel;
use crate::rng::{substream, Domain};

/// Softmax policy with one logit row per (observation bucket, token prefix).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularPolicy {
    pub mode: ConfidenceMode,
    pub n_buckets: usize,
    pub n_contexts: usize,
    pub actions: Vec<Action>,
    /// Row-major `[n_buckets * n_contexts][actions.len()]`.
    pub logits: Vec<f64>,
}

impl TabularPolicy {
    pub fn uniform(mode: ConfidenceMode, n_buckets: usize) -> Self {
        let actions = mode.action_space();
        let n_contexts = mode.n_contexts();
        let logits = vec![0.0; n_buckets * n_contexts * actions.len()];
        Self {
            mode,
            n_buckets,
            n_contexts,
            actions,
            logits,
        }
    }

    pub fn n_actions(&self) -> usize {
        self.actions.len()
    }

    pub fn n_states(&self) -> usize {
        self.n_buckets * self.n_contexts
    }

    pub fn state_index(&self, bucket: usize, context: usize) -> usize {
        debug_assert!(bucket < self.n_buckets && context < self.n_contexts);
        bucket * self.n_contexts + context
    }

    pub fn index_of(&self, state: &EnvState) -> usize {
        self.state_index(state.question.observation, state.context())
    }

    pub fn action_index(&self, action: Action) -> Option<usize> {
        self.actions.iter().position(|a| *a == action)
    }

    pub fn row(&self, state: usize) -> &[f64] {
        let k = self.n_actions();
        &self.logits[state * k..(state + 1) * k]
    }

    pub fn row_mut(&mut self, state: usize) -> &mut [f64] {
        let k = self.n_actions();
        &mut self.logits[state * k..(state + 1) * k]
    }

    pub fn distribution(&self, state: usize) -> Vec<f64> {
        softmax(self.row(state))
    }

    /// Action probabilities for the first token given an observation bucket.
    pub fn action_distribution(&self, bucket: usize) -> Vec<f64> {
        self.distribution(self.state_index(bucket, 0))
    }

    pub fn log_prob(&self, state: usize, action: usize) -> f64 {
        log_softmax(self.row(state))[action]
    }

    pub fn entropy(&self, state: usize) -> f64 {
        let p = self.distribution(state);
        -p.iter().filter(|&&x| x > 0.0).map(|x| x * x.ln()).sum::<f64>()
    }

    pub fn sample<R: Rng + ?Sized>(&self, state: usize, rng: &mut R) -> usize {
        let p = self.distribution(state);
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (i, pi) in p.iter().enumerate() {
            acc += pi;
            if u < acc {
                return i;
            }
        }
        p.len() - 1
    }

    /// Most likely action; first index on ties.
    pub fn greedy(&self, state: usize) -> usize {
        let row = self.row(state);
        let mut best = 0;
        for (i, &z) in row.iter().enumerate() {
            if z > row[best] {
                best = i;
            }
        }
        best
    }

    /// Adds `amount` to the logits of the token path that emits `level`, in every bucket.
    pub fn bias_toward(&mut self, level: ConfidenceLevel, amount: f64) {
        let path = self.mode.encode(level);
        for bucket in 0..self.n_buckets {
            let mut prefix_len = 0;
            let mut context = 0;
            for action in &path {
                let a = self.action_index(*action).expect("encoded actions are in the space");
                let s = self.state_index(bucket, context);
                self.row_mut(s)[a] += amount;
                prefix_len += 1;
                context = match (prefix_len, action) {
                    (1, Action::Digit(d)) => 1 + *d as usize,
                    _ => 11.min(self.n_contexts - 1),
                };
            }
        }
    }

    /// Level emitted by greedy decoding from `bucket`, `None` for a format failure.
    pub fn modal_level(&self, env: &Environment, bucket: usize) -> Option<ConfidenceLevel> {
        let mut state = EnvState {
            question: crate::env::QuestionInstance {
                id: 0,
                p_star: 0.5,
                observation: bucket,
                answer_correct: true,
            },
            tokens: Vec::new(),
            terminated: false,
        };
        loop {
            let a = self.actions[self.greedy(self.index_of(&state))];
            let r = env.step(&state, a).expect("greedy actions come from the action space");
            if r.done {
                return r.level;
            }
            state = r.next_state;
        }
    }
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = e.iter().sum();
    e.into_iter().map(|x| x / sum).collect()
}

pub fn log_softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + z.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    z.iter().map(|x| x - lse).collect()
}

/// Expected terminal reward per observation bucket.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueBaseline {
    pub value: Vec<f64>,
}

impl ValueBaseline {
    pub fn zeros(n_buckets: usize) -> Self {
        Self {
            value: vec![0.0; n_buckets],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub state: usize,
    pub action: usize,
    /// Log-probability under the policy that collected the episode.
    pub behavior_log_prob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub question_id: u64,
    pub observation: usize,
    pub p_star: f64,
    pub answer_correct: bool,
    pub steps: Vec<StepRecord>,
    pub reward: f64,
    pub level: Option<ConfidenceLevel>,
}

impl Episode {
    pub fn scored(&self) -> Option<ScoredSample> {
        self.level.map(|l| ScoredSample {
            confidence: l.normalized(),
            correct: self.answer_correct,
        })
    }
}

/// How actions are chosen during a rollout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionSelection {
    Sample,
    #[default]
    Greedy,
}

fn run_episode<R: Rng + ?Sized>(
    env: &Environment,
    policy: &TabularPolicy,
    id: u64,
    selection: ActionSelection,
    rng: &mut R,
) -> Episode {
    let mut state = env.reset(id, rng);
    let question = state.question;
    let mut steps = Vec::with_capacity(3);
    loop {
        let s = policy.index_of(&state);
        let a = match selection {
            ActionSelection::Sample => policy.sample(s, rng),
            ActionSelection::Greedy => policy.greedy(s),
        };
        steps.push(StepRecord {
            state: s,
            action: a,
            behavior_log_prob: policy.log_prob(s, a),
        });
        let result = env
            .step(&state, policy.actions[a])
            .expect("policy actions come from the environment's action space");
        if result.done {
            return Episode {
                question_id: question.id,
                observation: question.observation,
                p_star: question.p_star,
                answer_correct: question.answer_correct,
                steps,
                reward: result.reward,
                level: result.level,
            };
        }
        state = result.next_state;
    }
}

/// Rolls out `n` episodes, sampling actions from `policy`.
///
/// Episode `i` of batch `batch` draws from its own random stream, so the
/// batch is identical under every [`Execution`] mode.
pub fn collect_batch(
    env: &Environment,
    policy: &TabularPolicy,
    n: usize,
    batch: u64,
    seed: u64,
    exec: Execution,
) -> Vec<Episode> {
    let first_id = batch * n as u64;
    exec::map_indexed(n, exec, |i| {
        let mut rng = substream(seed, Domain::Rollout, batch, i as u64);
        run_episode(env, policy, first_id + i as u64, ActionSelection::Sample, &mut rng)
    })
}

/// Rollouts on questions from `domain`/`group`, independent of training data.
pub fn rollout(
    env: &Environment,
    policy: &TabularPolicy,
    n: usize,
    seed: u64,
    domain: Domain,
    group: u64,
    selection: ActionSelection,
    exec: Execution,
) -> Vec<Episode> {
    exec::map_indexed(n, exec, |i| {
        let mut rng = substream(seed, domain, group, i as u64);
        run_episode(env, policy, i as u64, selection, &mut rng)
    })
}
