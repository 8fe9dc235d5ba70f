//! Clipped-surrogate PPO for [`TabularPolicy`].
//!
//! Gradients are closed form: for a softmax row,
//! `d log pi(a|s) / d z(b|s) = 1{a = b} - pi(b|s)`. Every token of an episode
//! gets the same advantage, terminal reward minus the bucket baseline. The
//! ascent step uses Adam.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::policy::{Episode, TabularPolicy, ValueBaseline};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PpoError {
    #[error("empty batch")]
    EmptyBatch,
    #[error("non-finite gradient at epoch {epoch}: {diagnostics:?}")]
    Divergence { epoch: usize, diagnostics: UpdateDiagnostics },
    #[error("invalid PPO config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PpoConfig {
    pub clip_ratio: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs_per_batch: usize,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub total_episodes: usize,
    pub seed: u64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            clip_ratio: 0.2,
            learning_rate: 0.1,
            batch_size: 256,
            epochs_per_batch: 4,
            entropy_coef: 0.01,
            value_coef: 0.5,
            total_episodes: 50_000,
            seed: 42,
        }
    }
}

impl PpoConfig {
    /// Every violated constraint, one message per key.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.clip_ratio > 0.0 && self.clip_ratio < 1.0) {
            out.push(format!("clip_ratio must be in (0, 1), got {}", self.clip_ratio));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            out.push(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.batch_size == 0 {
            out.push("batch_size must be positive".into());
        }
        if self.epochs_per_batch == 0 {
            out.push("epochs_per_batch must be positive".into());
        }
        if !(self.entropy_coef >= 0.0 && self.entropy_coef.is_finite()) {
            out.push(format!("entropy_coef must be non-negative, got {}", self.entropy_coef));
        }
        if !(self.value_coef > 0.0 && self.value_coef <= 1.0) {
            out.push(format!("value_coef must be in (0, 1], got {}", self.value_coef));
        }
        if self.total_episodes == 0 {
            out.push("total_episodes must be positive".into());
        }
        out
    }

    pub fn validate(&self) -> Result<(), PpoError> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(PpoError::InvalidConfig(p.join("; ")))
        }
    }
}

/// First and second moment estimates for every logit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    /// In-place gradient ascent step.
    fn ascend(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - BETA1.powi(self.t as i32);
        let c2 = 1.0 - BETA2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = BETA1 * self.m[i] + (1.0 - BETA1) * grad[i];
            self.v[i] = BETA2 * self.v[i] + (1.0 - BETA2) * grad[i] * grad[i];
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] += lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct UpdateDiagnostics {
    pub surrogate: f64,
    pub entropy: f64,
    pub mean_ratio: f64,
    pub clip_fraction: f64,
    pub approx_kl: f64,
    pub value_loss: f64,
    pub grad_norm: f64,
}

/// Per-episode advantage, `reward - baseline[observation]`, shared by every
/// token of the episode.
pub fn advantages(batch: &[Episode], baseline: &ValueBaseline) -> Vec<f64> {
    batch
        .iter()
        .map(|ep| ep.reward - baseline.value[ep.observation])
        .collect()
}

/// Gradient of the clipped surrogate plus entropy bonus with respect to the
/// logits, averaged over every token in the batch.
pub fn surrogate_gradient(
    policy: &TabularPolicy,
    batch: &[Episode],
    advantages: &[f64],
    clip_ratio: f64,
    entropy_coef: f64,
) -> (Vec<f64>, UpdateDiagnostics) {
    let k = policy.n_actions();
    let mut grad = vec![0.0; policy.logits.len()];
    let n_tokens: usize = batch.iter().map(|e| e.steps.len()).sum();
    let scale = 1.0 / n_tokens as f64;
    let mut d = UpdateDiagnostics::default();
    let mut clipped = 0usize;

    for (ep, &adv) in batch.iter().zip(advantages) {
        for step in &ep.steps {
            let row = policy.row(step.state);
            let log_p = crate::policy::log_softmax(row);
            let probs: Vec<f64> = log_p.iter().map(|x| x.exp()).collect();
            let log_ratio = log_p[step.action] - step.behavior_log_prob;
            let ratio = log_ratio.exp();
            let clipped_ratio = ratio.clamp(1.0 - clip_ratio, 1.0 + clip_ratio);
            let unclipped_obj = ratio * adv;
            let clipped_obj = clipped_ratio * adv;
            d.surrogate += scale * unclipped_obj.min(clipped_obj);
            d.mean_ratio += scale * ratio;
            d.approx_kl += scale * ((ratio - 1.0) - log_ratio);

            // The min picks the clipped branch, which has zero gradient,
            // exactly when the ratio has left the trust region in the
            // direction the advantage favours.
            let active = !((adv > 0.0 && ratio > 1.0 + clip_ratio) || (adv < 0.0 && ratio < 1.0 - clip_ratio));
            let base = step.state * k;
            if active {
                let coef = scale * ratio * adv;
                for b in 0..k {
                    let indicator = if b == step.action { 1.0 } else { 0.0 };
                    grad[base + b] += coef * (indicator - probs[b]);
                }
            } else {
                clipped += 1;
            }

            let entropy: f64 = -probs.iter().zip(&log_p).map(|(p, lp)| p * lp).sum::<f64>();
            d.entropy += scale * entropy;
            if entropy_coef > 0.0 {
                for b in 0..k {
                    grad[base + b] += scale * entropy_coef * (-probs[b] * (log_p[b] + entropy));
                }
            }
        }
    }
    d.clip_fraction = clipped as f64 / n_tokens as f64;
    d.grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    (grad, d)
}

/// Runs `epochs_per_batch` surrogate ascent steps on one batch, then moves the
/// baseline toward each bucket's mean batch reward.
pub fn ppo_update(
    policy: &mut TabularPolicy,
    baseline: &mut ValueBaseline,
    optimizer: &mut AdamState,
    batch: &[Episode],
    config: &PpoConfig,
    entropy_coef: f64,
) -> Result<UpdateDiagnostics, PpoError> {
    if batch.is_empty() {
        return Err(PpoError::EmptyBatch);
    }
    let n_buckets = baseline.value.len();
    let mut sums = vec![0.0; n_buckets];
    let mut counts = vec![0usize; n_buckets];
    for ep in batch {
        sums[ep.observation] += ep.reward;
        counts[ep.observation] += 1;
    }

    let mut last = UpdateDiagnostics::default();
    for epoch in 0..config.epochs_per_batch {
        let adv = advantages(batch, baseline);
        let (grad, mut diag) = surrogate_gradient(policy, batch, &adv, config.clip_ratio, entropy_coef);
        if !grad.iter().all(|g| g.is_finite()) {
            return Err(PpoError::Divergence {
                epoch,
                diagnostics: diag,
            });
        }
        optimizer.ascend(&mut policy.logits, &grad, config.learning_rate);
        if !policy.logits.iter().all(|z| z.is_finite()) {
            return Err(PpoError::Divergence {
                epoch,
                diagnostics: diag,
            });
        }

        // gradient step of size value_coef on 0.5 * (V - mean reward)^2
        let mut value_loss = 0.0;
        for b in 0..n_buckets {
            if counts[b] > 0 {
                let target = sums[b] / counts[b] as f64;
                let err = baseline.value[b] - target;
                value_loss += counts[b] as f64 * err * err / batch.len() as f64;
                baseline.value[b] -= config.value_coef * err;
            }
        }
        diag.value_loss = value_loss;
        last = diag;
    }
    Ok(last)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::ConfidenceMode;
    use crate::policy::StepRecord;

    fn episode(policy: &TabularPolicy, bucket: usize, action: usize, reward: f64) -> Episode {
        let state = policy.state_index(bucket, 0);
        Episode {
            question_id: 0,
            observation: bucket,
            p_star: 0.5,
            answer_correct: true,
            steps: vec![StepRecord {
                state,
                action,
                behavior_log_prob: policy.log_prob(state, action),
            }],
            reward,
            level: None,
        }
    }

    /// Vanilla REINFORCE gradient with the same advantages, written directly.
    fn vanilla_gradient(policy: &TabularPolicy, batch: &[Episode], adv: &[f64]) -> Vec<f64> {
        let k = policy.n_actions();
        let mut g = vec![0.0; policy.logits.len()];
        for (ep, a) in batch.iter().zip(adv) {
            let s = ep.steps[0].state;
            let p = policy.distribution(s);
            for b in 0..k {
                let ind = (b == ep.steps[0].action) as u8 as f64;
                g[s * k + b] += a * (ind - p[b]) / batch.len() as f64;
            }
        }
        g
    }

    #[test]
    fn first_epoch_matches_vanilla_policy_gradient() {
        let mut policy = TabularPolicy::uniform(ConfidenceMode::SingleToken, 3);
        policy.row_mut(1)[2] = 0.7;
        policy.row_mut(2)[5] = -0.4;
        let batch: Vec<Episode> = (0..30)
            .map(|i| episode(&policy, i % 3, (i * 7) % 13, ((i % 5) as f64 - 2.0) * 0.3))
            .collect();
        let base = ValueBaseline {
            value: vec![0.1, -0.2, 0.05],
        };
        let adv = advantages(&batch, &base);
        let (g, d) = surrogate_gradient(&policy, &batch, &adv, 0.2, 0.0);
        assert!((d.mean_ratio - 1.0).abs() < 1e-12);
        assert_eq!(d.clip_fraction, 0.0);
        let v = vanilla_gradient(&policy, &batch, &adv);
        for (a, b) in g.iter().zip(&v) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn entropy_gradient_matches_finite_differences() {
        let mut policy = TabularPolicy::uniform(ConfidenceMode::SingleToken, 1);
        for (i, z) in policy.row_mut(0).iter_mut().enumerate() {
            *z = (i as f64 * 0.37).sin();
        }
        let batch = vec![episode(&policy, 0, 0, 0.0)];
        let (g, _) = surrogate_gradient(&policy, &batch, &[0.0], 0.2, 1.0);
        let h = 1e-6;
        for b in 0..policy.n_actions() {
            let mut up = policy.clone();
            up.row_mut(0)[b] += h;
            let mut down = policy.clone();
            down.row_mut(0)[b] -= h;
            let fd = (up.entropy(0) - down.entropy(0)) / (2.0 * h);
            assert!((g[b] - fd).abs() < 1e-8, "action {b}: {} vs {fd}", g[b]);
        }
    }

    #[test]
    fn rewarded_action_logit_increases() {
        let mut policy = TabularPolicy::uniform(ConfidenceMode::SingleToken, 1);
        let batch: Vec<Episode> = (0..13 * 4)
            .map(|i| {
                let a = i % 13;
                episode(&policy, 0, a, if a == 6 { 1.0 } else { -1.0 })
            })
            .collect();
        let before = policy.row(0)[6];
        let mut base = ValueBaseline::zeros(1);
        let mut opt = AdamState::new(policy.logits.len());
        ppo_update(&mut policy, &mut base, &mut opt, &batch, &PpoConfig::default(), 0.0).unwrap();
        assert!(policy.row(0)[6] > before);
        for a in (0..13).filter(|&a| a != 6) {
            assert!(policy.row(0)[a] < policy.row(0)[6]);
        }
        assert!((policy.distribution(0).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_advantage_leaves_logits_without_entropy() {
        let mut policy = TabularPolicy::uniform(ConfidenceMode::SingleToken, 2);
        policy.row_mut(0)[3] = 1.5;
        let batch: Vec<Episode> = (0..20).map(|i| episode(&policy, i % 2, i % 13, 0.4)).collect();
        let mut base = ValueBaseline { value: vec![0.4, 0.4] };
        let mut opt = AdamState::new(policy.logits.len());
        let before = policy.clone();
        ppo_update(&mut policy, &mut base, &mut opt, &batch, &PpoConfig::default(), 0.0).unwrap();
        assert_eq!(policy, before);

        // with an entropy bonus only the entropy term moves the logits
        let (g, _) = surrogate_gradient(&policy, &batch, &[0.0; 20], 0.2, 0.01);
        let (g_ent, _) = surrogate_gradient(&policy, &batch[..1], &[0.0], 0.2, 0.01);
        assert!(g.iter().any(|x| *x != 0.0));
        assert!(g_ent.iter().any(|x| *x != 0.0));
        ppo_update(&mut policy, &mut base, &mut opt, &batch, &PpoConfig::default(), 0.01).unwrap();
        assert!(policy.row(0)[3] < before.row(0)[3]);
    }

    #[test]
    fn clipping_stops_gradient_outside_trust_region() {
        let mut policy = TabularPolicy::uniform(ConfidenceMode::SingleToken, 1);
        let batch = vec![episode(&policy, 0, 2, 1.0)];
        policy.row_mut(0)[2] = 2.0; // ratio far above 1 + clip
        let (g, d) = surrogate_gradient(&policy, &batch, &[1.0], 0.2, 0.0);
        assert_eq!(d.clip_fraction, 1.0);
        assert!(g.iter().all(|x| *x == 0.0));
        // a negative advantage is not clipped on that side
        let (g, d) = surrogate_gradient(&policy, &batch, &[-1.0], 0.2, 0.0);
        assert_eq!(d.clip_fraction, 0.0);
        assert!(g[2] < 0.0);
    }

    #[test]
    fn baseline_moves_toward_bucket_mean() {
        let mut policy = TabularPolicy::uniform(ConfidenceMode::SingleToken, 2);
        let batch = vec![episode(&policy, 0, 0, 1.0), episode(&policy, 0, 1, 0.0)];
        let mut base = ValueBaseline::zeros(2);
        let mut opt = AdamState::new(policy.logits.len());
        let cfg = PpoConfig {
            epochs_per_batch: 1,
            ..PpoConfig::default()
        };
        ppo_update(&mut policy, &mut base, &mut opt, &batch, &cfg, 0.0).unwrap();
        assert!((base.value[0] - 0.25).abs() < 1e-15);
        assert_eq!(base.value[1], 0.0);
    }

    #[test]
    fn divergence_and_empty_batch_are_errors() {
        let mut policy = TabularPolicy::uniform(ConfidenceMode::SingleToken, 1);
        let mut base = ValueBaseline::zeros(1);
        let mut opt = AdamState::new(policy.logits.len());
        let cfg = PpoConfig::default();
        assert_eq!(
            ppo_update(&mut policy, &mut base, &mut opt, &[], &cfg, 0.0),
            Err(PpoError::EmptyBatch)
        );
        let batch = vec![episode(&policy, 0, 0, f64::NAN)];
        assert!(matches!(
            ppo_update(&mut policy, &mut base, &mut opt, &batch, &cfg, 0.0),
            Err(PpoError::Divergence { epoch: 0, .. })
        ));
    }

    #[test]
    fn config_problems_name_each_key() {
        let bad = PpoConfig {
            clip_ratio: 1.5,
            batch_size: 0,
            total_episodes: 0,
            ..PpoConfig::default()
        };
        let p = bad.problems();
        assert_eq!(p.len(), 3);
        assert!(PpoConfig::default().validate().is_ok());
    }
}
