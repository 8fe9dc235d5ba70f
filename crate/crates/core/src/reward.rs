//! Clipped logarithmic scoring-rule reward.
//!
//! A correct answer stated with confidence `p` earns `ln p`, an incorrect one
//! `ln(1 - p)`, with `p` clipped into `[ε, 1 - ε]`. The log score is a proper
//! scoring rule: its expectation under a true correctness probability `p*` is
//! maximized by reporting `p = p*`. Training rewards are the affine image of
//! the raw score that sends `[ln ε, ln(1 - ε)]` onto `[norm_low, norm_high]`,
//! multiplied by `scale`. Affine maps keep the argmax, so the normalized
//! reward is still proper.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Highest verbalized confidence level.
pub const MAX_LEVEL: u8 = 10;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RewardError {
    #[error("probability {0} is outside [0, 1]")]
    ProbabilityOutOfRange(f64),
    #[error("confidence level {0} is outside 0..=10")]
    LevelOutOfRange(u32),
    #[error("grid needs at least 2 points, got {0}")]
    GridTooSmall(usize),
    #[error("invalid reward spec: {0}")]
    InvalidSpec(String),
}

/// An integer confidence token in `0..=10`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct ConfidenceLevel(u8);

impl ConfidenceLevel {
    pub fn new(level: u32) -> Result<Self, RewardError> {
        if level > MAX_LEVEL as u32 {
            return Err(RewardError::LevelOutOfRange(level));
        }
        Ok(Self(level as u8))
    }

    pub fn value(self) -> u8 {
        self.0
    }

    /// `level / 10`.
    pub fn normalized(self) -> f64 {
        self.0 as f64 / MAX_LEVEL as f64
    }

    pub fn all() -> impl Iterator<Item = ConfidenceLevel> {
        (0..=MAX_LEVEL).map(ConfidenceLevel)
    }
}

impl TryFrom<u8> for ConfidenceLevel {
    type Error = RewardError;
    fn try_from(v: u8) -> Result<Self, Self::Error> {
        Self::new(v as u32)
    }
}

impl From<ConfidenceLevel> for u8 {
    fn from(c: ConfidenceLevel) -> u8 {
        c.0
    }
}

impl std::fmt::Display for ConfidenceLevel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Reward shaping constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardSpec {
    pub epsilon: f64,
    pub norm_low: f64,
    pub norm_high: f64,
    pub scale: f64,
    /// Reward for responses without a parseable confidence. Never normalized or scaled.
    pub out_of_format: f64,
}

impl Default for RewardSpec {
    fn default() -> Self {
        Self {
            epsilon: 0.001,
            norm_low: -1.0,
            norm_high: 1.0,
            scale: 1.0,
            out_of_format: -3.0,
        }
    }
}

impl RewardSpec {
    /// Defaults with the x5 spread used when one question yields several answers.
    pub fn multi_answer() -> Self {
        Self {
            scale: 5.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), RewardError> {
        let mut problems = Vec::new();
        if !(self.epsilon > 0.0 && self.epsilon < 0.5) {
            problems.push(format!("epsilon must be in (0, 0.5), got {}", self.epsilon));
        }
        if !(self.norm_low < self.norm_high) || !self.norm_low.is_finite() || !self.norm_high.is_finite() {
            problems.push(format!(
                "norm_low ({}) must be below norm_high ({})",
                self.norm_low, self.norm_high
            ));
        }
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            problems.push(format!("scale must be positive, got {}", self.scale));
        }
        if !self.out_of_format.is_finite() {
            problems.push("out_of_format must be finite".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(RewardError::InvalidSpec(problems.join("; ")))
        }
    }

    /// Raw reward range `[ln ε, ln(1 - ε)]`.
    pub fn raw_bounds(&self) -> (f64, f64) {
        (self.epsilon.ln(), (1.0 - self.epsilon).ln())
    }

    /// Affine map from raw log score to the training reward.
    pub fn normalize_raw(&self, raw: f64) -> f64 {
        let (lo, hi) = self.raw_bounds();
        let unit = (raw - lo) / (hi - lo);
        self.scale * (self.norm_low + (self.norm_high - self.norm_low) * unit)
    }
}

/// Both sides of the normalization, kept for auditing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardOutcome {
    pub raw: f64,
    pub normalized: f64,
    pub clipped_at_bound: bool,
}

fn check_probability(p: f64) -> Result<(), RewardError> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(RewardError::ProbabilityOutOfRange(p))
    }
}

/// `min(max(p, ε), 1 - ε)`.
pub fn clip_confidence(p_hat: f64, spec: &RewardSpec) -> Result<f64, RewardError> {
    check_probability(p_hat)?;
    Ok(p_hat.clamp(spec.epsilon, 1.0 - spec.epsilon))
}

/// Log score of a single outcome, natural log.
pub fn raw_log_reward(correct: bool, p_hat: f64, spec: &RewardSpec) -> Result<f64, RewardError> {
    check_probability(p_hat)?;
    // Clip the probability assigned to the realised outcome. The clip
    // interval is symmetric, so this equals ln(1 - clip(p)) for misses
    // without the rounding of `1 - (1 - ε)`.
    let assigned = if correct { p_hat } else { 1.0 - p_hat };
    Ok(clip_confidence(assigned, spec)?.ln())
}

pub fn normalized_reward(correct: bool, level: ConfidenceLevel, spec: &RewardSpec) -> RewardOutcome {
    let p = level.normalized();
    let raw = raw_log_reward(correct, p, spec).expect("levels map into [0, 1]");
    RewardOutcome {
        raw,
        normalized: spec.normalize_raw(raw),
        clipped_at_bound: p < spec.epsilon || p > 1.0 - spec.epsilon,
    }
}

pub fn out_of_format_reward(spec: &RewardSpec) -> f64 {
    spec.out_of_format
}

/// Expected raw log score when the answer is correct with probability `p_star`.
pub fn expected_reward(p_star: f64, p_hat: f64, spec: &RewardSpec) -> Result<f64, RewardError> {
    check_probability(p_star)?;
    let hit = raw_log_reward(true, p_hat, spec)?;
    let miss = raw_log_reward(false, p_hat, spec)?;
    Ok(p_star * hit + (1.0 - p_star) * miss)
}

/// `i / (grid_size - 1)` for `i in 0..grid_size`.
pub fn confidence_grid(grid_size: usize) -> Result<Vec<f64>, RewardError> {
    if grid_size < 2 {
        return Err(RewardError::GridTooSmall(grid_size));
    }
    let last = (grid_size - 1) as f64;
    Ok((0..grid_size).map(|i| i as f64 / last).collect())
}

/// Brute-force argmax of [`expected_reward`] over a uniform grid on `[0, 1]`.
/// Ties go to the smaller confidence.
pub fn optimal_confidence(p_star: f64, grid_size: usize, spec: &RewardSpec) -> Result<f64, RewardError> {
    check_probability(p_star)?;
    let grid = confidence_grid(grid_size)?;
    let mut best = (grid[0], expected_reward(p_star, grid[0], spec)?);
    for &p in &grid[1..] {
        let value = expected_reward(p_star, p, spec)?;
        if value > best.1 {
            best = (p, value);
        }
    }
    Ok(best.0)
}

/// Level with the highest expected normalized reward at `p_star`; ties to the lower level.
pub fn optimal_level(p_star: f64, spec: &RewardSpec) -> Result<ConfidenceLevel, RewardError> {
    check_probability(p_star)?;
    let mut best = (ConfidenceLevel(0), f64::NEG_INFINITY);
    for level in ConfidenceLevel::all() {
        let hit = normalized_reward(true, level, spec).normalized;
        let miss = normalized_reward(false, level, spec).normalized;
        let value = p_star * hit + (1.0 - p_star) * miss;
        if value > best.1 {
            best = (level, value);
        }
    }
    Ok(best.0)
}
