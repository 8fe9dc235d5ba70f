//! Flat `key = value` run configuration (TOML syntax).
//!
//! Every key is optional and has a documented default. Unknown keys, type
//! mismatches and constraint violations are all collected, so one pass
//! reports every problem.

use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;
use toml::{Table, Value};

use crate::env::{ConfidenceMode, Environment, Prior, WorldSpec};
use crate::judge::{JudgeConfig, JudgeMode, Normalization};
use crate::metrics::{Binning, ReportOptions};
use crate::policy::ActionSelection;
use crate::ppo::PpoConfig;
use crate::reward::{ConfidenceLevel, RewardSpec};
use crate::train::{InitBias, TrainConfig, TrainSchedule};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config is not valid TOML: {0}")]
    Syntax(String),
    #[error("invalid config:\n  {}", .0.join("\n  "))]
    Invalid(Vec<String>),
}

impl ConfigError {
    pub fn problems(&self) -> Vec<String> {
        match self {
            ConfigError::Invalid(p) => p.clone(),
            other => vec![other.to_string()],
        }
    }
}

/// `bins` setting: automatic or a fixed binning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum BinsSetting {
    Auto,
    Fixed(Binning),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    // world
    pub n_buckets: usize,
    /// `beta`, `uniform` or `point`.
    pub prior: String,
    pub prior_alpha: f64,
    pub prior_beta: f64,
    pub prior_point: f64,
    pub observation_noise_sigma: f64,
    /// `single_token` or `digit_sequence`.
    pub confidence_mode: String,
    pub seed: u64,
    // reward
    pub epsilon: f64,
    pub norm_low: f64,
    pub norm_high: f64,
    pub reward_scale: f64,
    pub out_of_format_reward: f64,
    // ppo
    pub clip_ratio: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs_per_batch: usize,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub total_episodes: usize,
    // schedule
    pub eval_every: usize,
    pub window_eval_episodes: usize,
    pub heldout_episodes: usize,
    /// `greedy` or `sample`.
    pub eval_selection: String,
    pub entropy_decay_fraction: f64,
    pub final_learning_rate_fraction: f64,
    /// Level to bias the initial policy toward; negative disables.
    pub init_bias_level: i64,
    pub init_bias_amount: f64,
    // judge
    /// `exact` or `f1`.
    pub judge_mode: String,
    pub judge_threshold: f64,
    pub strip_punctuation: bool,
    pub remove_articles: bool,
    // metrics
    /// `auto`, `discrete` or a number of equal-width bins.
    pub bins: String,
    pub bootstrap_resamples: usize,
    pub ci_alpha: f64,
    // output
    pub out_dir: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        let world = WorldSpec::default();
        let reward = RewardSpec::default();
        let ppo = PpoConfig::default();
        let schedule = TrainSchedule::default();
        let judge = JudgeConfig::default();
        Self {
            n_buckets: world.n_buckets,
            prior: "beta".into(),
            prior_alpha: 2.0,
            prior_beta: 2.0,
            prior_point: 0.5,
            observation_noise_sigma: world.observation_noise_sigma,
            confidence_mode: "single_token".into(),
            seed: ppo.seed,
            epsilon: reward.epsilon,
            norm_low: reward.norm_low,
            norm_high: reward.norm_high,
            reward_scale: reward.scale,
            out_of_format_reward: reward.out_of_format,
            clip_ratio: ppo.clip_ratio,
            learning_rate: ppo.learning_rate,
            batch_size: ppo.batch_size,
            epochs_per_batch: ppo.epochs_per_batch,
            entropy_coef: ppo.entropy_coef,
            value_coef: ppo.value_coef,
            total_episodes: ppo.total_episodes,
            eval_every: schedule.eval_every,
            window_eval_episodes: schedule.window_eval_episodes,
            heldout_episodes: schedule.heldout_episodes,
            eval_selection: "greedy".into(),
            entropy_decay_fraction: schedule.entropy_decay_fraction,
            final_learning_rate_fraction: schedule.final_learning_rate_fraction,
            init_bias_level: -1,
            init_bias_amount: 0.0,
            judge_mode: "f1".into(),
            judge_threshold: judge.threshold,
            strip_punctuation: judge.normalization.strip_punctuation,
            remove_articles: judge.normalization.remove_articles,
            bins: "auto".into(),
            bootstrap_resamples: 1000,
            ci_alpha: 0.05,
            out_dir: "runs/default".into(),
        }
    }
}

struct Reader<'a> {
    table: &'a Table,
    problems: Vec<String>,
}

impl Reader<'_> {
    fn float(&mut self, key: &str, slot: &mut f64) {
        match self.table.get(key) {
            None => {}
            Some(Value::Float(f)) => *slot = *f,
            Some(Value::Integer(i)) => *slot = *i as f64,
            Some(v) => self.problems.push(format!("{key}: expected a number, got {}", v.type_str())),
        }
    }

    fn count(&mut self, key: &str, slot: &mut usize) {
        match self.table.get(key) {
            None => {}
            Some(Value::Integer(i)) if *i >= 0 => *slot = *i as usize,
            Some(v) => self
                .problems
                .push(format!("{key}: expected a non-negative integer, got {v}")),
        }
    }

    fn int(&mut self, key: &str, slot: &mut i64) {
        match self.table.get(key) {
            None => {}
            Some(Value::Integer(i)) => *slot = *i,
            Some(v) => self.problems.push(format!("{key}: expected an integer, got {}", v.type_str())),
        }
    }

    fn string(&mut self, key: &str, slot: &mut String) {
        match self.table.get(key) {
            None => {}
            Some(Value::String(s)) => *slot = s.clone(),
            // `bins = 15` is natural to write
            Some(Value::Integer(i)) if key == "bins" => *slot = i.to_string(),
            Some(v) => self.problems.push(format!("{key}: expected a string, got {}", v.type_str())),
        }
    }

    fn boolean(&mut self, key: &str, slot: &mut bool) {
        match self.table.get(key) {
            None => {}
            Some(Value::Boolean(b)) => *slot = *b,
            Some(v) => self.problems.push(format!("{key}: expected a boolean, got {}", v.type_str())),
        }
    }
}

const KEYS: &[&str] = &[
    "n_buckets",
    "prior",
    "prior_alpha",
    "prior_beta",
    "prior_point",
    "observation_noise_sigma",
    "confidence_mode",
    "seed",
    "epsilon",
    "norm_low",
    "norm_high",
    "reward_scale",
    "out_of_format_reward",
    "clip_ratio",
    "learning_rate",
    "batch_size",
    "epochs_per_batch",
    "entropy_coef",
    "value_coef",
    "total_episodes",
    "eval_every",
    "window_eval_episodes",
    "heldout_episodes",
    "eval_selection",
    "entropy_decay_fraction",
    "final_learning_rate_fraction",
    "init_bias_level",
    "init_bias_amount",
    "judge_mode",
    "judge_threshold",
    "strip_punctuation",
    "remove_articles",
    "bins",
    "bootstrap_resamples",
    "ci_alpha",
    "out_dir",
];

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_owned(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let table: Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Syntax(e.to_string()))?;
        let mut r = Reader {
            table: &table,
            problems: Vec::new(),
        };
        for key in table.keys() {
            if !KEYS.contains(&key.as_str()) {
                r.problems.push(format!("{key}: unknown key"));
            }
        }
        let mut c = RunConfig::default();
        r.count("n_buckets", &mut c.n_buckets);
        r.string("prior", &mut c.prior);
        r.float("prior_alpha", &mut c.prior_alpha);
        r.float("prior_beta", &mut c.prior_beta);
        r.float("prior_point", &mut c.prior_point);
        r.float("observation_noise_sigma", &mut c.observation_noise_sigma);
        r.string("confidence_mode", &mut c.confidence_mode);
        let mut seed = c.seed as i64;
        r.int("seed", &mut seed);
        if seed < 0 {
            r.problems.push(format!("seed: must be non-negative, got {seed}"));
        } else {
            c.seed = seed as u64;
        }
        r.float("epsilon", &mut c.epsilon);
        r.float("norm_low", &mut c.norm_low);
        r.float("norm_high", &mut c.norm_high);
        r.float("reward_scale", &mut c.reward_scale);
        r.float("out_of_format_reward", &mut c.out_of_format_reward);
        r.float("clip_ratio", &mut c.clip_ratio);
        r.float("learning_rate", &mut c.learning_rate);
        r.count("batch_size", &mut c.batch_size);
        r.count("epochs_per_batch", &mut c.epochs_per_batch);
        r.float("entropy_coef", &mut c.entropy_coef);
        r.float("value_coef", &mut c.value_coef);
        r.count("total_episodes", &mut c.total_episodes);
        r.count("eval_every", &mut c.eval_every);
        r.count("window_eval_episodes", &mut c.window_eval_episodes);
        r.count("heldout_episodes", &mut c.heldout_episodes);
        r.string("eval_selection", &mut c.eval_selection);
        r.float("entropy_decay_fraction", &mut c.entropy_decay_fraction);
        r.float("final_learning_rate_fraction", &mut c.final_learning_rate_fraction);
        r.int("init_bias_level", &mut c.init_bias_level);
        r.float("init_bias_amount", &mut c.init_bias_amount);
        r.string("judge_mode", &mut c.judge_mode);
        r.float("judge_threshold", &mut c.judge_threshold);
        r.boolean("strip_punctuation", &mut c.strip_punctuation);
        r.boolean("remove_articles", &mut c.remove_articles);
        r.string("bins", &mut c.bins);
        r.count("bootstrap_resamples", &mut c.bootstrap_resamples);
        r.float("ci_alpha", &mut c.ci_alpha);
        r.string("out_dir", &mut c.out_dir);

        let mut problems = r.problems;
        problems.extend(c.problems());
        if problems.is_empty() {
            Ok(c)
        } else {
            Err(ConfigError::Invalid(problems))
        }
    }

    /// Constraint violations, one message per key.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if let Err(e) = self.world() {
            out.push(e);
        } else if let Err(e) = self.world().unwrap().validate() {
            out.push(e.to_string());
        }
        if let Err(e) = self.reward().validate() {
            out.push(e.to_string());
        }
        out.extend(self.train_config_unchecked().problems());
        if let Err(e) = self.eval_selection() {
            out.push(e);
        }
        if let Err(e) = self.init_bias() {
            out.push(e);
        }
        match self.judge_config() {
            Ok(j) => {
                if let Err(e) = j.validate() {
                    out.push(format!("judge_threshold: {e}"));
                }
            }
            Err(e) => out.push(e),
        }
        if let Err(e) = self.bins_setting() {
            out.push(e);
        }
        if !(self.ci_alpha > 0.0 && self.ci_alpha < 1.0) {
            out.push(format!("ci_alpha: must be in (0, 1), got {}", self.ci_alpha));
        }
        out
    }

    fn world(&self) -> Result<WorldSpec, String> {
        let prior = match self.prior.as_str() {
            "beta" => Prior::Beta {
                alpha: self.prior_alpha,
                beta: self.prior_beta,
            },
            "uniform" => Prior::Uniform,
            "point" => Prior::Point { p: self.prior_point },
            other => return Err(format!("prior: expected beta, uniform or point, got {other:?}")),
        };
        let confidence_mode = match self.confidence_mode.as_str() {
            "single_token" => ConfidenceMode::SingleToken,
            "digit_sequence" => ConfidenceMode::DigitSequence,
            other => {
                return Err(format!(
                    "confidence_mode: expected single_token or digit_sequence, got {other:?}"
                ))
            }
        };
        Ok(WorldSpec {
            n_buckets: self.n_buckets,
            prior,
            observation_noise_sigma: self.observation_noise_sigma,
            seed: self.seed,
            confidence_mode,
        })
    }

    pub fn reward(&self) -> RewardSpec {
        RewardSpec {
            epsilon: self.epsilon,
            norm_low: self.norm_low,
            norm_high: self.norm_high,
            scale: self.reward_scale,
            out_of_format: self.out_of_format_reward,
        }
    }

    pub fn environment(&self) -> Result<Environment, ConfigError> {
        let world = self.world().map_err(|e| ConfigError::Invalid(vec![e]))?;
        Environment::new(world, self.reward()).map_err(|e| ConfigError::Invalid(vec![e.to_string()]))
    }

    fn eval_selection(&self) -> Result<ActionSelection, String> {
        match self.eval_selection.as_str() {
            "greedy" => Ok(ActionSelection::Greedy),
            "sample" => Ok(ActionSelection::Sample),
            other => Err(format!("eval_selection: expected greedy or sample, got {other:?}")),
        }
    }

    fn init_bias(&self) -> Result<Option<InitBias>, String> {
        if self.init_bias_level < 0 {
            return Ok(None);
        }
        let level = ConfidenceLevel::new(self.init_bias_level as u32)
            .map_err(|_| format!("init_bias_level: must be -1 or 0..=10, got {}", self.init_bias_level))?;
        Ok(Some(InitBias {
            level,
            amount: self.init_bias_amount,
        }))
    }

    fn train_config_unchecked(&self) -> TrainConfig {
        TrainConfig {
            ppo: PpoConfig {
                clip_ratio: self.clip_ratio,
                learning_rate: self.learning_rate,
                batch_size: self.batch_size,
                epochs_per_batch: self.epochs_per_batch,
                entropy_coef: self.entropy_coef,
                value_coef: self.value_coef,
                total_episodes: self.total_episodes,
                seed: self.seed,
            },
            schedule: TrainSchedule {
                eval_every: self.eval_every,
                window_eval_episodes: self.window_eval_episodes,
                heldout_episodes: self.heldout_episodes,
                eval_selection: self.eval_selection().unwrap_or_default(),
                entropy_decay_fraction: self.entropy_decay_fraction,
                final_learning_rate_fraction: self.final_learning_rate_fraction,
                init_bias: self.init_bias().unwrap_or(None),
            },
        }
    }

    pub fn train_config(&self) -> Result<TrainConfig, ConfigError> {
        let p = self.problems();
        if p.is_empty() {
            Ok(self.train_config_unchecked())
        } else {
            Err(ConfigError::Invalid(p))
        }
    }

    pub fn judge_config(&self) -> Result<JudgeConfig, String> {
        let mode = parse_judge_mode(&self.judge_mode)?;
        Ok(JudgeConfig {
            mode,
            threshold: self.judge_threshold,
            normalization: Normalization {
                strip_punctuation: self.strip_punctuation,
                remove_articles: self.remove_articles,
            },
        })
    }

    pub fn bins_setting(&self) -> Result<BinsSetting, String> {
        parse_bins(&self.bins)
    }

    pub fn report_options(&self) -> ReportOptions {
        ReportOptions {
            binning: match self.bins_setting() {
                Ok(BinsSetting::Fixed(b)) => Some(b),
                _ => None,
            },
            bootstrap_resamples: self.bootstrap_resamples,
            alpha: self.ci_alpha,
            seed: self.seed,
            ..ReportOptions::default()
        }
    }

    /// Fully resolved configuration, loadable by [`RunConfig::from_toml_str`].
    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("flat config serializes")
    }
}

pub fn parse_judge_mode(s: &str) -> Result<JudgeMode, String> {
    match s {
        "exact" => Ok(JudgeMode::Exact),
        "f1" | "f1_overlap" => Ok(JudgeMode::F1Overlap),
        other => Err(format!("judge_mode: expected exact or f1, got {other:?}")),
    }
}

pub fn parse_bins(s: &str) -> Result<BinsSetting, String> {
    if s == "auto" {
        return Ok(BinsSetting::Auto);
    }
    s.parse::<Binning>()
        .map(BinsSetting::Fixed)
        .map_err(|e| format!("bins: {e}"))
}
