//! Answer correctness: exact match or max-over-candidates F1 word overlap.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum JudgeError {
    #[error("no gold candidates to judge against")]
    NoCandidates,
    #[error("threshold must be in (0, 1], got {0}")]
    InvalidThreshold(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JudgeMode {
    Exact,
    #[default]
    #[serde(alias = "f1")]
    F1Overlap,
}

/// Text normalization steps applied before comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Normalization {
    pub strip_punctuation: bool,
    pub remove_articles: bool,
}

impl Default for Normalization {
    fn default() -> Self {
        Self {
            strip_punctuation: true,
            remove_articles: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JudgeConfig {
    pub mode: JudgeMode,
    pub threshold: f64,
    #[serde(default)]
    pub normalization: Normalization,
}

impl Default for JudgeConfig {
    fn default() -> Self {
        Self {
            mode: JudgeMode::F1Overlap,
            threshold: 0.5,
            normalization: Normalization::default(),
        }
    }
}

impl JudgeConfig {
    pub fn exact() -> Self {
        Self {
            mode: JudgeMode::Exact,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), JudgeError> {
        if self.threshold > 0.0 && self.threshold <= 1.0 {
            Ok(())
        } else {
            Err(JudgeError::InvalidThreshold(self.threshold.to_string()))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Judgment {
    pub correct: bool,
    pub score: f64,
    pub matched_candidate: Option<String>,
}

const ARTICLES: [&str; 3] = ["a", "an", "the"];

/// Lowercase, drop punctuation, drop articles, split on whitespace.
pub fn normalize_text(s: &str) -> Vec<String> {
    normalize_with(s, &Normalization::default())
}

pub fn normalize_with(s: &str, opts: &Normalization) -> Vec<String> {
    let lowered = s.trim().to_lowercase();
    let cleaned: String = if opts.strip_punctuation {
        lowered.chars().filter(|c| !is_punctuation(*c)).collect()
    } else {
        lowered
    };
    cleaned
        .split_whitespace()
        .filter(|tok| !(opts.remove_articles && ARTICLES.contains(tok)))
        .map(str::to_owned)
        .collect()
}

fn is_punctuation(c: char) -> bool {
    c.is_ascii_punctuation()
        || matches!(
            c,
            '‘' | '’' | '“' | '”' | '–' | '—' | '…' | '«' | '»' | '¿' | '¡'
        )
}

fn f1_tokens(pred: &[String], gold: &[String]) -> f64 {
    if pred.is_empty() || gold.is_empty() {
        return 0.0;
    }
    let mut gold_counts: HashMap<&str, usize> = HashMap::new();
    for tok in gold {
        *gold_counts.entry(tok.as_str()).or_default() += 1;
    }
    let mut overlap = 0usize;
    for tok in pred {
        if let Some(n) = gold_counts.get_mut(tok.as_str()) {
            if *n > 0 {
                *n -= 1;
                overlap += 1;
            }
        }
    }
    if overlap == 0 {
        return 0.0;
    }
    let precision = overlap as f64 / pred.len() as f64;
    let recall = overlap as f64 / gold.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Multiset word-overlap F1 between two strings.
pub fn f1_overlap(pred: &str, gold: &str) -> f64 {
    f1_tokens(&normalize_text(pred), &normalize_text(gold))
}

/// Best F1 over `candidates`; correct when it reaches the threshold.
pub fn judge_open(pred: &str, candidates: &[String], config: &JudgeConfig) -> Result<Judgment, JudgeError> {
    if candidates.is_empty() {
        return Err(JudgeError::NoCandidates);
    }
    let pred_tokens = normalize_with(pred, &config.normalization);
    let mut best: Option<(usize, f64)> = None;
    for (i, cand) in candidates.iter().enumerate() {
        let score = f1_tokens(&pred_tokens, &normalize_with(cand, &config.normalization));
        if best.is_none_or(|(_, s)| score > s) {
            best = Some((i, score));
        }
    }
    let (idx, score) = best.expect("candidates is non-empty");
    Ok(Judgment {
        correct: score >= config.threshold,
        score,
        matched_candidate: Some(candidates[idx].clone()),
    })
}

/// Exact match after normalization.
pub fn judge_exact(pred: &str, gold: &str) -> Judgment {
    let correct = normalize_text(pred) == normalize_text(gold);
    Judgment {
        correct,
        score: if correct { 1.0 } else { 0.0 },
        matched_candidate: correct.then(|| gold.to_owned()),
    }
}

/// Dispatches on `config.mode`. Exact mode accepts any matching candidate.
pub fn judge(pred: &str, candidates: &[String], config: &JudgeConfig) -> Result<Judgment, JudgeError> {
    match config.mode {
        JudgeMode::F1Overlap => judge_open(pred, candidates, config),
        JudgeMode::Exact => {
            if candidates.is_empty() {
                return Err(JudgeError::NoCandidates);
            }
            let pred_tokens = normalize_with(pred, &config.normalization);
            let hit = candidates
                .iter()
                .find(|c| normalize_with(c, &config.normalization) == pred_tokens);
            Ok(Judgment {
                correct: hit.is_some(),
                score: if hit.is_some() { 1.0 } else { 0.0 },
                matched_candidate: hit.cloned(),
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn strings(xs: &[&str]) -> Vec<String> {
        xs.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn normalization_examples() {
        assert_eq!(normalize_text("The Blue Whale!"), strings(&["blue", "whale"]));
        assert!(normalize_text("").is_empty());
        assert_eq!(normalize_text("  Paris "), strings(&["paris"]));
        assert_eq!(normalize_text("An apple a day"), strings(&["apple", "day"]));
        // Articles are whole tokens only.
        assert_eq!(normalize_text("Theatre"), strings(&["theatre"]));
    }

    #[test]
    fn normalization_is_configurable() {
        let raw = Normalization {
            strip_punctuation: false,
            remove_articles: false,
        };
        assert_eq!(normalize_with("The end.", &raw), strings(&["the", "end."]));
    }

    #[test]
    fn f1_examples() {
        assert_eq!(f1_overlap("blue whale", "the blue whale"), 1.0);
        assert!((f1_overlap("big blue whale", "blue whale") - 0.8).abs() < 1e-15);
        assert_eq!(f1_overlap("x", "y"), 0.0);
        assert_eq!(f1_overlap("", "y"), 0.0);
        assert_eq!(f1_overlap("the", "a"), 0.0);
    }

    #[test]
    fn f1_counts_duplicates_by_min_multiplicity() {
        // pred [new new york], gold [new york]: overlap 2, P = 2/3, R = 1.
        assert!((f1_overlap("new new york", "new york") - 0.8).abs() < 1e-15);
    }

    #[test]
    fn open_judge_examples() {
        let cfg = JudgeConfig::default();
        let j = judge_open("blue whale", &strings(&["fin whale", "blue whale"]), &cfg).unwrap();
        assert!(j.correct);
        assert_eq!(j.score, 1.0);
        assert_eq!(j.matched_candidate.as_deref(), Some("blue whale"));

        let j = judge_open("red panda", &strings(&["blue whale"]), &cfg).unwrap();
        assert!(!j.correct);
        assert_eq!(j.score, 0.0);

        let j = judge_open("big blue whale", &strings(&["blue whale"]), &cfg).unwrap();
        assert!(j.correct);
        assert!((j.score - 0.8).abs() < 1e-15);

        assert_eq!(judge_open("x", &[], &cfg), Err(JudgeError::NoCandidates));
    }

    #[test]
    fn open_judge_tie_keeps_first_candidate() {
        let cfg = JudgeConfig::default();
        let j = judge_open("whale", &strings(&["blue whale", "fin whale"]), &cfg).unwrap();
        assert_eq!(j.matched_candidate.as_deref(), Some("blue whale"));
    }

    #[test]
    fn exact_examples() {
        assert!(judge_exact("B", "B").correct);
        assert!(judge_exact("b", "B").correct);
        assert!(!judge_exact("B", "C").correct);
        assert_eq!(judge_exact("B", "C").score, 0.0);
    }

    #[test]
    fn dispatch_exact_over_candidates() {
        let cfg = JudgeConfig::exact();
        let j = judge("c", &strings(&["A", "C"]), &cfg).unwrap();
        assert!(j.correct);
        assert_eq!(j.matched_candidate.as_deref(), Some("C"));
        assert!(!judge("d", &strings(&["A", "C"]), &cfg).unwrap().correct);
    }

    #[test]
    fn threshold_validation() {
        assert!(JudgeConfig::default().validate().is_ok());
        let bad = JudgeConfig {
            threshold: 0.0,
            ..JudgeConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
