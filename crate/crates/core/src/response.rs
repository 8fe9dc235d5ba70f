//! The `Answer: <answer>, Confidence: <confidence>` response grammar and the
//! scoring path from raw text to reward.

use std::ops::Range;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::judge::{judge, JudgeConfig, JudgeError, Judgment};
use crate::reward::{normalized_reward, out_of_format_reward, ConfidenceLevel, RewardSpec};

static LINE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?i)^\s*answer\s*:\s*(.*?)\s*,\s*confidence\s*:\s*(\d+)\s*$").expect("static regex")
});

/// Text that does not follow the grammar, with its byte range in the input.
#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[error("format error at bytes {}..{}: {reason}: {text:?}", span.start, span.end)]
pub struct FormatError {
    pub span: Range<usize>,
    pub text: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedAnswer {
    pub answer: String,
    pub confidence: ConfidenceLevel,
}

fn trimmed_span(raw: &str, offset: usize) -> (Range<usize>, &str) {
    let start = raw.len() - raw.trim_start().len();
    let t = raw.trim();
    (offset + start..offset + start + t.len(), t)
}

fn parse_line(raw: &str, offset: usize) -> Result<ParsedAnswer, FormatError> {
    let (span, text) = trimmed_span(raw, offset);
    let err = |reason: &str| FormatError {
        span: span.clone(),
        text: text.to_owned(),
        reason: reason.to_owned(),
    };
    let caps = LINE
        .captures(raw)
        .ok_or_else(|| err("expected `Answer: <answer>, Confidence: <0-10>`"))?;
    let answer = caps[1].trim();
    if answer.is_empty() {
        return Err(err("empty answer"));
    }
    let confidence = caps[2]
        .parse::<u32>()
        .ok()
        .and_then(|v| ConfidenceLevel::new(v).ok())
        .ok_or_else(|| err("confidence must be an integer from 0 to 10"))?;
    Ok(ParsedAnswer {
        answer: answer.to_owned(),
        confidence,
    })
}

/// Parses a single-answer response. Matching is case-insensitive and
/// tolerates surrounding whitespace.
pub fn parse_single(raw: &str) -> Result<ParsedAnswer, FormatError> {
    parse_line(raw, 0)
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MultiParse {
    pub answers: Vec<ParsedAnswer>,
    pub errors: Vec<FormatError>,
}

/// Parses one `Answer: ..., Confidence: ...` per non-empty line, in order.
pub fn parse_multi(raw: &str) -> MultiParse {
    let mut out = MultiParse::default();
    let mut offset = 0;
    for line in raw.split_inclusive('\n') {
        if !line.trim().is_empty() {
            match parse_line(line.trim_end_matches(['\n', '\r']), offset) {
                Ok(a) => out.answers.push(a),
                Err(e) => out.errors.push(e),
            }
        }
        offset += line.len();
    }
    out
}

pub fn format_response(answer: &str, confidence: ConfidenceLevel) -> String {
    format!("Answer: {answer}, Confidence: {confidence}")
}

/// Result of scoring one response (or one fact of a multi-answer response).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredResponse {
    pub parsed: Option<ParsedAnswer>,
    pub judgment: Option<Judgment>,
    pub reward: f64,
}

/// Parse, judge and reward a single-answer response. Text outside the
/// grammar earns the out-of-format penalty.
pub fn score_single(
    raw: &str,
    candidates: &[String],
    judge_config: &JudgeConfig,
    reward: &RewardSpec,
) -> Result<ScoredResponse, JudgeError> {
    match parse_single(raw) {
        Ok(parsed) => score_parsed(parsed, candidates, judge_config, reward),
        Err(_) => Ok(ScoredResponse {
            parsed: None,
            judgment: None,
            reward: out_of_format_reward(reward),
        }),
    }
}

/// One reward per fact line; malformed lines each earn the penalty.
pub fn score_multi(
    raw: &str,
    candidates: &[String],
    judge_config: &JudgeConfig,
    reward: &RewardSpec,
) -> Result<Vec<ScoredResponse>, JudgeError> {
    let parsed = parse_multi(raw);
    let mut out = Vec::with_capacity(parsed.answers.len() + parsed.errors.len());
    for a in parsed.answers {
        out.push(score_parsed(a, candidates, judge_config, reward)?);
    }
    out.extend(parsed.errors.iter().map(|_| ScoredResponse {
        parsed: None,
        judgment: None,
        reward: out_of_format_reward(reward),
    }));
    Ok(out)
}

fn score_parsed(
    parsed: ParsedAnswer,
    candidates: &[String],
    judge_config: &JudgeConfig,
    reward: &RewardSpec,
) -> Result<ScoredResponse, JudgeError> {
    let judgment = judge(&parsed.answer, candidates, judge_config)?;
    let r = normalized_reward(judgment.correct, parsed.confidence, reward).normalized;
    Ok(ScoredResponse {
        parsed: Some(parsed),
        judgment: Some(judgment),
        reward: r,
    })
}
