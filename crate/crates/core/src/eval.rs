//! Offline evaluation of model-response logs.
//!
//! Input is JSONL, one question per line:
//!
//! ```json
//! {"schema_version": 1, "id": "q7", "raw_response": "Answer: Paris, Confidence: 8", "gold_candidates": ["Paris"]}
//! ```
//!
//! `raw_response` may be replaced by pre-parsed `answer` and `confidence`
//! (single format) or by `facts: [{"answer": ..., "confidence": ...}]`
//! (multi format). Responses are parsed, judged against `gold_candidates`
//! and turned into scored samples; format errors are excluded from the
//! metrics and listed with their line numbers.

use std::collections::BTreeMap;
use std::fmt;
use std::io::BufRead;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec;
use crate::judge::{judge, JudgeConfig, JudgeError};
use crate::metrics::{self, CalibrationReport, MetricsError, ReportOptions, ScoredSample};
use crate::report::REPORT_SCHEMA_VERSION;
use crate::response::{parse_multi, parse_single, FormatError, ParsedAnswer};
use crate::reward::{normalized_reward, out_of_format_reward, ConfidenceLevel, RewardSpec};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("reading input: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {source}")]
    Judge {
        line: usize,
        #[source]
        source: JudgeError,
    },
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputFormat {
    #[default]
    Single,
    Multi,
}

impl fmt::Display for InputFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InputFormat::Single => "single",
            InputFormat::Multi => "multi",
        })
    }
}

impl FromStr for InputFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "single" => Ok(InputFormat::Single),
            "multi" => Ok(InputFormat::Multi),
            other => Err(format!("unknown format {other:?}; expected single or multi")),
        }
    }
}

/// Question identifier as given in the input.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RowId {
    Number(i64),
    Text(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreParsedFact {
    pub answer: Option<String>,
    pub confidence: Option<i64>,
}

/// One JSONL record.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputRow {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schema_version: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<RowId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_response: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidence: Option<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub facts: Option<Vec<PreParsedFact>>,
    pub gold_candidates: Vec<String>,
}

/// A row with the 1-based line it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct NumberedRow {
    pub line: usize,
    pub row: InputRow,
}

/// Reads JSONL; blank lines are skipped, anything else must be a valid row.
pub fn read_rows<R: BufRead>(reader: R) -> Result<Vec<NumberedRow>, EvalError> {
    let mut rows = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let text = line?;
        if text.trim().is_empty() {
            continue;
        }
        let row: InputRow = serde_json::from_str(&text).map_err(|e| EvalError::Malformed {
            line: line_no,
            message: e.to_string(),
        })?;
        if let Some(v) = row.schema_version {
            if v != REPORT_SCHEMA_VERSION {
                return Err(EvalError::Malformed {
                    line: line_no,
                    message: format!("unsupported schema_version {v}; expected {REPORT_SCHEMA_VERSION}"),
                });
            }
        }
        rows.push(NumberedRow { line: line_no, row });
    }
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub format: InputFormat,
    pub judge: JudgeConfig,
    pub reward: RewardSpec,
    pub report: ReportOptions,
}

impl EvalOptions {
    /// Default judge and report settings; multi format uses the ×5 reward scale.
    pub fn new(format: InputFormat) -> Self {
        Self {
            format,
            judge: JudgeConfig::default(),
            reward: match format {
                InputFormat::Single => RewardSpec::default(),
                InputFormat::Multi => RewardSpec::multi_answer(),
            },
            report: ReportOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactResult {
    pub answer: String,
    pub confidence: ConfidenceLevel,
    pub correct: bool,
    pub judge_score: f64,
    pub reward: f64,
}

/// A response (or response line) outside the grammar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FormatErrorEntry {
    pub line: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub id: Option<RowId>,
    pub reason: String,
    pub text: String,
    /// Byte range within `raw_response`, when one was given.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub span: Option<[usize; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowResult {
    pub line: usize,
    pub id: Option<RowId>,
    pub facts: Vec<FactResult>,
    pub format_errors: Vec<FormatErrorEntry>,
}

/// Question-level view: each question's facts are averaged first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerQuestionSummary {
    pub questions: usize,
    /// Questions with at least one scored fact.
    pub questions_scored: usize,
    #[serde(with = "metrics::undefined")]
    pub mean_accuracy: Option<f64>,
    #[serde(with = "metrics::undefined")]
    pub mean_confidence: Option<f64>,
    #[serde(with = "metrics::undefined")]
    pub all_facts_correct_rate: Option<f64>,
    pub mean_reward: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub format: InputFormat,
    pub judge: JudgeConfig,
    pub rows: usize,
    /// Items that could have been scored: facts plus format errors.
    pub items: usize,
    pub format_error_count: usize,
    pub format_error_rate: f64,
    pub format_errors: Vec<FormatErrorEntry>,
    /// Mean training-style reward per item, format errors at the penalty.
    pub mean_reward: f64,
    /// Metrics over every scored fact.
    pub per_fact: CalibrationReport,
    pub per_question: PerQuestionSummary,
}

fn fact(parsed: ParsedAnswer, candidates: &[String], opts: &EvalOptions) -> Result<FactResult, JudgeError> {
    let j = judge(&parsed.answer, candidates, &opts.judge)?;
    Ok(FactResult {
        reward: normalized_reward(j.correct, parsed.confidence, &opts.reward).normalized,
        answer: parsed.answer,
        confidence: parsed.confidence,
        correct: j.correct,
        judge_score: j.score,
    })
}

fn pre_parsed(f: &PreParsedFact) -> Result<ParsedAnswer, String> {
    let answer = match f.answer.as_deref().map(str::trim) {
        Some(a) if !a.is_empty() => a.to_owned(),
        _ => return Err("missing answer".into()),
    };
    let confidence = f
        .confidence
        .and_then(|c| u32::try_from(c).ok())
        .and_then(|c| ConfidenceLevel::new(c).ok())
        .ok_or_else(|| "confidence must be an integer from 0 to 10".to_string())?;
    Ok(ParsedAnswer { answer, confidence })
}

/// Parses and judges one row. Format problems are data, not errors.
pub fn score_row(r: &NumberedRow, opts: &EvalOptions) -> Result<RowResult, EvalError> {
    let row = &r.row;
    let malformed = |message: &str| EvalError::Malformed {
        line: r.line,
        message: message.to_owned(),
    };
    if row.gold_candidates.is_empty() {
        return Err(malformed("gold_candidates must not be empty"));
    }
    let has_pre = row.answer.is_some() || row.confidence.is_some();
    let sources = [row.raw_response.is_some(), has_pre, row.facts.is_some()];
    if sources.iter().filter(|&&b| b).count() != 1 {
        return Err(malformed(
            "exactly one of raw_response, answer/confidence or facts must be given",
        ));
    }
    if opts.format == InputFormat::Single && row.facts.is_some() {
        return Err(malformed("facts requires --format multi"));
    }
    if opts.format == InputFormat::Multi && has_pre {
        return Err(malformed("answer/confidence requires --format single; use facts"));
    }

    let entry = |reason: String, text: String, span: Option<[usize; 2]>| FormatErrorEntry {
        line: r.line,
        id: row.id.clone(),
        reason,
        text,
        span,
    };
    let from_format_error =
        |e: FormatError| entry(e.reason, e.text, Some([e.span.start, e.span.end]));

    let mut parsed = Vec::new();
    let mut errors = Vec::new();
    match (opts.format, &row.raw_response, &row.facts) {
        (InputFormat::Single, Some(raw), _) => match parse_single(raw) {
            Ok(p) => parsed.push(p),
            Err(e) => errors.push(from_format_error(e)),
        },
        (InputFormat::Single, None, _) => {
            let f = PreParsedFact {
                answer: row.answer.clone(),
                confidence: row.confidence,
            };
            match pre_parsed(&f) {
                Ok(p) => parsed.push(p),
                Err(reason) => errors.push(entry(reason, f.answer.unwrap_or_default(), None)),
            }
        }
        (InputFormat::Multi, Some(raw), _) => {
            let m = parse_multi(raw);
            parsed = m.answers;
            errors.extend(m.errors.into_iter().map(from_format_error));
            if parsed.is_empty() && errors.is_empty() {
                errors.push(entry("no answer lines".into(), String::new(), Some([0, raw.len()])));
            }
        }
        (InputFormat::Multi, None, facts) => {
            let facts = facts.as_deref().unwrap_or_default();
            for f in facts {
                match pre_parsed(f) {
                    Ok(p) => parsed.push(p),
                    Err(reason) => errors.push(entry(reason, f.answer.clone().unwrap_or_default(), None)),
                }
            }
            if facts.is_empty() {
                errors.push(entry("no facts".into(), String::new(), None));
            }
        }
    }
    let facts = parsed
        .into_iter()
        .map(|p| fact(p, &row.gold_candidates, opts))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|source| EvalError::Judge { line: r.line, source })?;
    Ok(RowResult {
        line: r.line,
        id: row.id.clone(),
        facts,
        format_errors: errors,
    })
}

/// Rows are scored independently (in parallel under `exec`) and reduced in
/// input order. Samples are sorted before aggregation, so the report does
/// not depend on row order.
pub fn evaluate_rows(rows: &[NumberedRow], opts: &EvalOptions) -> Result<(EvalReport, Vec<RowResult>), EvalError> {
    let results = exec::map_slice(rows, opts.report.exec, |r| score_row(r, opts))
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;

    let mut samples: Vec<ScoredSample> = results
        .iter()
        .flat_map(|r| r.facts.iter())
        .map(|f| ScoredSample {
            confidence: f.confidence.normalized(),
            correct: f.correct,
        })
        .collect();
    samples.sort_by(|a, b| a.confidence.total_cmp(&b.confidence).then(a.correct.cmp(&b.correct)));

    let mut format_errors: Vec<FormatErrorEntry> =
        results.iter().flat_map(|r| r.format_errors.iter().cloned()).collect();
    format_errors.sort_by(|a, b| {
        (a.line, a.span.map(|s| s[0]))
            .cmp(&(b.line, b.span.map(|s| s[0])))
    });

    let penalty = out_of_format_reward(&opts.reward);
    let items = samples.len() + format_errors.len();
    let mut rewards: Vec<f64> = results.iter().flat_map(|r| r.facts.iter().map(|f| f.reward)).collect();
    rewards.extend(std::iter::repeat_n(penalty, format_errors.len()));
    rewards.sort_by(f64::total_cmp);

    let per_fact = CalibrationReport::from_samples(&samples, &opts.report)?;
    let report = EvalReport {
        schema_version: REPORT_SCHEMA_VERSION,
        format: opts.format,
        judge: opts.judge,
        rows: rows.len(),
        items,
        format_error_count: format_errors.len(),
        format_error_rate: if items == 0 { 0.0 } else { format_errors.len() as f64 / items as f64 },
        format_errors,
        mean_reward: mean(&rewards).unwrap_or(0.0),
        per_fact,
        per_question: per_question(&results, penalty),
    };
    Ok((report, results))
}

pub fn evaluate_jsonl<R: BufRead>(reader: R, opts: &EvalOptions) -> Result<(EvalReport, Vec<RowResult>), EvalError> {
    evaluate_rows(&read_rows(reader)?, opts)
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

fn per_question(results: &[RowResult], penalty: f64) -> PerQuestionSummary {
    // Questions sharing an id are merged; rows without one stand alone.
    let mut groups: BTreeMap<(Option<RowId>, usize), Vec<&RowResult>> = BTreeMap::new();
    for r in results {
        let key = match &r.id {
            Some(id) => (Some(id.clone()), 0),
            None => (None, r.line),
        };
        groups.entry(key).or_default().push(r);
    }
    let mut acc = Vec::new();
    let mut conf = Vec::new();
    let mut all_correct = Vec::new();
    let mut reward = Vec::new();
    for rows in groups.values() {
        let facts: Vec<&FactResult> = rows.iter().flat_map(|r| r.facts.iter()).collect();
        let n_err: usize = rows.iter().map(|r| r.format_errors.len()).sum();
        let mut rs: Vec<f64> = facts.iter().map(|f| f.reward).collect();
        rs.extend(std::iter::repeat_n(penalty, n_err));
        rs.sort_by(f64::total_cmp);
        reward.push(mean(&rs).unwrap_or(0.0));
        if facts.is_empty() {
            continue;
        }
        let n = facts.len() as f64;
        acc.push(facts.iter().filter(|f| f.correct).count() as f64 / n);
        conf.push(facts.iter().map(|f| f.confidence.normalized()).sum::<f64>() / n);
        all_correct.push(if facts.iter().all(|f| f.correct) { 1.0 } else { 0.0 });
    }
    for v in [&mut acc, &mut conf, &mut reward] {
        v.sort_by(f64::total_cmp);
    }
    PerQuestionSummary {
        questions: groups.len(),
        questions_scored: acc.len(),
        mean_accuracy: mean(&acc),
        mean_confidence: mean(&conf),
        all_facts_correct_rate: mean(&all_correct),
        mean_reward: mean(&reward).unwrap_or(0.0),
    }
}

/// Output of the `parse` audit: one record per response or response line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum ParseRecord {
    Ok {
        line: usize,
        answer: String,
        confidence: ConfidenceLevel,
    },
    FormatError {
        line: usize,
        reason: String,
        text: String,
        span: [usize; 2],
    },
}

/// Parses a plain-text log. In single format every non-empty line is one
/// response; in multi format the whole text is one multi-answer response.
/// `span` is a byte range in the whole text.
pub fn parse_log(text: &str, format: InputFormat) -> Vec<ParseRecord> {
    let line_of = |byte: usize| text[..byte].matches('\n').count() + 1;
    let err = |e: FormatError| ParseRecord::FormatError {
        line: line_of(e.span.start),
        reason: e.reason,
        text: e.text,
        span: [e.span.start, e.span.end],
    };
    match format {
        InputFormat::Single => {
            let mut out = Vec::new();
            let mut offset = 0;
            for (i, line) in text.split_inclusive('\n').enumerate() {
                let body = line.trim_end_matches(['\n', '\r']);
                if !body.trim().is_empty() {
                    out.push(match parse_single(body) {
                        Ok(p) => ParseRecord::Ok {
                            line: i + 1,
                            answer: p.answer,
                            confidence: p.confidence,
                        },
                        Err(mut e) => {
                            e.span = e.span.start + offset..e.span.end + offset;
                            err(e)
                        }
                    });
                }
                offset += line.len();
            }
            out
        }
        InputFormat::Multi => {
            // Interleave answers and errors back into line order.
            let m = parse_multi(text);
            let mut answers = m.answers.into_iter();
            let mut errors = m.errors.into_iter().peekable();
            let mut out = Vec::new();
            for (i, line) in text.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                if errors.peek().is_some_and(|e| line_of(e.span.start) == i + 1) {
                    out.push(err(errors.next().unwrap()));
                } else if let Some(a) = answers.next() {
                    out.push(ParseRecord::Ok {
                        line: i + 1,
                        answer: a.answer,
                        confidence: a.confidence,
                    });
                }
            }
            out
        }
    }
}
