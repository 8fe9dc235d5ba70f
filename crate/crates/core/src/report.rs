//! Report writers: JSON documents, CSV tables and SVG charts.
//!
//! All output is a pure function of its input, so reruns are byte-identical.

use std::fmt::Write as _;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::RunConfig;
use crate::eval::{EvalReport, RowResult};
use crate::metrics::{self, BinStats, CalibrationReport, HistogramKind, MetricsError, ReportOptions};
use crate::train::{PolicyEval, TrainOutcome, TrainStats};

/// Version of every JSON report and of the JSONL input schema.
pub const REPORT_SCHEMA_VERSION: u32 = 1;

pub const SVG_WIDTH: f64 = 640.0;
pub const SVG_HEIGHT: f64 = 480.0;
const MARGIN_LEFT: f64 = 70.0;
const MARGIN_RIGHT: f64 = 30.0;
const MARGIN_TOP: f64 = 40.0;
const MARGIN_BOTTOM: f64 = 60.0;

pub fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("report types serialize");
    s.push('\n');
    s
}

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("writing {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<(), ReportError> {
    let path = dir.join(name);
    std::fs::write(&path, contents).map_err(|source| ReportError::Io { path, source })
}

/// Headline numbers for one evaluated policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicySummary {
    pub episodes: usize,
    pub out_of_format_rate: f64,
    pub mean_reward: f64,
    #[serde(with = "metrics::undefined")]
    pub ece: Option<f64>,
    #[serde(with = "metrics::undefined")]
    pub auroc: Option<f64>,
    /// AUROC of the latent true probability on the same episodes.
    #[serde(with = "metrics::undefined")]
    pub oracle_auroc: Option<f64>,
    /// Share of scored predictions at level 8 or above.
    pub high_confidence_fraction: f64,
    pub histogram: [u64; 11],
}

impl From<&PolicyEval> for PolicySummary {
    fn from(e: &PolicyEval) -> Self {
        Self {
            episodes: e.episodes,
            out_of_format_rate: e.out_of_format_rate,
            mean_reward: e.mean_reward,
            ece: e.ece,
            auroc: e.auroc,
            oracle_auroc: e.oracle_auroc,
            high_confidence_fraction: e.high_confidence_fraction(),
            histogram: e.histogram,
        }
    }
}

/// `report.json` of a training run. The top-level metrics describe the
/// trained policy on the held-out episodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub schema_version: u32,
    pub seed: u64,
    pub total_episodes: usize,
    #[serde(flatten)]
    pub heldout: CalibrationReport,
    pub initial_policy: PolicySummary,
    pub final_policy: PolicySummary,
}

impl TrainReport {
    pub fn new(outcome: &TrainOutcome, opts: &ReportOptions) -> Result<Self, MetricsError> {
        let cfg = &outcome.checkpoint.config.ppo;
        Ok(Self {
            schema_version: REPORT_SCHEMA_VERSION,
            seed: cfg.seed,
            total_episodes: cfg.total_episodes,
            heldout: CalibrationReport::from_samples(&outcome.heldout.samples, opts)?,
            initial_policy: (&outcome.initial).into(),
            final_policy: (&outcome.heldout).into(),
        })
    }
}

/// Files written by [`write_train_run`].
pub const TRAIN_RUN_FILES: &[&str] = &[
    "config.toml",
    "checkpoint.json",
    "stats.csv",
    "report.json",
    "bins.csv",
    "reliability.svg",
    "histogram.svg",
];

pub fn write_train_run(dir: &Path, config: &RunConfig, outcome: &TrainOutcome, opts: &ReportOptions) -> Result<TrainReport, ReportError> {
    std::fs::create_dir_all(dir).map_err(|source| ReportError::Io {
        path: dir.to_owned(),
        source,
    })?;
    let report = TrainReport::new(outcome, opts)?;
    write(dir, "config.toml", &config.to_toml_string())?;
    write(dir, "checkpoint.json", &to_json(&outcome.checkpoint))?;
    write(dir, "stats.csv", &stats_csv(&outcome.stats))?;
    write(dir, "report.json", &to_json(&report))?;
    write_charts(dir, &report.heldout, "held-out")?;
    Ok(report)
}

fn write_charts(dir: &Path, r: &CalibrationReport, label: &str) -> Result<(), ReportError> {
    write(dir, "bins.csv", &bins_csv(&r.bins))?;
    write(dir, "reliability.svg", &reliability_svg(&r.bins, &format!("Reliability ({label})")))?;
    write(
        dir,
        "histogram.svg",
        &histogram_svg(&r.histogram, r.histogram_kind, &format!("Confidence histogram ({label})")),
    )
}

/// Writes `report.json`, `rows.jsonl`, `bins.csv` and both charts.
pub fn write_eval_run(dir: &Path, report: &EvalReport, rows: &[RowResult]) -> Result<(), ReportError> {
    std::fs::create_dir_all(dir).map_err(|source| ReportError::Io {
        path: dir.to_owned(),
        source,
    })?;
    write(dir, "report.json", &to_json(report))?;
    let mut jsonl = String::new();
    for r in rows {
        jsonl.push_str(&serde_json::to_string(r).expect("row results serialize"));
        jsonl.push('\n');
    }
    write(dir, "rows.jsonl", &jsonl)?;
    write_charts(dir, &report.per_fact, "per fact")
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".to_string(), |x| x.to_string())
}

/// One row per training window.
pub fn stats_csv(stats: &TrainStats) -> String {
    let mut out = String::from(
        "window,episode_start,episode_end,mean_reward,out_of_format_rate,accuracy,policy_entropy,eval_ece,eval_auroc,eval_out_of_format_rate\n",
    );
    for w in &stats.windows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            w.window,
            w.episode_start,
            w.episode_end,
            w.mean_reward,
            w.out_of_format_rate,
            w.accuracy,
            w.policy_entropy,
            opt(w.eval_ece),
            opt(w.eval_auroc),
            w.eval_out_of_format_rate
        )
        .unwrap();
    }
    out
}

pub fn bins_csv(bins: &[BinStats]) -> String {
    let mut out = String::from("bin_low,bin_high,count,mean_confidence,accuracy,gap\n");
    for b in bins {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            b.bin_low,
            b.bin_high,
            b.count,
            b.mean_confidence,
            b.accuracy,
            (b.accuracy - b.mean_confidence).abs()
        )
        .unwrap();
    }
    out
}

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn new() -> Self {
        Self {
            x0: MARGIN_LEFT,
            x1: SVG_WIDTH - MARGIN_RIGHT,
            y0: SVG_HEIGHT - MARGIN_BOTTOM,
            y1: MARGIN_TOP,
        }
    }

    fn x(&self, u: f64) -> f64 {
        self.x0 + u * (self.x1 - self.x0)
    }

    fn y(&self, v: f64) -> f64 {
        self.y0 + v * (self.y1 - self.y0)
    }
}

fn svg_open(title: &str) -> String {
    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#,
        w = SVG_WIDTH,
        h = SVG_HEIGHT
    )
    .unwrap();
    writeln!(s, r#"<rect x="0" y="0" width="{SVG_WIDTH}" height="{SVG_HEIGHT}" fill="white"/>"#).unwrap();
    writeln!(
        s,
        r#"<text x="{:.2}" y="24" text-anchor="middle" font-size="16">{}</text>"#,
        SVG_WIDTH / 2.0,
        escape(title)
    )
    .unwrap();
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn axes(s: &mut String, f: &Frame, x_label: &str, y_label: &str, y_ticks: &[(f64, String)], x_ticks: &[(f64, String)]) {
    writeln!(
        s,
        r#"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="black"/>"#,
        f.x0, f.y0, f.x1, f.y0
    )
    .unwrap();
    writeln!(
        s,
        r#"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="black"/>"#,
        f.x0, f.y0, f.x0, f.y1
    )
    .unwrap();
    for (u, label) in x_ticks {
        let x = f.x(*u);
        writeln!(
            s,
            r#"<line x1="{x:.2}" y1="{:.2}" x2="{x:.2}" y2="{:.2}" stroke="black"/>"#,
            f.y0,
            f.y0 + 5.0
        )
        .unwrap();
        writeln!(s, r#"<text x="{x:.2}" y="{:.2}" text-anchor="middle">{label}</text>"#, f.y0 + 20.0).unwrap();
    }
    for (v, label) in y_ticks {
        let y = f.y(*v);
        writeln!(
            s,
            r#"<line x1="{:.2}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="black"/>"#,
            f.x0 - 5.0,
            f.x0
        )
        .unwrap();
        writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{label}</text>"#, f.x0 - 8.0, y + 4.0).unwrap();
    }
    writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
        (f.x0 + f.x1) / 2.0,
        SVG_HEIGHT - 15.0,
        escape(x_label)
    )
    .unwrap();
    let cy = (f.y0 + f.y1) / 2.0;
    writeln!(
        s,
        r#"<text x="20" y="{cy:.2}" text-anchor="middle" transform="rotate(-90 20 {cy:.2})">{}</text>"#,
        escape(y_label)
    )
    .unwrap();
}

fn unit_ticks() -> Vec<(f64, String)> {
    (0..=5).map(|i| (i as f64 / 5.0, format!("{:.1}", i as f64 / 5.0))).collect()
}

/// Reliability diagram: bin accuracy against bin mean confidence, with the
/// diagonal of perfect calibration. Both axes span [0, 1].
pub fn reliability_svg(bins: &[BinStats], title: &str) -> String {
    let f = Frame::new();
    let mut s = svg_open(title);
    axes(&mut s, &f, "mean confidence", "accuracy", &unit_ticks(), &unit_ticks());
    writeln!(
        s,
        r#"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="gray" stroke-dasharray="6 4"/>"#,
        f.x(0.0),
        f.y(0.0),
        f.x(1.0),
        f.y(1.0)
    )
    .unwrap();
    let occupied: Vec<&BinStats> = bins.iter().filter(|b| b.count > 0).collect();
    if occupied.len() > 1 {
        let pts: Vec<String> = occupied
            .iter()
            .map(|b| format!("{:.2},{:.2}", f.x(b.mean_confidence), f.y(b.accuracy)))
            .collect();
        writeln!(s, r#"<polyline points="{}" fill="none" stroke="steelblue"/>"#, pts.join(" ")).unwrap();
    }
    for b in occupied {
        writeln!(
            s,
            r#"<circle cx="{:.2}" cy="{:.2}" r="4" fill="steelblue"><title>n={}</title></circle>"#,
            f.x(b.mean_confidence),
            f.y(b.accuracy),
            b.count
        )
        .unwrap();
    }
    s.push_str("</svg>\n");
    s
}

/// Bar chart of how often each confidence bucket was used.
pub fn histogram_svg(counts: &[u64; 11], kind: HistogramKind, title: &str) -> String {
    let f = Frame::new();
    let mut s = svg_open(title);
    let max = counts.iter().copied().max().unwrap_or(0).max(1) as f64;
    let slot = 1.0 / counts.len() as f64;
    let x_ticks: Vec<(f64, String)> = (0..counts.len())
        .map(|i| {
            let label = match kind {
                HistogramKind::Levels => i.to_string(),
                HistogramKind::EqualWidth11 => format!("{:.2}", (i as f64 + 0.5) / 11.0),
            };
            ((i as f64 + 0.5) * slot, label)
        })
        .collect();
    let y_ticks: Vec<(f64, String)> = (0..=4)
        .map(|i| {
            let v = i as f64 / 4.0;
            (v, format!("{}", (v * max).round() as u64))
        })
        .collect();
    let x_label = match kind {
        HistogramKind::Levels => "confidence level",
        HistogramKind::EqualWidth11 => "confidence",
    };
    axes(&mut s, &f, x_label, "count", &y_ticks, &x_ticks);
    for (i, &c) in counts.iter().enumerate() {
        let left = f.x((i as f64 + 0.1) * slot);
        let right = f.x((i as f64 + 0.9) * slot);
        let top = f.y(c as f64 / max);
        writeln!(
            s,
            r#"<rect x="{left:.2}" y="{top:.2}" width="{:.2}" height="{:.2}" fill="steelblue"><title>{c}</title></rect>"#,
            right - left,
            f.y0 - top
        )
        .unwrap();
    }
    s.push_str("</svg>\n");
    s
}
