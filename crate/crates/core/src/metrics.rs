//! Calibration and discrimination metrics for (confidence, correctness) pairs.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::{self, Execution};
use crate::rng::{substream, Domain};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("metric needs at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("confidence {0} is outside [0, 1]")]
    InvalidConfidence(f64),
    #[error("equal-width binning needs at least one bin")]
    NoBins,
    #[error("alpha must be in (0, 1), got {0}")]
    InvalidAlpha(f64),
    #[error("bootstrap needs at least one resample")]
    NoResamples,
    #[error("{metric} undefined on {undefined} of {total} bootstrap resamples")]
    UndefinedTooOften {
        metric: String,
        undefined: usize,
        total: usize,
    },
    #[error("unknown binning {0:?}; expected `discrete` or a bin count")]
    UnknownBinning(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredSample {
    pub confidence: f64,
    pub correct: bool,
}

impl ScoredSample {
    pub fn new(confidence: f64, correct: bool) -> Result<Self, MetricsError> {
        if !(0.0..=1.0).contains(&confidence) {
            return Err(MetricsError::InvalidConfidence(confidence));
        }
        Ok(Self { confidence, correct })
    }
}

fn check_samples(samples: &[ScoredSample]) -> Result<(), MetricsError> {
    if samples.is_empty() {
        return Err(MetricsError::TooFewSamples { needed: 1, got: 0 });
    }
    match samples.iter().find(|s| !(0.0..=1.0).contains(&s.confidence)) {
        Some(s) => Err(MetricsError::InvalidConfidence(s.confidence)),
        None => Ok(()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Binning {
    /// One bin per distinct confidence value.
    DiscreteLevels,
    /// `k` uniform right-closed bins on `[0, 1]`; zero falls in the first.
    EqualWidth(usize),
}

impl Binning {
    /// Discrete levels for 11-level data, ten equal-width bins otherwise.
    pub fn auto(samples: &[ScoredSample]) -> Binning {
        if is_level_data(samples) {
            Binning::DiscreteLevels
        } else {
            Binning::EqualWidth(10)
        }
    }

    fn bin_index(k: usize, c: f64) -> usize {
        let x = c * k as f64;
        let nearest = x.round();
        let idx = if (x - nearest).abs() < 1e-9 {
            nearest - 1.0
        } else {
            x.ceil() - 1.0
        };
        idx.clamp(0.0, (k - 1) as f64) as usize
    }
}

impl fmt::Display for Binning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Binning::DiscreteLevels => write!(f, "discrete"),
            Binning::EqualWidth(k) => write!(f, "equal_width_{k}"),
        }
    }
}

impl FromStr for Binning {
    type Err = MetricsError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "discrete" | "levels" => Ok(Binning::DiscreteLevels),
            other => match other.parse::<usize>() {
                Ok(0) => Err(MetricsError::NoBins),
                Ok(k) => Ok(Binning::EqualWidth(k)),
                Err(_) => Err(MetricsError::UnknownBinning(other.to_string())),
            },
        }
    }
}

/// True when every confidence is a multiple of 0.1 (within 1e-9).
pub fn is_level_data(samples: &[ScoredSample]) -> bool {
    samples
        .iter()
        .all(|s| (s.confidence * 10.0 - (s.confidence * 10.0).round()).abs() < 1e-9)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinStats {
    pub bin_low: f64,
    pub bin_high: f64,
    pub count: usize,
    pub mean_confidence: f64,
    pub accuracy: f64,
}

#[derive(Default, Clone, Copy)]
struct Acc {
    count: usize,
    conf_sum: f64,
    hits: usize,
}

/// Non-empty bins in ascending confidence order.
pub fn calibration_curve(samples: &[ScoredSample], binning: Binning) -> Result<Vec<BinStats>, MetricsError> {
    check_samples(samples)?;
    match binning {
        Binning::DiscreteLevels => {
            let mut groups: BTreeMap<u64, Acc> = BTreeMap::new();
            for s in samples {
                // confidences are non-negative, so bit order equals numeric order
                let acc = groups.entry((s.confidence + 0.0).to_bits()).or_default();
                acc.count += 1;
                acc.hits += s.correct as usize;
            }
            Ok(groups
                .into_iter()
                .map(|(bits, acc)| {
                    let value = f64::from_bits(bits);
                    BinStats {
                        bin_low: value,
                        bin_high: value,
                        count: acc.count,
                        mean_confidence: value,
                        accuracy: acc.hits as f64 / acc.count as f64,
                    }
                })
                .collect())
        }
        Binning::EqualWidth(k) => {
            if k == 0 {
                return Err(MetricsError::NoBins);
            }
            let mut accs = vec![Acc::default(); k];
            for s in samples {
                let acc = &mut accs[Binning::bin_index(k, s.confidence)];
                acc.count += 1;
                acc.conf_sum += s.confidence;
                acc.hits += s.correct as usize;
            }
            Ok(accs
                .into_iter()
                .enumerate()
                .filter(|(_, a)| a.count > 0)
                .map(|(i, acc)| {
                    let bin_low = i as f64 / k as f64;
                    let bin_high = (i + 1) as f64 / k as f64;
                    BinStats {
                        bin_low,
                        bin_high,
                        count: acc.count,
                        mean_confidence: (acc.conf_sum / acc.count as f64).clamp(bin_low, bin_high),
                        accuracy: acc.hits as f64 / acc.count as f64,
                    }
                })
                .collect())
        }
    }
}

/// Count-weighted mean absolute gap of already computed bins.
pub fn ece_from_bins(bins: &[BinStats]) -> f64 {
    let n: usize = bins.iter().map(|b| b.count).sum();
    bins.iter()
        .map(|b| (b.count as f64 / n as f64) * (b.accuracy - b.mean_confidence).abs())
        .sum()
}

/// Expected calibration error.
pub fn ece(samples: &[ScoredSample], binning: Binning) -> Result<f64, MetricsError> {
    Ok(ece_from_bins(&calibration_curve(samples, binning)?))
}

/// Area under the ROC curve via the Mann-Whitney rank sum with mid-ranks for
/// ties. `None` when either class is missing.
pub fn auroc(samples: &[ScoredSample]) -> Option<f64> {
    let n_pos = samples.iter().filter(|s| s.correct).count();
    let n_neg = samples.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.sort_by(|&a, &b| samples[a].confidence.total_cmp(&samples[b].confidence));

    let mut pos_rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && samples[order[j + 1]].confidence == samples[order[i]].confidence {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their average
        let mid_rank = (i + j + 2) as f64 / 2.0;
        let pos_in_tie = order[i..=j].iter().filter(|&&k| samples[k].correct).count();
        pos_rank_sum += mid_rank * pos_in_tie as f64;
        i = j + 1;
    }
    let u = pos_rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos as f64 * n_neg as f64))
}

/// Which histogram layout [`confidence_histogram`] used.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HistogramKind {
    Levels,
    EqualWidth11,
}

/// Counts per confidence level 0..=10. Non-level data falls back to 11 equal bins.
pub fn confidence_histogram(samples: &[ScoredSample]) -> ([u64; 11], HistogramKind) {
    let mut counts = [0u64; 11];
    if is_level_data(samples) {
        for s in samples {
            counts[((s.confidence * 10.0).round() as usize).min(10)] += 1;
        }
        (counts, HistogramKind::Levels)
    } else {
        for s in samples {
            counts[((s.confidence * 11.0).floor() as usize).min(10)] += 1;
        }
        (counts, HistogramKind::EqualWidth11)
    }
}

pub fn accuracy(samples: &[ScoredSample]) -> Option<f64> {
    (!samples.is_empty()).then(|| samples.iter().filter(|s| s.correct).count() as f64 / samples.len() as f64)
}

pub fn mean_confidence(samples: &[ScoredSample]) -> Option<f64> {
    (!samples.is_empty()).then(|| samples.iter().map(|s| s.confidence).sum::<f64>() / samples.len() as f64)
}

/// Metrics that can be bootstrapped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricId {
    Ece(Binning),
    Auroc,
    Accuracy,
    MeanConfidence,
}

impl MetricId {
    pub fn evaluate(&self, samples: &[ScoredSample]) -> Option<f64> {
        match self {
            MetricId::Ece(b) => ece(samples, *b).ok(),
            MetricId::Auroc => auroc(samples),
            MetricId::Accuracy => accuracy(samples),
            MetricId::MeanConfidence => mean_confidence(samples),
        }
    }

    pub fn name(&self) -> String {
        match self {
            MetricId::Ece(_) => "ece".into(),
            MetricId::Auroc => "auroc".into(),
            MetricId::Accuracy => "accuracy".into(),
            MetricId::MeanConfidence => "mean_confidence".into(),
        }
    }
}

const REDRAWS: usize = 10;

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Percentile bootstrap interval `[q(α/2), q(1 - α/2)]`.
///
/// Resample `r` uses its own random stream, so the interval does not depend
/// on `exec`. Resamples on which the metric is undefined are redrawn up to
/// ten times and then dropped.
pub fn bootstrap_ci(
    metric: MetricId,
    samples: &[ScoredSample],
    n_resamples: usize,
    alpha: f64,
    seed: u64,
    exec: Execution,
) -> Result<[f64; 2], MetricsError> {
    if samples.len() < 2 {
        return Err(MetricsError::TooFewSamples {
            needed: 2,
            got: samples.len(),
        });
    }
    check_samples(samples)?;
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(MetricsError::InvalidAlpha(alpha));
    }
    if n_resamples == 0 {
        return Err(MetricsError::NoResamples);
    }
    let n = samples.len();
    let values = exec::map_indexed(n_resamples, exec, |r| {
        let mut rng = substream(seed, Domain::Bootstrap, 0, r as u64);
        let mut draw = Vec::with_capacity(n);
        for _ in 0..=REDRAWS {
            draw.clear();
            draw.extend((0..n).map(|_| samples[rng.random_range(0..n)]));
            if let Some(v) = metric.evaluate(&draw) {
                return Some(v);
            }
        }
        None
    });
    let mut defined: Vec<f64> = values.into_iter().flatten().collect();
    let undefined = n_resamples - defined.len();
    if undefined * 2 > n_resamples || defined.is_empty() {
        return Err(MetricsError::UndefinedTooOften {
            metric: metric.name(),
            undefined,
            total: n_resamples,
        });
    }
    defined.sort_by(f64::total_cmp);
    Ok([quantile(&defined, alpha / 2.0), quantile(&defined, 1.0 - alpha / 2.0)])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReportOptions {
    /// `None` picks [`Binning::auto`].
    pub binning: Option<Binning>,
    /// Zero disables confidence intervals.
    pub bootstrap_resamples: usize,
    pub alpha: f64,
    pub seed: u64,
    #[serde(skip)]
    pub exec: Execution,
}

impl Default for ReportOptions {
    fn default() -> Self {
        Self {
            binning: None,
            bootstrap_resamples: 1000,
            alpha: 0.05,
            seed: 0,
            exec: Execution::default(),
        }
    }
}

/// Serializes a missing metric as the string `"undefined"` rather than `null`.
pub mod undefined {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Value(f64),
        Label(String),
    }

    pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(x) => s.serialize_f64(*x),
            None => s.serialize_str("undefined"),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Value(x) => Ok(Some(x)),
            Repr::Label(l) if l == "undefined" => Ok(None),
            Repr::Label(l) => Err(serde::de::Error::custom(format!("expected a number or \"undefined\", got {l:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub n: usize,
    #[serde(with = "undefined")]
    pub accuracy: Option<f64>,
    #[serde(with = "undefined")]
    pub mean_confidence: Option<f64>,
    pub binning: Option<String>,
    #[serde(with = "undefined")]
    pub ece: Option<f64>,
    /// ECE under both default binnings, keyed by binning label.
    pub ece_by_binning: BTreeMap<String, f64>,
    #[serde(with = "undefined")]
    pub auroc: Option<f64>,
    pub bins: Vec<BinStats>,
    pub histogram: [u64; 11],
    pub histogram_kind: HistogramKind,
    /// Metric name to `[low, high]`.
    pub cis: BTreeMap<String, [f64; 2]>,
    /// Metrics whose interval could not be computed, with the reason.
    pub ci_failures: BTreeMap<String, String>,
}

impl CalibrationReport {
    /// Full report. An empty sample set yields `n = 0` and no metrics.
    pub fn from_samples(samples: &[ScoredSample], opts: &ReportOptions) -> Result<Self, MetricsError> {
        let (histogram, histogram_kind) = confidence_histogram(samples);
        if samples.is_empty() {
            return Ok(Self {
                n: 0,
                accuracy: None,
                mean_confidence: None,
                binning: None,
                ece: None,
                ece_by_binning: BTreeMap::new(),
                auroc: None,
                bins: Vec::new(),
                histogram,
                histogram_kind,
                cis: BTreeMap::new(),
                ci_failures: BTreeMap::new(),
            });
        }
        check_samples(samples)?;
        let binning = opts.binning.unwrap_or_else(|| Binning::auto(samples));
        let bins = calibration_curve(samples, binning)?;
        let ece_value = ece_from_bins(&bins);

        let mut ece_by_binning = BTreeMap::new();
        for b in [Binning::DiscreteLevels, Binning::EqualWidth(10), binning] {
            ece_by_binning.insert(b.to_string(), ece(samples, b)?);
        }

        let mut cis = BTreeMap::new();
        let mut ci_failures = BTreeMap::new();
        if opts.bootstrap_resamples > 0 {
            for metric in [MetricId::Ece(binning), MetricId::Auroc, MetricId::Accuracy] {
                match bootstrap_ci(metric, samples, opts.bootstrap_resamples, opts.alpha, opts.seed, opts.exec) {
                    Ok(ci) => {
                        cis.insert(metric.name(), ci);
                    }
                    Err(e) => {
                        ci_failures.insert(metric.name(), e.to_string());
                    }
                }
            }
        }

        Ok(Self {
            n: samples.len(),
            accuracy: accuracy(samples),
            mean_confidence: mean_confidence(samples),
            binning: Some(binning.to_string()),
            ece: Some(ece_value),
            ece_by_binning,
            auroc: auroc(samples),
            bins,
            histogram,
            histogram_kind,
            cis,
            ci_failures,
        })
    }
}
