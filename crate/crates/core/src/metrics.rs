//! Decision-aware evaluation of aggregated Top-K predictions.
//!
//! Four groups of metrics:
//!
//! * correctness: [`top1_accuracy`], [`recall_at_k`]
//! * calibration: [`ece_top1`], [`set_ece`], [`set_ece_curve`]
//! * selective execution: [`selective_metrics_at`], [`threshold_sweep`]
//! * confidence geometry: [`normalized_entropy`], [`rankwise_confidence_stats`]
//!
//! Calibration uses `B` equal-width bins over `[0, 1]`. Bin `b` covers
//! `[b/B, (b+1)/B)`, except the last bin which also includes 1.0, so a confidence
//! lying exactly on an interior edge falls into the upper bin.
//!
//! An undefined selective accuracy (nothing retained) is `None`, never 0 or NaN.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ActionLabel, AggregatedPrediction};
use crate::numeric::{quantile_sorted, stable_mean, stable_sum};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("no samples to evaluate")]
    EmptyEvaluation,
    #[error("k must be >= 1")]
    InvalidK,
    #[error("bins must be >= 1")]
    InvalidBins,
    #[error("threshold {0} outside [0, 1]")]
    InvalidThreshold(f64),
    #[error("invalid threshold grid: {0}")]
    InvalidGrid(String),
    #[error("confidence vector is degenerate (sum is zero or fewer than two entries)")]
    DegenerateConfidence,
    #[error("prediction for `{0}` has no entries")]
    EmptyPrediction(String),
    #[error("confidence {0} outside [0, 1]")]
    ConfidenceOutOfRange(f64),
}

/// One segment's prediction joined with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct EvaluatedSample {
    pub segment_id: String,
    pub ground_truth: ActionLabel,
    pub prediction: AggregatedPrediction,
    /// `set_correct_at[k - 1]`: truth is among the unique actions of the first `k` entries.
    pub set_correct_at: Vec<bool>,
    pub exec_confidence: f64,
    pub exec_correct: bool,
}

impl EvaluatedSample {
    pub fn new(
        segment_id: impl Into<String>,
        ground_truth: ActionLabel,
        prediction: AggregatedPrediction,
    ) -> Result<Self, MetricsError> {
        let segment_id = segment_id.into();
        let first = prediction
            .entries
            .first()
            .ok_or_else(|| MetricsError::EmptyPrediction(segment_id.clone()))?;
        if let Some(bad) = prediction.confidences().find(|c| !(0.0..=1.0).contains(c)) {
            return Err(MetricsError::ConfidenceOutOfRange(bad));
        }
        let exec_confidence = first.confidence;
        let exec_correct = first.action == ground_truth;
        let mut hit = false;
        let set_correct_at = prediction
            .entries
            .iter()
            .map(|e| {
                hit |= e.action == ground_truth;
                hit
            })
            .collect();
        Ok(Self {
            segment_id,
            ground_truth,
            prediction,
            set_correct_at,
            exec_confidence,
            exec_correct,
        })
    }

    /// Set correctness for any `k >= 1`; constant beyond the prediction length.
    pub fn set_correct(&self, k: usize) -> bool {
        let idx = k.min(self.set_correct_at.len());
        idx > 0 && self.set_correct_at[idx - 1]
    }

    /// Mean of the first `min(k, len)` confidences.
    pub fn set_confidence(&self, k: usize) -> f64 {
        let terms: Vec<f64> = self.prediction.confidences().take(k).collect();
        stable_mean(terms).unwrap_or(0.0)
    }
}

fn non_empty(samples: &[EvaluatedSample]) -> Result<(), MetricsError> {
    if samples.is_empty() {
        Err(MetricsError::EmptyEvaluation)
    } else {
        Ok(())
    }
}

pub fn top1_accuracy(samples: &[EvaluatedSample]) -> Result<f64, MetricsError> {
    non_empty(samples)?;
    let hits = samples.iter().filter(|s| s.exec_correct).count();
    Ok(hits as f64 / samples.len() as f64)
}

pub fn recall_at_k(samples: &[EvaluatedSample], k: usize) -> Result<f64, MetricsError> {
    non_empty(samples)?;
    if k == 0 {
        return Err(MetricsError::InvalidK);
    }
    let hits = samples.iter().filter(|s| s.set_correct(k)).count();
    Ok(hits as f64 / samples.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub mean_confidence: Option<f64>,
    pub empirical_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub bins: Vec<CalibrationBin>,
    pub ece: f64,
}

impl CalibrationReport {
    pub fn total(&self) -> usize {
        self.bins.iter().map(|b| b.count).sum()
    }

    /// ECE recomputed from the stored bins.
    pub fn ece_from_bins(&self) -> f64 {
        let n = self.total() as f64;
        self.bins
            .iter()
            .filter_map(|b| {
                Some(b.count as f64 / n * (b.empirical_accuracy? - b.mean_confidence?).abs())
            })
            .sum()
    }
}

/// Index of the equal-width bin holding `c`.
pub fn bin_index(c: f64, bins: usize) -> usize {
    let b = bins as f64;
    let mut idx = ((c * b).floor().max(0.0) as usize).min(bins - 1);
    // Correct floor() rounding against the exact edge values idx / B.
    while idx + 1 < bins && c >= (idx + 1) as f64 / b {
        idx += 1;
    }
    while idx > 0 && c < idx as f64 / b {
        idx -= 1;
    }
    idx
}

/// Equal-width binned calibration error over `(confidence, correct)` pairs.
pub fn binned_calibration(
    pairs: impl IntoIterator<Item = (f64, bool)>,
    bins: usize,
) -> Result<CalibrationReport, MetricsError> {
    if bins == 0 {
        return Err(MetricsError::InvalidBins);
    }
    let mut confs: Vec<Vec<f64>> = vec![Vec::new(); bins];
    let mut hits = vec![0usize; bins];
    let mut n = 0usize;
    for (c, correct) in pairs {
        if !(0.0..=1.0).contains(&c) {
            return Err(MetricsError::ConfidenceOutOfRange(c));
        }
        let idx = bin_index(c, bins);
        confs[idx].push(c);
        hits[idx] += correct as usize;
        n += 1;
    }
    if n == 0 {
        return Err(MetricsError::EmptyEvaluation);
    }
    let bins_out: Vec<CalibrationBin> = confs
        .into_iter()
        .zip(hits)
        .enumerate()
        .map(|(b, (cs, h))| {
            let count = cs.len();
            CalibrationBin {
                lo: b as f64 / bins as f64,
                hi: (b + 1) as f64 / bins as f64,
                count,
                mean_confidence: stable_mean(cs),
                empirical_accuracy: (count > 0).then(|| h as f64 / count as f64),
            }
        })
        .collect();
    let mut report = CalibrationReport {
        bins: bins_out,
        ece: 0.0,
    };
    report.ece = report.ece_from_bins();
    Ok(report)
}

/// Calibration of the rank-1 confidence against rank-1 correctness.
pub fn ece_top1(
    samples: &[EvaluatedSample],
    bins: usize,
) -> Result<CalibrationReport, MetricsError> {
    non_empty(samples)?;
    binned_calibration(
        samples.iter().map(|s| (s.exec_confidence, s.exec_correct)),
        bins,
    )
}

/// Calibration of the mean Top-k confidence against Top-k set membership.
pub fn set_ece(
    samples: &[EvaluatedSample],
    k: usize,
    bins: usize,
) -> Result<CalibrationReport, MetricsError> {
    non_empty(samples)?;
    if k == 0 {
        return Err(MetricsError::InvalidK);
    }
    binned_calibration(
        samples
            .iter()
            .map(|s| (s.set_confidence(k), s.set_correct(k))),
        bins,
    )
}

pub fn set_ece_curve(
    samples: &[EvaluatedSample],
    k_max: usize,
    bins: usize,
) -> Result<Vec<(usize, f64)>, MetricsError> {
    if k_max == 0 {
        return Err(MetricsError::InvalidK);
    }
    (1..=k_max)
        .map(|k| Ok((k, set_ece(samples, k, bins)?.ece)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectivePoint {
    pub tau: f64,
    pub coverage: f64,
    pub selective_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectiveCurve {
    pub points: Vec<SelectivePoint>,
}

/// Execute only when the rank-1 confidence is at least `tau`.
pub fn selective_metrics_at(
    samples: &[EvaluatedSample],
    tau: f64,
) -> Result<SelectivePoint, MetricsError> {
    non_empty(samples)?;
    if !(0.0..=1.0).contains(&tau) {
        return Err(MetricsError::InvalidThreshold(tau));
    }
    let retained: Vec<&EvaluatedSample> = samples
        .iter()
        .filter(|s| s.exec_confidence >= tau)
        .collect();
    let correct = retained.iter().filter(|s| s.exec_correct).count();
    Ok(SelectivePoint {
        tau,
        coverage: retained.len() as f64 / samples.len() as f64,
        selective_accuracy: (!retained.is_empty()).then(|| correct as f64 / retained.len() as f64),
    })
}

/// `start:stop:step` threshold grid. Points are `start + i * (stop - start) / n` with
/// `n = round((stop - start) / step)`, so `0:1:0.01` yields exactly `i / 100`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdGrid {
    pub start: f64,
    pub stop: f64,
    pub step: f64,
}

impl Default for ThresholdGrid {
    fn default() -> Self {
        Self {
            start: 0.0,
            stop: 1.0,
            step: 0.01,
        }
    }
}

impl ThresholdGrid {
    pub fn parse(text: &str) -> Result<Self, MetricsError> {
        let parts: Vec<&str> = text.split(':').collect();
        let bad = || MetricsError::InvalidGrid(format!("expected start:stop:step, got `{text}`"));
        if parts.len() != 3 {
            return Err(bad());
        }
        let nums: Vec<f64> = parts
            .iter()
            .map(|p| p.trim().parse::<f64>().map_err(|_| bad()))
            .collect::<Result<_, _>>()?;
        let grid = Self {
            start: nums[0],
            stop: nums[1],
            step: nums[2],
        };
        grid.points()?;
        Ok(grid)
    }

    pub fn points(&self) -> Result<Vec<f64>, MetricsError> {
        let Self { start, stop, step } = *self;
        if !(0.0..=1.0).contains(&start) || !(0.0..=1.0).contains(&stop) || start > stop {
            return Err(MetricsError::InvalidGrid(
                "need 0 <= start <= stop <= 1".into(),
            ));
        }
        if !step.is_finite() || step <= 0.0 {
            return Err(MetricsError::InvalidGrid("step must be > 0".into()));
        }
        let n = ((stop - start) / step).round() as usize;
        if n > 1_000_000 {
            return Err(MetricsError::InvalidGrid("too many grid points".into()));
        }
        if n == 0 {
            return Ok(vec![start]);
        }
        Ok((0..=n)
            .map(|i| (start * (n - i) as f64 + stop * i as f64) / n as f64)
            .collect())
    }
}

pub fn threshold_sweep(
    samples: &[EvaluatedSample],
    grid: &[f64],
) -> Result<SelectiveCurve, MetricsError> {
    if grid.windows(2).any(|w| w[0] > w[1]) {
        return Err(MetricsError::InvalidGrid(
            "grid must be sorted ascending".into(),
        ));
    }
    let points = grid
        .iter()
        .map(|&tau| selective_metrics_at(samples, tau))
        .collect::<Result<_, _>>()?;
    Ok(SelectiveCurve { points })
}

/// Entropy of the normalized confidence vector divided by `ln K`, `K = confidences.len()`.
pub fn normalized_entropy_of(confidences: &[f64]) -> Result<f64, MetricsError> {
    let k = confidences.len();
    let total = stable_sum(confidences.to_vec());
    if k < 2 || total.is_nan() || total <= 0.0 {
        return Err(MetricsError::DegenerateConfidence);
    }
    let terms: Vec<f64> = confidences
        .iter()
        .map(|&c| c / total)
        .filter(|&p| p > 0.0)
        .map(|p| -p * p.ln())
        .collect();
    Ok((stable_sum(terms) / (k as f64).ln()).clamp(0.0, 1.0))
}

pub fn normalized_entropy(p: &AggregatedPrediction) -> Result<f64, MetricsError> {
    let confs: Vec<f64> = p.confidences().collect();
    normalized_entropy_of(&confs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankStats {
    pub rank: usize,
    /// Number of samples with a prediction at this rank.
    pub count: usize,
    pub min: Option<f64>,
    pub q1: Option<f64>,
    pub median: Option<f64>,
    pub q3: Option<f64>,
    pub max: Option<f64>,
    pub mean: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeometryReport {
    pub per_rank: Vec<RankStats>,
    /// Mean over samples of the normalized Top-k entropy; `None` if every sample was degenerate.
    pub mean_normalized_entropy: Option<f64>,
    /// Samples skipped because their entropy is undefined.
    pub entropy_excluded: usize,
}

pub fn rankwise_confidence_stats(
    samples: &[EvaluatedSample],
    k: usize,
) -> Result<GeometryReport, MetricsError> {
    non_empty(samples)?;
    if k == 0 {
        return Err(MetricsError::InvalidK);
    }
    let per_rank = (0..k)
        .map(|r| {
            let mut xs: Vec<f64> = samples
                .iter()
                .filter_map(|s| s.prediction.entries.get(r).map(|e| e.confidence))
                .collect();
            xs.sort_by(f64::total_cmp);
            let q = |p: f64| (!xs.is_empty()).then(|| quantile_sorted(&xs, p));
            RankStats {
                rank: r + 1,
                count: xs.len(),
                min: q(0.0),
                q1: q(0.25),
                median: q(0.5),
                q3: q(0.75),
                max: q(1.0),
                mean: stable_mean(xs.clone()),
            }
        })
        .collect();
    let entropies: Vec<f64> = samples
        .iter()
        .filter_map(|s| {
            let confs: Vec<f64> = s.prediction.confidences().take(k).collect();
            normalized_entropy_of(&confs).ok()
        })
        .collect();
    let entropy_excluded = samples.len() - entropies.len();
    Ok(GeometryReport {
        per_rank,
        mean_normalized_entropy: stable_mean(entropies),
        entropy_excluded,
    })
}
