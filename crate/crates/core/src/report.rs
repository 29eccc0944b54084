//! Evaluation pipeline and report serialization.
//!
//! Reports are written as canonical JSON: object keys sorted, two-space indent,
//! integers verbatim and every float in scientific notation with 17 significant
//! digits (`7.5000000000000000e-1`). Rust's float formatting is exact, so the bytes
//! are identical on every platform.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggregation::{aggregate, AggregationError, AggregationOptions, StrategyId};
use crate::btrank::BtConfig;
use crate::metrics::{
    ece_top1, rankwise_confidence_stats, recall_at_k, set_ece, set_ece_curve, threshold_sweep,
    top1_accuracy, CalibrationReport, EvaluatedSample, GeometryReport, MetricsError,
    SelectiveCurve, ThresholdGrid,
};
use crate::model::{validate_record, Dataset};
use crate::par::{try_map, Exec};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("segment `{segment_id}`: {source}")]
    Aggregation {
        segment_id: String,
        source: AggregationError,
    },
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalSettings {
    pub strategy: StrategyId,
    pub k: usize,
    pub bins: usize,
    pub grid: ThresholdGrid,
    pub options: AggregationOptions,
}

impl EvalSettings {
    pub fn new(strategy: StrategyId) -> Self {
        Self {
            strategy,
            k: 10,
            bins: 10,
            grid: ThresholdGrid::default(),
            options: AggregationOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub input_path: String,
    pub input_sha256: String,
    pub strategy: StrategyId,
    pub k: usize,
    pub bins: usize,
    pub threshold_grid: ThresholdGrid,
    pub bt_config: BtConfig,
    pub default_confidence: bool,
    pub dedup: bool,
    pub seed: Option<u64>,
    pub n_records: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KValue {
    pub k: usize,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Correctness {
    pub top1: f64,
    pub recall_at_k: Vec<KValue>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub top1: CalibrationReport,
    /// Set-level calibration at the report's `k`.
    pub set_at_k: CalibrationReport,
    pub set_ece_curve: Vec<KValue>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub manifest: RunManifest,
    pub correctness: Correctness,
    pub calibration: Calibration,
    pub selective: SelectiveCurve,
    pub geometry: GeometryReport,
    pub warnings: Vec<String>,
}

/// Where the input came from; copied into the manifest verbatim.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct InputInfo {
    pub path: String,
    pub sha256: String,
    pub seed: Option<u64>,
}

/// Aggregates every record and joins it with its ground truth. Records are processed
/// independently under `exec`; the output keeps dataset order.
pub fn evaluate_records(
    ds: &Dataset,
    strategy: StrategyId,
    k: usize,
    opts: &AggregationOptions,
    exec: Exec,
) -> Result<Vec<EvaluatedSample>, PipelineError> {
    try_map(exec, &ds.records, |r| {
        let prediction =
            aggregate(r, strategy, k, opts).map_err(|source| PipelineError::Aggregation {
                segment_id: r.segment_id.clone(),
                source,
            })?;
        Ok(EvaluatedSample::new(
            r.segment_id.clone(),
            r.ground_truth.clone(),
            prediction,
        )?)
    })
}

pub fn build_report(
    ds: &Dataset,
    settings: &EvalSettings,
    input: &InputInfo,
    exec: Exec,
) -> Result<EvalReport, PipelineError> {
    let EvalSettings {
        strategy,
        k,
        bins,
        grid,
        options,
    } = *settings;
    if k == 0 {
        return Err(MetricsError::InvalidK.into());
    }
    if bins == 0 {
        return Err(MetricsError::InvalidBins.into());
    }
    let samples = evaluate_records(ds, strategy, k, &options, exec)?;
    if samples.is_empty() {
        return Err(MetricsError::EmptyEvaluation.into());
    }

    let mut warnings = Vec::new();
    for (r, s) in ds.records.iter().zip(&samples) {
        for w in validate_record(r, None, Some(k)) {
            warnings.push(format!("{}: {w}", r.segment_id));
        }
        if s.prediction.is_short() {
            warnings.push(format!(
                "{}: aggregated prediction has {} of {k} entries",
                r.segment_id,
                s.prediction.entries.len()
            ));
        }
    }

    let recall = (1..=k)
        .map(|kk| {
            Ok(KValue {
                k: kk,
                value: recall_at_k(&samples, kk)?,
            })
        })
        .collect::<Result<Vec<_>, MetricsError>>()?;
    let curve = set_ece_curve(&samples, k, bins)?
        .into_iter()
        .map(|(k, value)| KValue { k, value })
        .collect();
    let geometry = rankwise_confidence_stats(&samples, k)?;
    if geometry.entropy_excluded > 0 {
        warnings.push(format!(
            "normalized entropy undefined for {} sample(s); excluded from the mean",
            geometry.entropy_excluded
        ));
    }

    Ok(EvalReport {
        manifest: RunManifest {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            input_path: input.path.clone(),
            input_sha256: input.sha256.clone(),
            strategy,
            k,
            bins,
            threshold_grid: grid,
            bt_config: options.bt,
            default_confidence: options.default_confidence,
            dedup: options.dedup,
            seed: input.seed,
            n_records: samples.len(),
        },
        correctness: Correctness {
            top1: top1_accuracy(&samples)?,
            recall_at_k: recall,
        },
        calibration: Calibration {
            top1: ece_top1(&samples, bins)?,
            set_at_k: set_ece(&samples, k, bins)?,
            set_ece_curve: curve,
        },
        selective: threshold_sweep(&samples, &grid.points()?)?,
        geometry,
        warnings,
    })
}

/// Fixed-width float text used in canonical JSON.
pub fn format_float(x: f64) -> String {
    format!("{x:.16e}")
}

fn write_canonical(out: &mut String, v: &serde_json::Value, depth: usize) {
    use serde_json::Value;
    let pad = |out: &mut String, d: usize| {
        for _ in 0..d {
            out.push_str("  ");
        }
    };
    match v {
        Value::Null => out.push_str("null"),
        Value::Bool(b) => out.push_str(if *b { "true" } else { "false" }),
        Value::Number(n) => match (n.as_u64(), n.as_i64()) {
            (Some(u), _) if !n.is_f64() => write!(out, "{u}").unwrap(),
            (_, Some(i)) if !n.is_f64() => write!(out, "{i}").unwrap(),
            _ => out.push_str(&format_float(n.as_f64().expect("finite number"))),
        },
        Value::String(s) => out.push_str(&serde_json::to_string(s).expect("string serializes")),
        Value::Array(items) => {
            if items.is_empty() {
                out.push_str("[]");
                return;
            }
            out.push_str("[\n");
            for (i, item) in items.iter().enumerate() {
                pad(out, depth + 1);
                write_canonical(out, item, depth + 1);
                out.push_str(if i + 1 < items.len() { ",\n" } else { "\n" });
            }
            pad(out, depth);
            out.push(']');
        }
        Value::Object(map) => {
            if map.is_empty() {
                out.push_str("{}");
                return;
            }
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            out.push_str("{\n");
            for (i, key) in keys.iter().enumerate() {
                pad(out, depth + 1);
                out.push_str(&serde_json::to_string(key).expect("key serializes"));
                out.push_str(": ");
                write_canonical(out, &map[*key], depth + 1);
                out.push_str(if i + 1 < keys.len() { ",\n" } else { "\n" });
            }
            pad(out, depth);
            out.push('}');
        }
    }
}

/// Canonical JSON text of any serializable value, newline-terminated.
pub fn to_canonical_json<T: Serialize>(value: &T) -> Result<String, serde_json::Error> {
    let v = serde_json::to_value(value)?;
    let mut out = String::new();
    write_canonical(&mut out, &v, 0);
    out.push('\n');
    Ok(out)
}

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

impl EvalReport {
    pub fn selective_csv(&self) -> String {
        let mut s = String::from("tau,coverage,selective_accuracy\n");
        for p in &self.selective.points {
            writeln!(s, "{},{},{}", p.tau, p.coverage, opt(p.selective_accuracy)).unwrap();
        }
        s
    }

    pub fn set_ece_csv(&self) -> String {
        let mut s = String::from("k,set_ece,recall\n");
        for (c, r) in self
            .calibration
            .set_ece_curve
            .iter()
            .zip(&self.correctness.recall_at_k)
        {
            writeln!(s, "{},{},{}", c.k, c.value, r.value).unwrap();
        }
        s
    }

    pub fn rankwise_csv(&self) -> String {
        let mut s = String::from("rank,count,min,q1,median,q3,max,mean\n");
        for r in &self.geometry.per_rank {
            writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                r.rank,
                r.count,
                opt(r.min),
                opt(r.q1),
                opt(r.median),
                opt(r.q3),
                opt(r.max),
                opt(r.mean)
            )
            .unwrap();
        }
        s
    }

    pub fn reliability_csv(&self) -> String {
        let mut s = String::from("lo,hi,count,mean_confidence,empirical_accuracy\n");
        for b in &self.calibration.top1.bins {
            writeln!(
                s,
                "{},{},{},{},{}",
                b.lo,
                b.hi,
                b.count,
                opt(b.mean_confidence),
                opt(b.empirical_accuracy)
            )
            .unwrap();
        }
        s
    }

    pub fn summary(&self) -> SummaryRow {
        let k = self.manifest.k;
        SummaryRow {
            method: self.manifest.strategy.display_name().to_string(),
            top1: self.correctness.top1,
            recall_at_k: self
                .correctness
                .recall_at_k
                .iter()
                .find(|r| r.k == k)
                .map(|r| r.value)
                .unwrap_or(f64::NAN),
            top1_ece: self.calibration.top1.ece,
            set_ece_at_k: self.calibration.set_at_k.ece,
            entropy: self.geometry.mean_normalized_entropy,
        }
    }
}

/// One row of the strategy comparison table.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub method: String,
    pub top1: f64,
    pub recall_at_k: f64,
    pub top1_ece: f64,
    pub set_ece_at_k: f64,
    pub entropy: Option<f64>,
}

#[derive(Debug, Error, PartialEq)]
#[error("reports disagree on {field}: {first} vs {other}")]
pub struct IncompatibleReports {
    pub field: &'static str,
    pub first: usize,
    pub other: usize,
}

/// Side-by-side comparison of reports that share `k` and `bins`.
#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonTable {
    pub k: usize,
    pub bins: usize,
    pub rows: Vec<SummaryRow>,
}

impl ComparisonTable {
    pub fn from_reports(reports: &[EvalReport]) -> Result<Self, IncompatibleReports> {
        let first = &reports.first().expect("at least one report").manifest;
        for r in reports {
            if r.manifest.k != first.k {
                return Err(IncompatibleReports {
                    field: "k",
                    first: first.k,
                    other: r.manifest.k,
                });
            }
            if r.manifest.bins != first.bins {
                return Err(IncompatibleReports {
                    field: "bins",
                    first: first.bins,
                    other: r.manifest.bins,
                });
            }
        }
        Ok(Self {
            k: first.k,
            bins: first.bins,
            rows: reports.iter().map(EvalReport::summary).collect(),
        })
    }

    fn headers(&self) -> [String; 6] {
        [
            "Method".into(),
            "Top-1".into(),
            format!("Recall@{}", self.k),
            "Top-1 ECE".into(),
            format!("Set-ECE@{}", self.k),
            "Entropy".into(),
        ]
    }

    pub fn to_csv(&self) -> String {
        let mut s = self.headers().join(",");
        s.push('\n');
        for r in &self.rows {
            writeln!(
                s,
                "{},{},{},{},{},{}",
                r.method,
                r.top1,
                r.recall_at_k,
                r.top1_ece,
                r.set_ece_at_k,
                opt(r.entropy)
            )
            .unwrap();
        }
        s
    }

    pub fn to_text(&self) -> String {
        let headers = self.headers();
        let cells: Vec<[String; 6]> = self
            .rows
            .iter()
            .map(|r| {
                [
                    r.method.clone(),
                    format!("{:.3}", r.top1),
                    format!("{:.3}", r.recall_at_k),
                    format!("{:.4}", r.top1_ece),
                    format!("{:.3}", r.set_ece_at_k),
                    r.entropy
                        .map(|e| format!("{e:.3}"))
                        .unwrap_or_else(|| "-".into()),
                ]
            })
            .collect();
        let widths: Vec<usize> = (0..6)
            .map(|c| {
                cells
                    .iter()
                    .map(|row| row[c].len())
                    .chain([headers[c].len()])
                    .max()
                    .unwrap_or(0)
            })
            .collect();
        let line = |row: &[String; 6]| {
            let mut s = format!("{:<w$}", row[0], w = widths[0]);
            for c in 1..6 {
                write!(s, "  {:>w$}", row[c], w = widths[c]).unwrap();
            }
            s.trim_end().to_string() + "\n"
        };
        let mut out = format!("K = {}, bins = {}\n", self.k, self.bins);
        out.push_str(&line(&headers));
        out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 10));
        out.push('\n');
        for row in &cells {
            out.push_str(&line(row));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_json_sorts_keys_and_fixes_floats() {
        let v = serde_json::json!({"b": 0.75, "a": [1, null, true], "c": {"z": "q\"", "y": 1.0}});
        let text = to_canonical_json(&v).unwrap();
        let expected = "{\n  \"a\": [\n    1,\n    null,\n    true\n  ],\n  \"b\": 7.5000000000000000e-1,\n  \"c\": {\n    \"y\": 1.0000000000000000e0,\n    \"z\": \"q\\\"\"\n  }\n}\n";
        assert_eq!(text, expected);
        let back: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(back["b"].as_f64(), Some(0.75));
    }

    #[test]
    fn float_format_round_trips() {
        for x in [0.1, 1.0 / 3.0, 2f64.ln() / 10f64.ln(), 1e-300, 0.0, 1.0] {
            let s = format_float(x);
            assert_eq!(s.parse::<f64>().unwrap(), x, "{s}");
        }
    }
}
