//! Domain types for multi-run Top-K prediction logs and their JSONL encoding.
//!
//! One JSONL line holds one observed segment:
//!
//! ```text
//! {"segment_id": "s1", "ground_truth": "cut tomato",
//!  "runs": [[{"action": "cut tomato", "conf": 0.7}, {"action": "take knife"}], ...]}
//! ```
//!
//! Every action string is passed through [`canonicalize_label`] on the way in, so
//! downstream comparisons are plain string equality.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

const EDGE_PUNCTUATION: &[char] = &['.', ',', ';', ':', '!', '?'];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("label is empty after canonicalization")]
    EmptyLabel,
    #[error("line {line}: missing or ill-typed field `{field}`")]
    Schema { line: usize, field: String },
    #[error("duplicate segment_id `{0}`")]
    DuplicateSegment(String),
    #[error("line {line}: verbalized confidence out of [0, 1]")]
    ConfidenceOutOfRange { line: usize },
    #[error("line {line}: invalid JSON: {message}")]
    Json { line: usize, message: String },
    #[error("I/O error: {0}")]
    Io(String),
}

/// Canonical action label: lowercase, single-spaced, no edge punctuation per token.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(transparent)]
pub struct ActionLabel(String);

impl ActionLabel {
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ActionLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl<'de> Deserialize<'de> for ActionLabel {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let raw = String::deserialize(d)?;
        canonicalize_label(&raw).map_err(serde::de::Error::custom)
    }
}

/// Lowercases, splits on Unicode whitespace, strips `. , ; : ! ?` from both ends
/// of every token, drops tokens that become empty and rejoins with single spaces.
pub fn canonicalize_label(raw: &str) -> Result<ActionLabel, ModelError> {
    let lowered = raw.to_lowercase();
    let tokens: Vec<&str> = lowered
        .split_whitespace()
        .map(|t| t.trim_matches(EDGE_PUNCTUATION))
        .filter(|t| !t.is_empty())
        .collect();
    if tokens.is_empty() {
        return Err(ModelError::EmptyLabel);
    }
    Ok(ActionLabel(tokens.join(" ")))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionItem {
    pub action: ActionLabel,
    pub verbalized_confidence: Option<f64>,
}

impl PredictionItem {
    pub fn new(action: ActionLabel, verbalized_confidence: Option<f64>) -> Self {
        Self {
            action,
            verbalized_confidence,
        }
    }
}

/// One stochastic decode. Rank is the position in `items`, rank 1 first.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRun {
    pub items: Vec<PredictionItem>,
}

impl PredictionRun {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub segment_id: String,
    pub ground_truth: ActionLabel,
    pub runs: Vec<PredictionRun>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub records: Vec<SampleRecord>,
    pub meta: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregatedEntry {
    pub action: ActionLabel,
    pub confidence: f64,
}

/// Ranked Top-K output of one aggregation strategy.
///
/// `requested_k` is kept so that short outputs (fewer candidates than `k`) stay
/// detectable downstream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregatedPrediction {
    pub entries: Vec<AggregatedEntry>,
    pub requested_k: usize,
}

impl AggregatedPrediction {
    pub fn is_short(&self) -> bool {
        self.entries.len() < self.requested_k
    }

    pub fn confidences(&self) -> impl Iterator<Item = f64> + '_ {
        self.entries.iter().map(|e| e.confidence)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RecordWarning {
    /// `run` is 1-based.
    ShortRun {
        run: usize,
        len: usize,
    },
    RunCountMismatch {
        expected: usize,
        found: usize,
    },
    MissingVerbalizedConfidence,
}

impl fmt::Display for RecordWarning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RecordWarning::ShortRun { run, len } => write!(f, "short run {run} (len {len})"),
            RecordWarning::RunCountMismatch { expected, found } => {
                write!(f, "run count {found} != expected {expected}")
            }
            RecordWarning::MissingVerbalizedConfidence => {
                f.write_str("missing verbalized confidence")
            }
        }
    }
}

/// Protocol conformance diagnostics. Never fails; an empty list means conformant.
pub fn validate_record(
    r: &SampleRecord,
    expected_m: Option<usize>,
    expected_k: Option<usize>,
) -> Vec<RecordWarning> {
    let mut warnings = Vec::new();
    if let Some(m) = expected_m {
        if r.runs.len() != m {
            warnings.push(RecordWarning::RunCountMismatch {
                expected: m,
                found: r.runs.len(),
            });
        }
    }
    if let Some(k) = expected_k {
        for (i, run) in r.runs.iter().enumerate() {
            if run.len() < k {
                warnings.push(RecordWarning::ShortRun {
                    run: i + 1,
                    len: run.len(),
                });
            }
        }
    }
    let missing = r
        .runs
        .iter()
        .flat_map(|run| &run.items)
        .any(|item| item.verbalized_confidence.is_none());
    if missing {
        warnings.push(RecordWarning::MissingVerbalizedConfidence);
    }
    warnings
}

// Wire structs. Fields are `Option` so that missing fields surface as
// `ModelError::Schema` with the field name rather than a serde message.

#[derive(Deserialize, Serialize)]
struct WireItem {
    #[serde(default)]
    action: Option<serde_json::Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    conf: Option<serde_json::Value>,
}

#[derive(Deserialize)]
struct WireRecord {
    #[serde(default)]
    segment_id: Option<serde_json::Value>,
    #[serde(default)]
    ground_truth: Option<serde_json::Value>,
    #[serde(default)]
    runs: Option<serde_json::Value>,
}

fn schema(line: usize, field: &str) -> ModelError {
    ModelError::Schema {
        line,
        field: field.to_string(),
    }
}

fn parse_label(
    v: Option<&serde_json::Value>,
    line: usize,
    field: &str,
) -> Result<ActionLabel, ModelError> {
    let s = v
        .and_then(|v| v.as_str())
        .ok_or_else(|| schema(line, field))?;
    canonicalize_label(s).map_err(|_| schema(line, field))
}

fn parse_line(text: &str, line: usize) -> Result<SampleRecord, ModelError> {
    let wire: WireRecord = serde_json::from_str(text).map_err(|e| ModelError::Json {
        line,
        message: e.to_string(),
    })?;
    let segment_id = wire
        .segment_id
        .as_ref()
        .and_then(|v| v.as_str())
        .filter(|s| !s.is_empty())
        .ok_or_else(|| schema(line, "segment_id"))?
        .to_string();
    let ground_truth = parse_label(wire.ground_truth.as_ref(), line, "ground_truth")?;
    let runs_json = wire
        .runs
        .as_ref()
        .and_then(|v| v.as_array())
        .filter(|a| !a.is_empty())
        .ok_or_else(|| schema(line, "runs"))?;

    let mut runs = Vec::with_capacity(runs_json.len());
    for run in runs_json {
        let items_json = run
            .as_array()
            .filter(|a| !a.is_empty())
            .ok_or_else(|| schema(line, "runs"))?;
        let mut items = Vec::with_capacity(items_json.len());
        for item in items_json {
            let obj = item.as_object().ok_or_else(|| schema(line, "runs"))?;
            let action = parse_label(obj.get("action"), line, "action")?;
            let conf = match obj.get("conf") {
                None | Some(serde_json::Value::Null) => None,
                Some(v) => {
                    let c = v.as_f64().ok_or_else(|| schema(line, "conf"))?;
                    if !(0.0..=1.0).contains(&c) {
                        return Err(ModelError::ConfidenceOutOfRange { line });
                    }
                    Some(c)
                }
            };
            items.push(PredictionItem::new(action, conf));
        }
        runs.push(PredictionRun { items });
    }
    Ok(SampleRecord {
        segment_id,
        ground_truth,
        runs,
    })
}

/// Parses a JSONL stream. Blank lines are skipped; line numbers in errors are 1-based
/// physical line numbers.
pub fn parse_dataset<R: BufRead>(reader: R, source: &str) -> Result<Dataset, ModelError> {
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| ModelError::Io(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let record = parse_line(&line, idx + 1)?;
        if !seen.insert(record.segment_id.clone()) {
            return Err(ModelError::DuplicateSegment(record.segment_id));
        }
        records.push(record);
    }
    let mut meta = BTreeMap::new();
    meta.insert("source".to_string(), source.to_string());
    meta.insert("record_count".to_string(), records.len().to_string());
    Ok(Dataset { records, meta })
}

fn record_to_json(r: &SampleRecord) -> serde_json::Value {
    let runs: Vec<Vec<WireItem>> = r
        .runs
        .iter()
        .map(|run| {
            run.items
                .iter()
                .map(|it| WireItem {
                    action: Some(serde_json::Value::from(it.action.as_str())),
                    conf: it.verbalized_confidence.map(serde_json::Value::from),
                })
                .collect()
        })
        .collect();
    serde_json::json!({
        "segment_id": r.segment_id,
        "ground_truth": r.ground_truth.as_str(),
        "runs": runs,
    })
}

/// Writes one compact JSON object per record, LF-terminated. `meta` is not written.
pub fn serialize_dataset<W: Write>(ds: &Dataset, mut out: W) -> std::io::Result<()> {
    for r in &ds.records {
        serde_json::to_writer(&mut out, &record_to_json(r))?;
        out.write_all(b"\n")?;
    }
    Ok(())
}
