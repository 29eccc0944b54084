//! Aggregation of M stochastic Top-K runs into one ranked prediction.
//!
//! Position-wise strategies (consistency, confidence-weighted) vote independently at
//! every rank; PairRank turns within-run orderings into pairwise preferences and fits
//! a Bradley–Terry model over the whole action set.
//!
//! Ties are broken by higher total verbalized confidence, then by label order.
//! Sums over runs go through [`stable_sum`] so results do not depend on run order.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::btrank::{fit_bradley_terry, BtConfig, BtError, BtScores, PreferenceCounts};
use crate::model::{
    ActionLabel, AggregatedEntry, AggregatedPrediction, PredictionItem, SampleRecord,
};
use crate::numeric::stable_sum;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AggregationError {
    #[error("k must be >= 1")]
    InvalidK,
    #[error("record has no runs")]
    EmptyRecord,
    /// `run` and `rank` are 1-based.
    #[error("missing verbalized confidence at run {run}, rank {rank}")]
    MissingConfidence { run: usize, rank: usize },
    #[error(transparent)]
    Bt(#[from] BtError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StrategyId {
    Consistency,
    #[serde(rename = "weighted")]
    ConfidenceWeighted,
    #[serde(rename = "pairrank")]
    PairRank,
    #[serde(rename = "single")]
    SingleRun,
}

impl StrategyId {
    pub const ALL: [StrategyId; 4] = [
        StrategyId::Consistency,
        StrategyId::ConfidenceWeighted,
        StrategyId::PairRank,
        StrategyId::SingleRun,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StrategyId::Consistency => "consistency",
            StrategyId::ConfidenceWeighted => "weighted",
            StrategyId::PairRank => "pairrank",
            StrategyId::SingleRun => "single",
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            StrategyId::Consistency => "Consistency",
            StrategyId::ConfidenceWeighted => "Confidence-weighted",
            StrategyId::PairRank => "Pairwise Ranking",
            StrategyId::SingleRun => "Single run",
        }
    }
}

impl fmt::Display for StrategyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StrategyId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "consistency" => Ok(StrategyId::Consistency),
            "weighted" | "confidence-weighted" => Ok(StrategyId::ConfidenceWeighted),
            "pairrank" => Ok(StrategyId::PairRank),
            "single" | "single-run" => Ok(StrategyId::SingleRun),
            other => Err(format!("unknown strategy `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct AggregationOptions {
    /// Treat absent verbalized confidences as 1.0 in the weighted vote.
    pub default_confidence: bool,
    /// Never elect the same action at two ranks.
    pub dedup: bool,
    pub bt: BtConfig,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct PairwisePreference {
    pub winner: ActionLabel,
    pub loser: ActionLabel,
    pub count: u64,
}

struct Candidate<'a> {
    action: &'a ActionLabel,
    score: f64,
    support: f64,
}

fn candidate_order(a: &Candidate<'_>, b: &Candidate<'_>) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(b.support.total_cmp(&a.support))
        .then(a.action.cmp(b.action))
}

/// Ranked candidates at one position plus the position's weight total.
fn vote_at<'a>(
    r: &'a SampleRecord,
    pos: usize,
    weight: impl Fn(&PredictionItem) -> f64,
) -> (Vec<Candidate<'a>>, f64) {
    let mut weights: BTreeMap<&ActionLabel, Vec<f64>> = BTreeMap::new();
    let mut supports: BTreeMap<&ActionLabel, Vec<f64>> = BTreeMap::new();
    let mut all = Vec::new();
    for item in r.runs.iter().filter_map(|run| run.items.get(pos)) {
        let w = weight(item);
        all.push(w);
        weights.entry(&item.action).or_default().push(w);
        supports
            .entry(&item.action)
            .or_default()
            .push(item.verbalized_confidence.unwrap_or(0.0));
    }
    let mut candidates: Vec<Candidate<'a>> = weights
        .into_iter()
        .map(|(action, w)| Candidate {
            action,
            score: stable_sum(w),
            support: stable_sum(supports.remove(action).unwrap_or_default()),
        })
        .collect();
    candidates.sort_by(candidate_order);
    (candidates, stable_sum(all))
}

fn positional_vote(
    r: &SampleRecord,
    k: usize,
    dedup: bool,
    weight: impl Fn(&PredictionItem) -> f64 + Copy,
    confidence: impl Fn(f64, f64) -> f64,
) -> Result<AggregatedPrediction, AggregationError> {
    if k == 0 {
        return Err(AggregationError::InvalidK);
    }
    if r.runs.is_empty() {
        return Err(AggregationError::EmptyRecord);
    }
    let depth = r.runs.iter().map(|run| run.len()).max().unwrap_or(0).min(k);
    let mut entries: Vec<AggregatedEntry> = Vec::with_capacity(depth);
    for pos in 0..depth {
        let (candidates, total) = vote_at(r, pos, weight);
        let pick = candidates
            .iter()
            .find(|c| !dedup || entries.iter().all(|e| &e.action != c.action));
        if let Some(c) = pick {
            entries.push(AggregatedEntry {
                action: c.action.clone(),
                confidence: confidence(c.score, total),
            });
        }
    }
    Ok(AggregatedPrediction {
        entries,
        requested_k: k,
    })
}

/// Majority vote per rank; confidence is the agreement frequency over all M runs.
pub fn aggregate_consistency(
    r: &SampleRecord,
    k: usize,
) -> Result<AggregatedPrediction, AggregationError> {
    consistency_impl(r, k, false)
}

fn consistency_impl(
    r: &SampleRecord,
    k: usize,
    dedup: bool,
) -> Result<AggregatedPrediction, AggregationError> {
    let m = r.runs.len() as f64;
    positional_vote(r, k, dedup, |_| 1.0, |votes, _| votes / m)
}

/// Vote per rank weighted by verbalized confidence; confidence is the winner's share
/// of the total weight at that rank.
pub fn aggregate_confidence_weighted(
    r: &SampleRecord,
    k: usize,
    default_confidence: bool,
) -> Result<AggregatedPrediction, AggregationError> {
    weighted_impl(r, k, default_confidence, false)
}

fn weighted_impl(
    r: &SampleRecord,
    k: usize,
    default_confidence: bool,
    dedup: bool,
) -> Result<AggregatedPrediction, AggregationError> {
    if k == 0 {
        return Err(AggregationError::InvalidK);
    }
    if !default_confidence {
        for (i, run) in r.runs.iter().enumerate() {
            if let Some(rank) = run
                .items
                .iter()
                .take(k)
                .position(|it| it.verbalized_confidence.is_none())
            {
                return Err(AggregationError::MissingConfidence {
                    run: i + 1,
                    rank: rank + 1,
                });
            }
        }
    }
    positional_vote(
        r,
        k,
        dedup,
        |it| it.verbalized_confidence.unwrap_or(1.0),
        |support, total| if total > 0.0 { support / total } else { 0.0 },
    )
}

/// Every ordered pair `(i < j)` inside a run yields `items[i] > items[j]`; pairs of the
/// same action are skipped. Output is sorted by `(winner, loser)`.
pub fn extract_pairwise_preferences(r: &SampleRecord) -> Vec<PairwisePreference> {
    let mut counts: BTreeMap<(&ActionLabel, &ActionLabel), u64> = BTreeMap::new();
    for run in &r.runs {
        for (i, hi) in run.items.iter().enumerate() {
            for lo in &run.items[i + 1..] {
                if hi.action != lo.action {
                    *counts.entry((&hi.action, &lo.action)).or_default() += 1;
                }
            }
        }
    }
    counts
        .into_iter()
        .map(|((w, l), count)| PairwisePreference {
            winner: w.clone(),
            loser: l.clone(),
            count,
        })
        .collect()
}

/// Win counts over the record's unique actions (label order).
pub fn preference_counts(r: &SampleRecord) -> PreferenceCounts {
    let actions: Vec<ActionLabel> = r
        .runs
        .iter()
        .flat_map(|run| run.items.iter().map(|it| it.action.clone()))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let index: BTreeMap<&ActionLabel, usize> =
        actions.iter().enumerate().map(|(i, a)| (a, i)).collect();
    let prefs = extract_pairwise_preferences(r);
    let mut counts = PreferenceCounts::zeros(actions.clone());
    for p in prefs {
        counts.add_wins(index[&p.winner], index[&p.loser], p.count);
    }
    counts
}

/// Full Bradley–Terry distribution over the record's unique actions.
pub fn pairrank_distribution(
    r: &SampleRecord,
    cfg: &BtConfig,
) -> Result<BtScores, AggregationError> {
    if r.runs.is_empty() {
        return Err(AggregationError::EmptyRecord);
    }
    Ok(fit_bradley_terry(&preference_counts(r), cfg)?)
}

/// Indices of `scores` sorted by score descending, then support descending, then label.
pub fn rank_by_scores(actions: &[ActionLabel], scores: &[f64], support: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..actions.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .total_cmp(&scores[a])
            .then(support[b].total_cmp(&support[a]))
            .then(actions[a].cmp(&actions[b]))
    });
    order
}

fn total_support(r: &SampleRecord, actions: &[ActionLabel]) -> Vec<f64> {
    let mut terms: BTreeMap<&ActionLabel, Vec<f64>> = BTreeMap::new();
    for it in r.runs.iter().flat_map(|run| &run.items) {
        terms
            .entry(&it.action)
            .or_default()
            .push(it.verbalized_confidence.unwrap_or(0.0));
    }
    actions
        .iter()
        .map(|a| stable_sum(terms.remove(a).unwrap_or_default()))
        .collect()
}

/// Bradley–Terry ranking with `P_hat(a)` as confidence. When fewer than `k` unique
/// actions exist the output is shorter than `k`.
pub fn aggregate_pairrank(
    r: &SampleRecord,
    k: usize,
    cfg: &BtConfig,
) -> Result<AggregatedPrediction, AggregationError> {
    if k == 0 {
        return Err(AggregationError::InvalidK);
    }
    let fit = pairrank_distribution(r, cfg)?;
    let support = total_support(r, &fit.actions);
    let entries = rank_by_scores(&fit.actions, &fit.s, &support)
        .into_iter()
        .take(k)
        .map(|i| AggregatedEntry {
            action: fit.actions[i].clone(),
            confidence: fit.p_hat[i],
        })
        .collect();
    Ok(AggregatedPrediction {
        entries,
        requested_k: k,
    })
}

/// First run verbatim, truncated to `k`; absent verbalized confidences become 1.0.
pub fn aggregate_single_run(
    r: &SampleRecord,
    k: usize,
) -> Result<AggregatedPrediction, AggregationError> {
    single_impl(r, k, false)
}

fn single_impl(
    r: &SampleRecord,
    k: usize,
    dedup: bool,
) -> Result<AggregatedPrediction, AggregationError> {
    if k == 0 {
        return Err(AggregationError::InvalidK);
    }
    let run = r.runs.first().ok_or(AggregationError::EmptyRecord)?;
    let mut entries: Vec<AggregatedEntry> = Vec::new();
    for it in &run.items {
        if entries.len() == k {
            break;
        }
        if dedup && entries.iter().any(|e| e.action == it.action) {
            continue;
        }
        entries.push(AggregatedEntry {
            action: it.action.clone(),
            confidence: it.verbalized_confidence.unwrap_or(1.0),
        });
    }
    Ok(AggregatedPrediction {
        entries,
        requested_k: k,
    })
}

pub fn aggregate(
    r: &SampleRecord,
    strategy: StrategyId,
    k: usize,
    opts: &AggregationOptions,
) -> Result<AggregatedPrediction, AggregationError> {
    match strategy {
        StrategyId::Consistency => consistency_impl(r, k, opts.dedup),
        StrategyId::ConfidenceWeighted => weighted_impl(r, k, opts.default_confidence, opts.dedup),
        StrategyId::PairRank => aggregate_pairrank(r, k, &opts.bt),
        StrategyId::SingleRun => single_impl(r, k, opts.dedup),
    }
}
