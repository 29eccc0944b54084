//! Synthetic stochastic Top-K predictor.
//!
//! Each segment gets a latent preference vector `pi ~ Dirichlet(1 / concentration)`
//! over the vocabulary, so larger `concentration` means sparser, sharper
//! preferences. Decoding tempers it to `pi^(1/T)` and every run is a
//! Plackett–Luce draw (sequential sampling without replacement) from those weights.
//! The verbalized confidence of a drawn item is its share of the mass still
//! available at that step, shifted by `confidence_bias` and clamped to `[0, 1]`.
//!
//! The ground truth is drawn from the same tempered distribution that rank 1 is drawn
//! from, so with zero bias the rank-1 verbalized confidence is exactly
//! `P(rank 1 is correct | confidence)`.
//!
//! Everything is computed in log space: with very large `concentration` the weights
//! differ by thousands of orders of magnitude and runs become deterministic.
//!
//! Segment `j` uses its own ChaCha stream (`stream = j`) of the master seed, so
//! output does not depend on how segments are scheduled across threads.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    canonicalize_label, ActionLabel, Dataset, PredictionItem, PredictionRun, SampleRecord,
};
use crate::par::{map_range, Exec};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthError {
    #[error("invalid config field `{field}`: {reason}")]
    InvalidConfig { field: &'static str, reason: String },
    #[error("invalid weights: {0}")]
    InvalidWeights(String),
}

fn default_m_runs() -> usize {
    5
}

fn default_k() -> usize {
    10
}

fn default_temperature() -> f64 {
    0.8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    pub vocab_size: usize,
    pub n_samples: usize,
    #[serde(default = "default_m_runs")]
    pub m_runs: usize,
    #[serde(default = "default_k")]
    pub k: usize,
    pub concentration: f64,
    #[serde(default = "default_temperature")]
    pub decode_temperature: f64,
    #[serde(default)]
    pub confidence_bias: f64,
    pub seed: u64,
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |field: &'static str, reason: &str| {
            Err(SynthError::InvalidConfig {
                field,
                reason: reason.to_string(),
            })
        };
        if self.k < 1 {
            return bad("k", "must be >= 1");
        }
        if self.vocab_size < self.k {
            return bad("vocab_size", "must be >= k");
        }
        if self.n_samples < 1 {
            return bad("n_samples", "must be >= 1");
        }
        if self.m_runs < 1 {
            return bad("m_runs", "must be >= 1");
        }
        if !(self.concentration > 0.0 && self.concentration.is_finite()) {
            return bad("concentration", "must be finite and > 0");
        }
        if !(self.decode_temperature > 0.0 && self.decode_temperature.is_finite()) {
            return bad("decode_temperature", "must be finite and > 0");
        }
        if !self.confidence_bias.is_finite() {
            return bad("confidence_bias", "must be finite");
        }
        Ok(())
    }
}

/// One Plackett–Luce draw: vocabulary index and its share of the remaining mass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlDraw {
    pub index: usize,
    pub share: f64,
}

/// Draws `k` items without replacement, each with probability proportional to its
/// weight among the items not yet drawn.
pub fn sample_plackett_luce_run<R: Rng + ?Sized>(
    weights: &[f64],
    k: usize,
    rng: &mut R,
) -> Result<Vec<PlDraw>, SynthError> {
    if weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
        return Err(SynthError::InvalidWeights(
            "weights must be finite and positive".into(),
        ));
    }
    let logs: Vec<f64> = weights.iter().map(|w| w.ln()).collect();
    sample_plackett_luce_log(&logs, k, rng)
}

/// [`sample_plackett_luce_run`] on log-weights.
pub fn sample_plackett_luce_log<R: Rng + ?Sized>(
    log_weights: &[f64],
    k: usize,
    rng: &mut R,
) -> Result<Vec<PlDraw>, SynthError> {
    if k == 0 || k > log_weights.len() {
        return Err(SynthError::InvalidWeights(format!(
            "k = {k} must be in 1..={}",
            log_weights.len()
        )));
    }
    if log_weights.iter().any(|w| !w.is_finite()) {
        return Err(SynthError::InvalidWeights(
            "log-weights must be finite".into(),
        ));
    }
    let mut remaining: Vec<usize> = (0..log_weights.len()).collect();
    let mut draws = Vec::with_capacity(k);
    let mut mass = Vec::with_capacity(remaining.len());
    for _ in 0..k {
        let top = remaining
            .iter()
            .map(|&i| log_weights[i])
            .fold(f64::NEG_INFINITY, f64::max);
        mass.clear();
        mass.extend(remaining.iter().map(|&i| (log_weights[i] - top).exp()));
        let total: f64 = mass.iter().sum();
        let u = rng.random::<f64>() * total;
        let mut acc = 0.0;
        let mut pick = None;
        for (slot, &m) in mass.iter().enumerate() {
            acc += m;
            if u < acc {
                pick = Some(slot);
                break;
            }
        }
        // Rounding can leave u >= acc; fall back to the last item with mass.
        let slot = pick.unwrap_or_else(|| mass.iter().rposition(|&m| m > 0.0).unwrap_or(0));
        draws.push(PlDraw {
            index: remaining[slot],
            share: mass[slot] / total,
        });
        remaining.remove(slot);
    }
    Ok(draws)
}

/// Tempered per-segment log-weights. Sorting them descending gives the preference order.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentPreference {
    pub log_weights: Vec<f64>,
}

impl LatentPreference {
    /// Vocabulary indices, most preferred first.
    pub fn order(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.log_weights.len()).collect();
        idx.sort_by(|&a, &b| {
            self.log_weights[b]
                .total_cmp(&self.log_weights[a])
                .then(a.cmp(&b))
        });
        idx
    }

    /// Rank-1 selection probabilities.
    pub fn probabilities(&self) -> Vec<f64> {
        let top = self
            .log_weights
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = self.log_weights.iter().map(|w| (w - top).exp()).collect();
        let total: f64 = e.iter().sum();
        e.into_iter().map(|x| x / total).collect()
    }
}

/// Seam for anything that emits one Top-K run per call for a segment.
/// Calls with identical rng state must return identical runs.
pub trait StochasticPredictor {
    type Context;

    fn predict<R: Rng + ?Sized>(&self, context: &Self::Context, rng: &mut R) -> PredictionRun;
}

pub struct PlackettLucePredictor<'a> {
    pub vocab: &'a [ActionLabel],
    pub k: usize,
    pub confidence_bias: f64,
}

impl StochasticPredictor for PlackettLucePredictor<'_> {
    type Context = LatentPreference;

    fn predict<R: Rng + ?Sized>(&self, context: &LatentPreference, rng: &mut R) -> PredictionRun {
        let draws = sample_plackett_luce_log(&context.log_weights, self.k, rng)
            .expect("generator validates k and weights");
        PredictionRun {
            items: draws
                .into_iter()
                .map(|d| {
                    PredictionItem::new(
                        self.vocab[d.index].clone(),
                        Some((d.share + self.confidence_bias).clamp(0.0, 1.0)),
                    )
                })
                .collect(),
        }
    }
}

const VERBS: [&str; 12] = [
    "take", "put", "open", "close", "wash", "cut", "pour", "mix", "turn on", "turn off", "move",
    "spread",
];
const NOUNS: [&str; 16] = [
    "knife", "tomato", "cup", "bowl", "fridge", "drawer", "pan", "plate", "spoon", "lid", "onion",
    "tap", "oil", "bread", "sponge", "cheese",
];

/// Deterministic verb-noun vocabulary of the requested size.
pub fn vocabulary(size: usize) -> Vec<ActionLabel> {
    let combos = VERBS.len() * NOUNS.len();
    (0..size)
        .map(|i| {
            let base = format!(
                "{} {}",
                VERBS[i % VERBS.len()],
                NOUNS[(i / VERBS.len()) % NOUNS.len()]
            );
            let raw = if i < combos {
                base
            } else {
                format!("{base} {}", i / combos + 1)
            };
            canonicalize_label(&raw).expect("non-empty")
        })
        .collect()
}

/// `ln X` for `X ~ Gamma(shape, 1)`, valid for tiny shapes where `X` underflows.
fn log_gamma_sample<R: Rng + ?Sized>(shape: f64, rng: &mut R) -> f64 {
    let boosted = Gamma::new(shape + 1.0, 1.0).expect("shape > 0");
    let g: f64 = boosted.sample(rng);
    // 1 - U lies in (0, 1], so the log is finite.
    let u: f64 = 1.0 - rng.random::<f64>();
    g.ln() + u.ln() / shape
}

fn segment_rng(seed: u64, segment: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(segment as u64);
    rng
}

fn simulate_segment(
    cfg: &GeneratorConfig,
    vocab: &[ActionLabel],
    j: usize,
) -> (SampleRecord, LatentPreference) {
    let mut rng = segment_rng(cfg.seed, j);
    let alpha = 1.0 / cfg.concentration;
    let log_x: Vec<f64> = (0..cfg.vocab_size)
        .map(|_| log_gamma_sample(alpha, &mut rng))
        .collect();
    let top = log_x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_norm = top + log_x.iter().map(|x| (x - top).exp()).sum::<f64>().ln();
    let latent = LatentPreference {
        log_weights: log_x
            .iter()
            .map(|x| (x - log_norm) / cfg.decode_temperature)
            .collect(),
    };

    let truth = sample_plackett_luce_log(&latent.log_weights, 1, &mut rng).expect("valid")[0].index;
    let predictor = PlackettLucePredictor {
        vocab,
        k: cfg.k,
        confidence_bias: cfg.confidence_bias,
    };
    let runs = (0..cfg.m_runs)
        .map(|_| predictor.predict(&latent, &mut rng))
        .collect();
    let record = SampleRecord {
        segment_id: format!("syn-{j:06}"),
        ground_truth: vocab[truth].clone(),
        runs,
    };
    (record, latent)
}

/// Dataset plus the latent preference behind every record.
pub fn generate_with_truth(
    cfg: &GeneratorConfig,
    exec: Exec,
) -> Result<(Dataset, Vec<LatentPreference>), SynthError> {
    cfg.validate()?;
    let vocab = vocabulary(cfg.vocab_size);
    let (records, latents): (Vec<_>, Vec<_>) =
        map_range(exec, cfg.n_samples, |j| simulate_segment(cfg, &vocab, j))
            .into_iter()
            .unzip();
    let mut meta = BTreeMap::new();
    meta.insert("source".into(), "synthgen".into());
    meta.insert("record_count".into(), records.len().to_string());
    meta.insert("seed".into(), cfg.seed.to_string());
    meta.insert(
        "generator_config".into(),
        serde_json::to_string(cfg).expect("config serializes"),
    );
    Ok((Dataset { records, meta }, latents))
}

pub fn generate_dataset(cfg: &GeneratorConfig) -> Result<Dataset, SynthError> {
    generate_with_truth(cfg, Exec::default()).map(|(ds, _)| ds)
}
