//! Generators and property checks shared by the proptest suite and the acceptance runner.
#![allow(dead_code)]

use proptest::prelude::*;
use proptest::test_runner::TestCaseError;

use topk_uncert::aggregation::{aggregate, rank_by_scores, AggregationOptions, StrategyId};
use topk_uncert::btrank::{bt_log_likelihood, fit_bradley_terry, BtConfig, PreferenceCounts};
use topk_uncert::metrics::{
    normalized_entropy_of, recall_at_k, threshold_sweep, EvaluatedSample, ThresholdGrid,
};
use topk_uncert::model::{
    canonicalize_label, ActionLabel, PredictionItem, PredictionRun, SampleRecord,
};

pub const POOL: [&str; 7] = [
    "cut tomato",
    "take knife",
    "open fridge",
    "wash cup",
    "pour oil",
    "mix bowl",
    "close lid",
];

pub fn label(s: &str) -> ActionLabel {
    canonicalize_label(s).unwrap()
}

pub fn arb_run(max_len: usize, with_conf: bool) -> impl Strategy<Value = PredictionRun> {
    prop::collection::vec((0..POOL.len(), 0.0..=1.0f64, any::<bool>()), 1..=max_len).prop_map(
        move |items| PredictionRun {
            items: items
                .into_iter()
                .map(|(i, c, keep)| {
                    PredictionItem::new(label(POOL[i]), (with_conf || keep).then_some(c))
                })
                .collect(),
        },
    )
}

pub fn arb_record() -> impl Strategy<Value = SampleRecord> {
    (
        prop::collection::vec(arb_run(6, false), 1..=6),
        0..POOL.len(),
    )
        .prop_map(|(runs, t)| SampleRecord {
            segment_id: "seg".into(),
            ground_truth: label(POOL[t]),
            runs,
        })
}

/// Record plus a permutation of its runs.
pub fn arb_record_and_perm() -> impl Strategy<Value = (SampleRecord, Vec<usize>)> {
    arb_record().prop_flat_map(|r| {
        let m = r.runs.len();
        (Just(r), Just((0..m).collect::<Vec<_>>()).prop_shuffle())
    })
}

pub fn arb_samples() -> impl Strategy<Value = Vec<EvaluatedSample>> {
    prop::collection::vec(arb_record(), 1..=12).prop_map(|records| {
        records
            .iter()
            .map(|r| {
                let p = aggregate(
                    r,
                    StrategyId::Consistency,
                    8,
                    &AggregationOptions::default(),
                )
                .unwrap();
                EvaluatedSample::new("s", r.ground_truth.clone(), p).unwrap()
            })
            .collect()
    })
}

pub fn arb_counts(max_n: usize, max_w: u64) -> impl Strategy<Value = PreferenceCounts> {
    (2..=max_n).prop_flat_map(move |n| {
        prop::collection::vec(0..=max_w, n * n).prop_map(move |flat| {
            let wins = (0..n)
                .map(|i| {
                    (0..n)
                        .map(|j| if i == j { 0 } else { flat[i * n + j] })
                        .collect()
                })
                .collect();
            PreferenceCounts::unlabeled(wins).unwrap()
        })
    })
}

fn fail(msg: String) -> Result<(), TestCaseError> {
    Err(TestCaseError::fail(msg))
}

/// Every strategy ignores run order. SingleRun reads run 0 by definition, so for it only
/// the remaining runs are shuffled.
pub fn check_run_permutation(r: &SampleRecord, perm: &[usize]) -> Result<(), TestCaseError> {
    let opts = AggregationOptions {
        default_confidence: true,
        ..AggregationOptions::default()
    };
    let shuffled = SampleRecord {
        runs: perm.iter().map(|&i| r.runs[i].clone()).collect(),
        ..r.clone()
    };
    let mut tail_only = r.clone();
    let mut rest: Vec<usize> = perm.iter().copied().filter(|&i| i != 0).collect();
    rest.insert(0, 0);
    tail_only.runs = rest.iter().map(|&i| r.runs[i].clone()).collect();
    for s in StrategyId::ALL {
        for k in [1, 3, 10] {
            let base = aggregate(r, s, k, &opts).map_err(|e| TestCaseError::fail(e.to_string()))?;
            let other_input = if s == StrategyId::SingleRun {
                &tail_only
            } else {
                &shuffled
            };
            let other = aggregate(other_input, s, k, &opts)
                .map_err(|e| TestCaseError::fail(e.to_string()))?;
            if base != other {
                return fail(format!("{s:?} k={k}: {base:?} != {other:?}"));
            }
        }
    }
    Ok(())
}

pub fn check_recall_monotone(samples: &[EvaluatedSample]) -> Result<(), TestCaseError> {
    let mut prev = 0.0;
    for k in 1..=10 {
        let r = recall_at_k(samples, k).unwrap();
        if r < prev {
            return fail(format!("recall@{k} = {r} < {prev}"));
        }
        prev = r;
    }
    Ok(())
}

pub fn check_coverage_monotone(samples: &[EvaluatedSample]) -> Result<(), TestCaseError> {
    let grid = ThresholdGrid::default().points().unwrap();
    let curve = threshold_sweep(samples, &grid).unwrap();
    if curve.points[0].coverage != 1.0 {
        return fail(format!("coverage at 0 is {}", curve.points[0].coverage));
    }
    for w in curve.points.windows(2) {
        if w[1].coverage > w[0].coverage {
            return fail(format!(
                "coverage rises between tau={} and tau={}",
                w[0].tau, w[1].tau
            ));
        }
    }
    Ok(())
}

pub fn arb_entropy_case() -> impl Strategy<Value = (Vec<f64>, f64)> {
    (
        prop::collection::vec(0.0..=1.0f64, 2..=12)
            .prop_filter("positive mass", |c| c.iter().sum::<f64>() > 1e-6),
        -3.0..3.0f64,
    )
        .prop_map(|(c, e)| (c, 10f64.powf(e)))
}

pub fn check_entropy_scale(c: &[f64], lambda: f64) -> Result<(), TestCaseError> {
    let a = normalized_entropy_of(c).unwrap();
    let scaled: Vec<f64> = c.iter().map(|x| x * lambda).collect();
    let b = normalized_entropy_of(&scaled).unwrap();
    if (a - b).abs() > 1e-12 || !(0.0..=1.0).contains(&a) {
        return fail(format!("H={a} vs H(scaled)={b}"));
    }
    Ok(())
}

pub fn check_set_correct_monotone(samples: &[EvaluatedSample]) -> Result<(), TestCaseError> {
    for s in samples {
        for k in 1..12 {
            if s.set_correct(k) && !s.set_correct(k + 1) {
                return fail(format!(
                    "set correctness lost between k={k} and k={}",
                    k + 1
                ));
            }
        }
    }
    Ok(())
}

/// Likelihood and ranking ignore a common shift of `s`; the fit is equivariant under
/// relabelling of actions.
pub fn check_bt_invariances(
    c: &PreferenceCounts,
    shift: f64,
    perm: &[usize],
) -> Result<(), TestCaseError> {
    let cfg = BtConfig::default();
    let fit = fit_bradley_terry(c, &cfg).map_err(|e| TestCaseError::fail(e.to_string()))?;
    let shifted: Vec<f64> = fit.s.iter().map(|x| x + shift).collect();
    let l0 = bt_log_likelihood(c, &fit.s, cfg.epsilon);
    let l1 = bt_log_likelihood(c, &shifted, cfg.epsilon);
    if (l0 - l1).abs() > 1e-9 * l0.abs().max(1.0) {
        return fail(format!("shift changed likelihood: {l0} vs {l1}"));
    }
    let support = vec![0.0; c.len()];
    if rank_by_scores(c.actions(), &fit.s, &support)
        != rank_by_scores(c.actions(), &shifted, &support)
    {
        return fail("shift changed ranking".into());
    }
    let pfit = fit_bradley_terry(&c.permuted(perm), &cfg)
        .map_err(|e| TestCaseError::fail(e.to_string()))?;
    for (new, &old) in perm.iter().enumerate() {
        if (pfit.p_hat[new] - fit.p_hat[old]).abs() > 1e-9 {
            return fail(format!(
                "relabelling moved p_hat: {} vs {}",
                pfit.p_hat[new], fit.p_hat[old]
            ));
        }
    }
    Ok(())
}

pub fn arb_bt_case() -> impl Strategy<Value = (PreferenceCounts, f64, Vec<usize>)> {
    arb_counts(6, 8).prop_flat_map(|c| {
        let n = c.len();
        (
            Just(c),
            -50.0..50.0f64,
            Just((0..n).collect::<Vec<_>>()).prop_shuffle(),
        )
    })
}

/// Record whose every item carries the same verbalized confidence.
pub fn arb_constant_conf_record() -> impl Strategy<Value = SampleRecord> {
    (arb_record(), 0.01..=1.0f64).prop_map(|(mut r, p)| {
        for it in r.runs.iter_mut().flat_map(|run| run.items.iter_mut()) {
            it.verbalized_confidence = Some(p);
        }
        r
    })
}

pub fn check_weighted_reduces_to_consistency(r: &SampleRecord) -> Result<(), TestCaseError> {
    let opts = AggregationOptions::default();
    for k in [1, 4, 10] {
        let w = aggregate(r, StrategyId::ConfidenceWeighted, k, &opts).unwrap();
        let c = aggregate(r, StrategyId::Consistency, k, &opts).unwrap();
        let wa: Vec<_> = w.entries.iter().map(|e| &e.action).collect();
        let ca: Vec<_> = c.entries.iter().map(|e| &e.action).collect();
        if wa != ca {
            return fail(format!("k={k}: weighted {wa:?} vs consistency {ca:?}"));
        }
    }
    Ok(())
}
