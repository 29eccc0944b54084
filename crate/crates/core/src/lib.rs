//! Aggregation of stochastic multi-run Top-K prediction logs and decision-aware
//! evaluation of the resulting confidence scores.
//!
//! * [`model`]: domain types and the JSONL log format
//! * [`aggregation`]: consistency, confidence-weighted, PairRank and single-run strategies
//! * [`btrank`]: Bradley–Terry maximum-likelihood fit used by PairRank
//! * [`metrics`]: correctness, calibration, selective execution and confidence geometry
//! * [`synthgen`]: seeded Plackett–Luce stand-in for a stochastic black-box predictor
//! * [`report`] and [`cli`]: evaluation reports and the `topk-uncert` command line
//!
//! Per-record work fans out over rayon when the default `parallel` feature is on.

pub mod aggregation;
pub mod btrank;
pub mod cli;
pub mod metrics;
pub mod model;
pub mod numeric;
pub mod par;
pub mod report;
pub mod synthgen;

pub use aggregation::{AggregationOptions, StrategyId};
pub use btrank::BtConfig;
pub use model::{ActionLabel, AggregatedPrediction, Dataset, SampleRecord};
pub use par::Exec;
