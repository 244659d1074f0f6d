//! Quantitative evaluation: metrics, reports and adaptation benchmarks.

pub mod adapt;
pub mod metrics;
pub mod report;

pub use adapt::{adaptation_benchmark, perturb_melody, recovery, recovery_ratio, AdaptationResult, Recovery, Scenario};
pub use metrics::*;
pub use report::{evaluate_model, generate_all, score_tracks, EvalOutput, EvalReport};
