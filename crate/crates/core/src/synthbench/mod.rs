//! Synthetic spine candidates, labeling metrics and the inference-cost
//! benchmark.
//!
//! A case is a column of `V` discs with jittered gaps and lateral offsets.
//! Every disc yields one detection displaced by 2D Gaussian noise (or none,
//! with probability `drop_tp_probability`), and `fp_count` false positives
//! are drawn uniformly around the spine, each at least `fp_min_distance` from
//! every disc and detection. Points are shuffled before being returned.

pub mod bench;
pub mod dataset;
pub mod evaluate;
pub mod generate;
pub mod metrics;

pub use bench::{bench_inference, BenchConfig, BenchRow};
pub use dataset::{load_jsonl, save_jsonl, write_jsonl};
pub use evaluate::{evaluate_method, run_method, CaseRun, EvalOptions, Method, MethodEval, TemplateSource};
pub use generate::{generate_case, generate_dataset, SynthConfig};
pub use metrics::{
    auc, classification_metrics, dtt, match_and_rate, match_with, roc_auc_trapezoid, Confusion, DttAxis,
    MatchReport, MatchStrategy, MatchedPair, MetricAccumulator, MetricReport, MATCH_RADIUS_MM,
};
