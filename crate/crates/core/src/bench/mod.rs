//! Baselines, metrics and the variable-wise evaluation protocol.

pub mod baselines;
pub mod config;
pub mod metrics;
pub mod protocol;
pub mod report;

pub use baselines::{forecast_last, impute_last, impute_median};
pub use config::{BenchConfig, Corpus, DataConfig, ModelKind, ProtocolConfig};
pub use metrics::{metric_mse_mae, Metric, MetricSpace, MetricSum};
pub use protocol::{eval_mask_seed, evaluate, run_protocol, Average, BenchReport, Cell, Engines};
pub use report::{parse_report_csv, render_csv, render_jsonl, render_report};
