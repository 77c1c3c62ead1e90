//! Experiment drivers: datasets, cross-validation, metrics, the passive
//! comparison, timing and learning-curve aggregation.

pub mod config;
pub mod curves;
pub mod data;
pub mod kfold;
pub mod metrics;
pub mod passive;
pub mod timing;

pub use config::{ActiveSettings, BenchSettings, ExperimentConfig, WindowConfig};
pub use kfold::{stratified_kfold, Fold};
pub use metrics::{compute_metrics, roc_auc, ClassMetrics, MetricsReport};

/// Fixed-precision decimal used in every CSV output.
pub fn fixed(value: f64, decimals: usize) -> String {
    if value.is_nan() {
        "NaN".to_string()
    } else {
        format!("{value:.decimals$}")
    }
}
