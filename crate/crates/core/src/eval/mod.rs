pub mod ablation;
pub mod heatmap;
pub mod metrics;

pub use ablation::{relative_change, run_ablation, train_and_test, AblationReport, RelativeChange, Variant};
pub use heatmap::{attention_heatmaps, HeatmapBundle};
pub use metrics::{
    evaluate, horizon_slice, masked_metrics, persistence_report, report_horizons, ErrorSums, HorizonMetrics, Metrics,
    MetricsReport,
};
