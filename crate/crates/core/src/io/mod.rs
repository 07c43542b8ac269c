//! On-disk formats: checkpoints, metrics streams, plots, and dataset export.

pub mod checkpoint;
pub mod export;
pub mod metrics;
pub mod plots;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use metrics::{read_metrics, MetricsRecord, MetricsSink, MetricsWriter};
pub use plots::emit_plots;
