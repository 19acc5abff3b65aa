//! Training loop, metrics, transfer initialization and run reporting.

mod curves;
mod data;
mod metrics;
mod train;
mod transfer;

pub use curves::{curve_rows, export_curves, export_overlay, read_curves, read_overlay, CurveRow, OverlayRow};
pub use data::{assemble_batch, Dataset, InMemoryDataset, ManifestDataset};
pub use metrics::{auc_score, evaluate, Evaluation};
pub use train::{
    config_digest, train, train_with, Datasets, EpochRecord, RunStatus, TaskTag, TestMetrics, TrainConfig,
    TrainOutcome, TrainReport,
};
pub use transfer::{transfer_init, TransferReport};
