//! Data handling, training, evaluation and ablation.

pub mod ablation;
pub mod config;
pub mod data;
pub mod evaluate;
pub mod metrics;
pub mod train;

pub use ablation::{ablate, AblationRow, AblationTable};
pub use config::{Ablation, Stage, TrainConfig};
pub use data::{augment, ingest_pairs, load_dataset, synth_dataset, write_dataset, Sample};
pub use evaluate::{baseline, evaluate, Cascade};
pub use metrics::{psnr, ssim, MetricsReport};
pub use train::{train, train_from, HistoryRow, Models, TrainOutput};
