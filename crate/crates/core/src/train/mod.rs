//! Two-stage connector training, checkpoints, the ablation matrix, and throughput.

pub mod checkpoint;
pub mod manifest;
pub mod matrix;
pub mod stages;
pub mod throughput;

pub use checkpoint::{read_file, read_file_as, write_file, Checkpoint, Stage, FORMAT_VERSION, MAGIC};
pub use manifest::{BaseManifest, Cell, DataSpec, Hyperparams, RunManifest, Seeds};
pub use matrix::{
    build_vision_cache, load_vision_cache, manifest_for, read_train_log, run_ablation_matrix, run_cell, save_vision_cache, vision_cache_path,
    CellOutcome, IndexEntry, LogEvent, MatrixIndex, RunStatus, VisionCacheHeader, INDEX_FILE, MANIFEST_FILE,
    STAGE1_FILE, STAGE2_FILE, THROUGHPUT_FILE, TRAIN_LOG_FILE,
};
pub use stages::{
    answer_accuracy, batch_gradients, init_checkpoint, prepare_examples, stage1_pretrain_connector, stage2_finetune,
    Example, StepHook, StepRecord,
};
pub use throughput::{measure_throughput, ThroughputReport, Workload};

use std::path::PathBuf;

use thiserror::Error;

use crate::data::DataError;
use crate::model::ModelError;
use crate::numeric::NumericError;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Numeric(#[from] NumericError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("checkpoint format error: {0}")]
    Format(String),
    #[error("unsupported checkpoint version {found} (this build reads version {supported})")]
    UnsupportedVersion { found: u16, supported: u16 },
    #[error("stage contract violated: {0}")]
    Contract(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("no pretrained vision tower {variant} at {}; run `mmfm pretrain-vision --variant {variant}` first", path.display())]
    MissingVisionCache { variant: String, path: PathBuf },
    #[error("throughput measurement error: {0}")]
    Measurement(String),
}
