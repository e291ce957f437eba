//! Greedy exact-match scoring of checkpoints on the benchmark analogs.
//!
//! Record files live at `<run_dir>/eval/<benchmark>.jsonl` with one
//! [`EvalRecord`] per line, next to `<benchmark>.summary.json`.

mod metrics;
mod normalize;

pub use metrics::{f1_from_records, summarize, BinaryMetrics, MetricSummary};
pub use normalize::{normalize_answer, parse_options};

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{BenchmarkName, DataError, Sample, Tokenizer};
use crate::model::{LmPreset, ModelError, MultimodalModel, VisionVariant};
use crate::train::{Checkpoint, RunManifest, TrainError};

/// Answers longer than this are truncated before normalization.
pub const MAX_ANSWER_TOKENS: usize = 8;

/// Items decoded in parallel between two flushes of the record file.
const WRITE_CHUNK: usize = 64;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("input error: {0}")]
    Input(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Design flags of a run, as 0/1 regressors.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DesignFlags {
    pub skip_pretrain: u8,
    pub dino_like: u8,
    pub large_lm: u8,
}

impl DesignFlags {
    pub fn of(manifest: &RunManifest) -> Self {
        DesignFlags {
            skip_pretrain: (!manifest.pretrain_connector) as u8,
            dino_like: (manifest.vision_variant == VisionVariant::B) as u8,
            large_lm: (manifest.lm_preset == LmPreset::L) as u8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub run_id: String,
    pub benchmark: BenchmarkName,
    pub item_id: u64,
    /// Normalized prediction.
    pub predicted: String,
    /// Normalized gold answer.
    pub gold: String,
    pub correct: u8,
    pub skip_pretrain: u8,
    pub dino_like: u8,
    pub large_lm: u8,
}

impl EvalRecord {
    pub fn new(run_id: &str, benchmark: BenchmarkName, item: &Sample, raw_prediction: &str, flags: DesignFlags) -> Self {
        let options = parse_options(&item.question);
        let predicted = normalize_answer(raw_prediction, &options);
        let gold = normalize_answer(&item.answer, &options);
        EvalRecord {
            run_id: run_id.to_string(),
            benchmark,
            item_id: item.id,
            correct: (predicted == gold) as u8,
            predicted,
            gold,
            skip_pretrain: flags.skip_pretrain,
            dino_like: flags.dino_like,
            large_lm: flags.large_lm,
        }
    }

    pub fn flags(&self) -> DesignFlags {
        DesignFlags { skip_pretrain: self.skip_pretrain, dino_like: self.dino_like, large_lm: self.large_lm }
    }
}

/// Something that answers a benchmark item with raw text.
pub trait Answerer: Sync {
    fn answer(&self, item: &Sample) -> Result<String, EvalError>;
}

/// Greedy decoding with a trained model.
pub struct GreedyAnswerer<'a> {
    pub model: &'a MultimodalModel<f32>,
    pub tokenizer: Tokenizer,
}

impl<'a> GreedyAnswerer<'a> {
    pub fn new(model: &'a MultimodalModel<f32>, tokenizer: Tokenizer) -> Result<Self, EvalError> {
        let model_vocab = model.config.language.vocab_size;
        if tokenizer.vocab_size() != model_vocab {
            return Err(EvalError::Config(format!(
                "tokenizer has {} ids but the checkpoint embeds {model_vocab}",
                tokenizer.vocab_size()
            )));
        }
        Ok(GreedyAnswerer { model, tokenizer })
    }
}

impl Answerer for GreedyAnswerer<'_> {
    fn answer(&self, item: &Sample) -> Result<String, EvalError> {
        let prompt = item.prompt_ids(&self.tokenizer)?;
        let ids = self.model.generate(&item.scene.render(), &prompt, MAX_ANSWER_TOKENS)?;
        Ok(self.tokenizer.decode(&ids))
    }
}

/// Scores `items` in item order, handing each finished chunk of records to `sink`.
pub fn evaluate_with<A: Answerer>(
    answerer: &A,
    run_id: &str,
    flags: DesignFlags,
    benchmark: BenchmarkName,
    items: &[Sample],
    mut sink: impl FnMut(&[EvalRecord]) -> Result<(), EvalError>,
) -> Result<(Vec<EvalRecord>, MetricSummary), EvalError> {
    if items.is_empty() {
        return Err(EvalError::Input(format!("benchmark {benchmark} has no items")));
    }
    let mut records = Vec::with_capacity(items.len());
    for chunk in items.chunks(WRITE_CHUNK) {
        let done: Vec<EvalRecord> = chunk
            .par_iter()
            .map(|item| Ok(EvalRecord::new(run_id, benchmark, item, &answerer.answer(item)?, flags)))
            .collect::<Result<_, EvalError>>()?;
        sink(&done)?;
        records.extend(done);
    }
    let summary = summarize(benchmark, &records)?;
    Ok((records, summary))
}

/// Greedy evaluation of a checkpoint, in memory.
pub fn evaluate(
    checkpoint: &Checkpoint,
    tokenizer: &Tokenizer,
    benchmark: BenchmarkName,
    items: &[Sample],
) -> Result<(Vec<EvalRecord>, MetricSummary), EvalError> {
    let model = checkpoint.model()?;
    let answerer = GreedyAnswerer::new(&model, tokenizer.clone())?;
    let m = &checkpoint.manifest;
    evaluate_with(&answerer, &m.run_id, DesignFlags::of(m), benchmark, items, |_| Ok(()))
}

pub fn records_path(run_dir: &Path, benchmark: BenchmarkName) -> PathBuf {
    run_dir.join("eval").join(format!("{benchmark}.jsonl"))
}

pub fn summary_path(run_dir: &Path, benchmark: BenchmarkName) -> PathBuf {
    run_dir.join("eval").join(format!("{benchmark}.summary.json"))
}

/// Like [`evaluate`], streaming records to the run's eval directory as they are produced.
pub fn evaluate_to_dir(
    checkpoint: &Checkpoint,
    tokenizer: &Tokenizer,
    benchmark: BenchmarkName,
    items: &[Sample],
    run_dir: &Path,
) -> Result<MetricSummary, EvalError> {
    let model = checkpoint.model()?;
    let answerer = GreedyAnswerer::new(&model, tokenizer.clone())?;
    let m = &checkpoint.manifest;
    let path = records_path(run_dir, benchmark);
    fs::create_dir_all(path.parent().expect("records path has a parent"))?;
    let mut out = BufWriter::new(fs::File::create(&path)?);
    let (_, summary) = evaluate_with(&answerer, &m.run_id, DesignFlags::of(m), benchmark, items, |chunk| {
        for r in chunk {
            serde_json::to_writer(&mut out, r)?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(())
    })?;
    fs::write(summary_path(run_dir, benchmark), serde_json::to_vec_pretty(&summary)?)?;
    Ok(summary)
}

pub fn read_records(path: &Path) -> Result<Vec<EvalRecord>, EvalError> {
    let text = fs::read_to_string(path)?;
    text.lines().filter(|l| !l.trim().is_empty()).map(|l| Ok(serde_json::from_str(l)?)).collect()
}
