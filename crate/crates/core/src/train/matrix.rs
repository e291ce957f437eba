//! Ablation runs on disk.
//!
//! ```text
//! <root>/vision/vision-<A|B>.bin       cached pretrained vision towers
//! <root>/index.json                    MatrixIndex, replaced atomically
//! <root>/<run_id>/manifest.json
//! <root>/<run_id>/stage1.ckpt          only for runs that pretrain the connector
//! <root>/<run_id>/stage2.ckpt
//! <root>/<run_id>/train_log.jsonl      hash audits and per-step losses
//! <root>/<run_id>/throughput.json
//! ```

use std::fs;
use std::io::Write;
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::checkpoint::{read_file, write_file, Checkpoint, Stage};
use super::manifest::{BaseManifest, Cell, RunManifest};
use super::stages::{init_checkpoint, stage1_pretrain_connector, stage2_finetune, StepRecord};
use super::throughput::{generation_rate, hardware_description, ThroughputReport, MIN_MEASURED_STEPS, MIN_WARMUP_STEPS};
use super::TrainError;
use crate::data::{gen_instruction_corpus, gen_pretrain_corpus, gen_vision_corpus};
use crate::model::{
    component_hash, pretrain_vision, Component, ModelConfig, ParamStore, VisionPretrainConfig, VisionPretrainReport, VisionTowerConfig,
    VisionVariant,
};

pub const INDEX_FILE: &str = "index.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const STAGE1_FILE: &str = "stage1.ckpt";
pub const STAGE2_FILE: &str = "stage2.ckpt";
pub const TRAIN_LOG_FILE: &str = "train_log.jsonl";
pub const THROUGHPUT_FILE: &str = "throughput.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VisionCacheHeader {
    pub config: VisionTowerConfig,
    pub pretrain: VisionPretrainConfig,
    pub corpus_size: usize,
    pub corpus_seed: u64,
    pub report: VisionPretrainReport,
    pub hash: String,
}

pub fn vision_cache_path(root: &Path, variant: VisionVariant) -> PathBuf {
    root.join("vision").join(format!("vision-{}.bin", variant.as_str()))
}

pub fn save_vision_cache(root: &Path, header: &VisionCacheHeader, params: &ParamStore<f32>) -> Result<PathBuf, TrainError> {
    let path = vision_cache_path(root, header.config.variant);
    let arrays: Vec<(String, &[f32], Vec<usize>)> =
        params.iter().map(|(n, t)| (n.clone(), t.data(), t.shape().to_vec())).collect();
    write_file(&path, header, &arrays)?;
    Ok(path)
}

/// Pretrains a vision tower on a fresh vision corpus and caches it under `root`.
pub fn build_vision_cache(
    root: &Path,
    variant: VisionVariant,
    corpus_size: usize,
    corpus_seed: u64,
    pretrain: &VisionPretrainConfig,
) -> Result<VisionCacheHeader, TrainError> {
    let config = VisionTowerConfig::preset(variant);
    let corpus = gen_vision_corpus(corpus_size, corpus_seed)?;
    let (params, report) = pretrain_vision(&config, &corpus, pretrain)?;
    let header = VisionCacheHeader {
        config,
        pretrain: pretrain.clone(),
        corpus_size,
        corpus_seed,
        report,
        hash: component_hash(&params, Component::Vision),
    };
    save_vision_cache(root, &header, &params)?;
    Ok(header)
}

pub fn load_vision_cache(root: &Path, variant: VisionVariant) -> Result<(VisionCacheHeader, ParamStore<f32>), TrainError> {
    let path = vision_cache_path(root, variant);
    if !path.exists() {
        return Err(TrainError::MissingVisionCache { variant: variant.as_str().into(), path });
    }
    let (header, arrays): (VisionCacheHeader, _) = read_file(&path)?;
    let params: ParamStore<f32> = arrays.into_iter().collect();
    if component_hash(&params, Component::Vision) != header.hash {
        return Err(TrainError::Format(format!("{}: vision tower hash mismatch", path.display())));
    }
    Ok((header, params))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Complete,
    Incomplete,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub run_id: String,
    pub cell: Cell,
    pub status: RunStatus,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MatrixIndex {
    pub runs: Vec<IndexEntry>,
}

impl MatrixIndex {
    pub fn load(root: &Path) -> Result<Self, TrainError> {
        let path = root.join(INDEX_FILE);
        if !path.exists() {
            return Ok(MatrixIndex::default());
        }
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }

    /// Writes through a temporary file and a rename so readers never see a partial index.
    pub fn save(&self, root: &Path) -> Result<(), TrainError> {
        fs::create_dir_all(root)?;
        let tmp = root.join(format!("{INDEX_FILE}.tmp"));
        fs::write(&tmp, serde_json::to_vec_pretty(self)?)?;
        fs::rename(tmp, root.join(INDEX_FILE))?;
        Ok(())
    }

    fn upsert(&mut self, entry: IndexEntry) {
        match self.runs.iter_mut().find(|e| e.run_id == entry.run_id) {
            Some(e) => *e = entry,
            None => self.runs.push(entry),
        }
        self.runs.sort_by(|a, b| a.cell.cmp(&b.cell).then(a.run_id.cmp(&b.run_id)));
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum LogEvent {
    Hashes { stage: Stage, vision: String, connector: String, language: String },
    Step(StepRecord),
}

impl LogEvent {
    fn hashes(stage: Stage, ckpt: &Checkpoint) -> Self {
        LogEvent::Hashes {
            stage,
            vision: ckpt.component_hash(Component::Vision),
            connector: ckpt.component_hash(Component::Connector),
            language: ckpt.component_hash(Component::Language),
        }
    }
}

pub fn read_train_log(run_dir: &Path) -> Result<Vec<LogEvent>, TrainError> {
    let text = fs::read_to_string(run_dir.join(TRAIN_LOG_FILE))?;
    text.lines().filter(|l| !l.trim().is_empty()).map(|l| Ok(serde_json::from_str(l)?)).collect()
}

/// What running one cell did.
#[derive(Clone, Debug, PartialEq)]
pub struct CellOutcome {
    pub manifest: RunManifest,
    pub run_dir: PathBuf,
    /// Optimizer steps taken by this call; zero when the run was already complete.
    pub trained_steps: usize,
}

pub fn manifest_for(base: &BaseManifest, cell: Cell, vision_hash: &str) -> RunManifest {
    let model = ModelConfig::preset(cell.lm, cell.vision, base.vocab_size);
    RunManifest::new(base, cell, model, vision_hash.to_string())
}

fn load_if_complete(path: &Path, manifest: &RunManifest, stage: Stage) -> Option<Checkpoint> {
    let ck = Checkpoint::load(path).ok()?;
    (ck.stage == stage && ck.manifest == *manifest).then_some(ck)
}

fn progress(run_id: &str, rec: &StepRecord) {
    if rec.step.is_multiple_of(100) {
        log::info!("{run_id} {} step {} loss {:.4} lr {:.2e}", rec.stage.as_str(), rec.step, rec.loss, rec.lr);
    }
}

/// Runs (or resumes) one ablation cell.
pub fn run_cell(root: &Path, base: &BaseManifest, cell: Cell) -> Result<CellOutcome, TrainError> {
    let (vheader, vision) = load_vision_cache(root, cell.vision)?;
    let manifest = manifest_for(base, cell, &vheader.hash);
    let dir = root.join(&manifest.run_id);
    fs::create_dir_all(&dir)?;
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_vec_pretty(&manifest)?)?;
    let mut index = MatrixIndex::load(root)?;

    if load_if_complete(&dir.join(STAGE2_FILE), &manifest, Stage::Stage2).is_some() {
        index.upsert(IndexEntry { run_id: manifest.run_id.clone(), cell, status: RunStatus::Complete });
        index.save(root)?;
        return Ok(CellOutcome { manifest, run_dir: dir, trained_steps: 0 });
    }
    index.upsert(IndexEntry { run_id: manifest.run_id.clone(), cell, status: RunStatus::Incomplete });
    index.save(root)?;

    let init = init_checkpoint(&manifest, &vision)?;
    let mut log = fs::File::create(dir.join(TRAIN_LOG_FILE))?;
    let write_event = |log: &mut fs::File, e: &LogEvent| -> Result<(), TrainError> {
        serde_json::to_writer(&mut *log, e)?;
        log.write_all(b"\n")?;
        Ok(())
    };
    write_event(&mut log, &LogEvent::hashes(Stage::Init, &init))?;
    let mut trained = 0usize;
    let mut io_error: Option<TrainError> = None;

    let start_stage2 = if cell.pretrain {
        let stage1_path = dir.join(STAGE1_FILE);
        let s1 = match load_if_complete(&stage1_path, &manifest, Stage::Stage1) {
            Some(ck) => ck,
            None => {
                let corpus = gen_pretrain_corpus(base.data.pretrain_size, base.seeds.data)?;
                let mut hook = |rec: &StepRecord, _: &_| {
                    progress(&manifest.run_id, rec);
                    if let Err(e) = write_event(&mut log, &LogEvent::Step(rec.clone())) {
                        io_error.get_or_insert(e);
                        return ControlFlow::Break(());
                    }
                    ControlFlow::Continue(())
                };
                let ck = stage1_pretrain_connector(&init, &corpus, &mut hook)?;
                if let Some(e) = io_error.take() {
                    return Err(e);
                }
                trained += ck.step as usize;
                ck.save(&stage1_path)?;
                ck
            }
        };
        write_event(&mut log, &LogEvent::hashes(Stage::Stage1, &s1))?;
        s1
    } else {
        init
    };

    let corpus = gen_instruction_corpus(base.data.instruct_size, base.seeds.data, &base.data.mix)?;
    let mut step_times = Vec::with_capacity(base.hyperparams.steps_stage2);
    let mut last = Instant::now();
    let mut hook = |rec: &StepRecord, _: &_| {
        let now = Instant::now();
        step_times.push((now - last).as_secs_f64());
        last = now;
        progress(&manifest.run_id, rec);
        if let Err(e) = write_event(&mut log, &LogEvent::Step(rec.clone())) {
            io_error.get_or_insert(e);
            return ControlFlow::Break(());
        }
        ControlFlow::Continue(())
    };
    let s2 = stage2_finetune(&start_stage2, &corpus, &mut hook)?;
    if let Some(e) = io_error.take() {
        return Err(e);
    }
    trained += s2.step as usize;
    write_event(&mut log, &LogEvent::hashes(Stage::Stage2, &s2))?;
    s2.save(&dir.join(STAGE2_FILE))?;

    let model = s2.model()?;
    let probe = &corpus[..corpus.len().min(4)];
    let measured: &[f64] = step_times.get(MIN_WARMUP_STEPS..).unwrap_or(&[]);
    let report = ThroughputReport {
        preset: cell.lm,
        steps_per_second: if measured.is_empty() { 0.0 } else { measured.len() as f64 / measured.iter().sum::<f64>() },
        tokens_per_second: generation_rate(&model, probe, 8)?,
        wall_seconds: step_times.iter().sum(),
        warmup_steps: MIN_WARMUP_STEPS.min(step_times.len()),
        measured_steps: measured.len(),
        hardware: hardware_description(),
    };
    if report.measured_steps < MIN_MEASURED_STEPS {
        log::warn!("{}: only {} stage-2 steps timed; throughput.json is indicative", manifest.run_id, report.measured_steps);
    }
    fs::write(dir.join(THROUGHPUT_FILE), serde_json::to_vec_pretty(&report)?)?;

    let mut index = MatrixIndex::load(root)?;
    index.upsert(IndexEntry { run_id: manifest.run_id.clone(), cell, status: RunStatus::Complete });
    index.save(root)?;
    Ok(CellOutcome { manifest, run_dir: dir, trained_steps: trained })
}

/// Runs every requested cell (all eight by default) in canonical order.
/// Completed cells are detected by their stage-2 checkpoint and skipped.
pub fn run_ablation_matrix(root: &Path, base: &BaseManifest, cells: Option<&[Cell]>) -> Result<Vec<CellOutcome>, TrainError> {
    let all = Cell::all();
    let cells = cells.unwrap_or(&all);
    // Fail before any training if a tower is missing.
    for v in [VisionVariant::A, VisionVariant::B] {
        if cells.iter().any(|c| c.vision == v) {
            load_vision_cache(root, v)?;
        }
    }
    cells.iter().map(|&c| run_cell(root, base, c)).collect()
}
