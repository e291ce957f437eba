use serde::{Deserialize, Serialize};

use crate::data::TaskMix;
use crate::hashing::sha256_hex;
use crate::model::{LmPreset, ModelConfig, VisionVariant};
use crate::optim::AdamWConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Seeds {
    pub init: u64,
    pub data: u64,
    pub order: u64,
}

impl Seeds {
    pub fn all(seed: u64) -> Self {
        Seeds { init: seed, data: seed, order: seed }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub lr_stage1: f64,
    pub lr_stage2: f64,
    pub batch_size: usize,
    pub steps_stage1: usize,
    pub steps_stage2: usize,
    /// Linear warmup as a fraction of each stage's steps, before cosine decay.
    pub warmup_fraction: f64,
    pub adamw: AdamWConfig,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            lr_stage1: 1e-3,
            lr_stage2: 3e-4,
            batch_size: 32,
            steps_stage1: 2000,
            steps_stage2: 4000,
            warmup_fraction: 0.05,
            adamw: AdamWConfig::default(),
        }
    }
}

impl Hyperparams {
    pub fn warmup(&self, steps: usize) -> usize {
        (steps as f64 * self.warmup_fraction).floor() as usize
    }
}

/// Corpus sizes and mixture the run trains on. Corpora are regenerated from
/// `Seeds::data`, so these fields pin the training data exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataSpec {
    pub pretrain_size: usize,
    pub instruct_size: usize,
    pub mix: TaskMix,
}

impl Default for DataSpec {
    fn default() -> Self {
        DataSpec { pretrain_size: 8000, instruct_size: 16000, mix: TaskMix::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub lm_preset: LmPreset,
    pub vision_variant: VisionVariant,
    pub pretrain_connector: bool,
    pub vocab_size: usize,
    pub seeds: Seeds,
    pub hyperparams: Hyperparams,
    pub data: DataSpec,
    pub model: ModelConfig,
    /// SHA-256 of the vision tower loaded at init.
    pub vision_hash: String,
    /// SHA-256 of the canonical JSON of every field except `run_id` and this one.
    pub config_hash: String,
}

/// One design point of the ablation matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Cell {
    pub lm: LmPreset,
    pub vision: VisionVariant,
    pub pretrain: bool,
}

impl Cell {
    /// The eight canonical cells in a fixed order.
    pub fn all() -> Vec<Cell> {
        let mut out = Vec::with_capacity(8);
        for lm in [LmPreset::S, LmPreset::L] {
            for vision in [VisionVariant::A, VisionVariant::B] {
                for pretrain in [true, false] {
                    out.push(Cell { lm, vision, pretrain });
                }
            }
        }
        out
    }

    pub fn label(&self) -> String {
        format!("{}-{}-{}", self.lm.as_str(), self.vision.as_str(), if self.pretrain { "pretrain" } else { "skip" })
    }
}

/// The shared part of every cell's manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaseManifest {
    pub vocab_size: usize,
    pub seeds: Seeds,
    pub hyperparams: Hyperparams,
    pub data: DataSpec,
}

impl Default for BaseManifest {
    fn default() -> Self {
        BaseManifest {
            vocab_size: 512,
            seeds: Seeds::all(17),
            hyperparams: Hyperparams::default(),
            data: DataSpec::default(),
        }
    }
}

impl RunManifest {
    pub fn new(base: &BaseManifest, cell: Cell, model: ModelConfig, vision_hash: String) -> Self {
        let mut m = RunManifest {
            run_id: String::new(),
            lm_preset: cell.lm,
            vision_variant: cell.vision,
            pretrain_connector: cell.pretrain,
            vocab_size: base.vocab_size,
            seeds: base.seeds,
            hyperparams: base.hyperparams.clone(),
            data: base.data.clone(),
            model,
            vision_hash,
            config_hash: String::new(),
        };
        m.config_hash = m.content_hash();
        m.run_id = format!("{}-{}", cell.label(), &m.config_hash[..12]);
        m
    }

    pub fn cell(&self) -> Cell {
        Cell { lm: self.lm_preset, vision: self.vision_variant, pretrain: self.pretrain_connector }
    }

    pub fn content_hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("manifest serializes");
        let obj = v.as_object_mut().expect("manifest is an object");
        obj.remove("run_id");
        obj.remove("config_hash");
        // serde_json maps are ordered by key, so this is canonical.
        sha256_hex(serde_json::to_string(&v).expect("value serializes").as_bytes())
    }

    /// True when `run_id` and `config_hash` agree with the other fields.
    pub fn is_consistent(&self) -> bool {
        let h = self.content_hash();
        self.config_hash == h && self.run_id == format!("{}-{}", self.cell().label(), &h[..12])
    }
}
