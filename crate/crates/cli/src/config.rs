//! Layered configuration: the shipped desk presets, then a user TOML file
//! merged key by key, then command-line flags.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use mmfm::data::TaskMix;
use mmfm::model::VisionPretrainConfig;
use mmfm::optim::AdamWConfig;
use mmfm::train::{BaseManifest, DataSpec, Hyperparams, Seeds};

pub const DESK_PRESETS: &str = include_str!("../../../configs/desk.toml");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CliConfig {
    pub paths: Paths,
    pub seeds: Seeds,
    pub model: ModelSection,
    pub data: DataSection,
    pub train: TrainSection,
    pub vision: VisionSection,
    pub eval: EvalSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub runs_root: PathBuf,
    pub data_dir: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub vocab_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub pretrain_size: usize,
    pub instruct_size: usize,
    pub mix: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub lr_stage1: f64,
    pub lr_stage2: f64,
    pub batch_size: usize,
    pub steps_stage1: usize,
    pub steps_stage2: usize,
    pub warmup_fraction: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VisionSection {
    pub corpus_size: usize,
    pub corpus_seed: u64,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    /// Items per benchmark when none are read from disk.
    pub items: usize,
    pub seed: u64,
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

impl CliConfig {
    #[cfg(test)]
    pub fn desk() -> Self {
        toml::from_str(DESK_PRESETS).expect("shipped presets parse")
    }

    pub fn load(user: Option<&Path>) -> Result<Self> {
        let mut value: toml::Value = toml::from_str(DESK_PRESETS).expect("shipped presets parse");
        if let Some(path) = user {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
            let over: toml::Value = toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
            merge(&mut value, over);
        }
        let cfg: CliConfig = value.try_into().context("invalid configuration")?;
        cfg.mix()?;
        Ok(cfg)
    }

    pub fn mix(&self) -> Result<TaskMix> {
        TaskMix::parse(&self.data.mix).with_context(|| format!("data.mix = {:?}", self.data.mix))
    }

    pub fn base_manifest(&self) -> Result<BaseManifest> {
        let t = &self.train;
        Ok(BaseManifest {
            vocab_size: self.model.vocab_size,
            seeds: self.seeds,
            hyperparams: Hyperparams {
                lr_stage1: t.lr_stage1,
                lr_stage2: t.lr_stage2,
                batch_size: t.batch_size,
                steps_stage1: t.steps_stage1,
                steps_stage2: t.steps_stage2,
                warmup_fraction: t.warmup_fraction,
                adamw: AdamWConfig { beta1: t.beta1, beta2: t.beta2, eps: t.eps, weight_decay: t.weight_decay },
            },
            data: DataSpec { pretrain_size: self.data.pretrain_size, instruct_size: self.data.instruct_size, mix: self.mix()? },
        })
    }

    pub fn vision_pretrain(&self) -> VisionPretrainConfig {
        let v = &self.vision;
        VisionPretrainConfig { steps: v.steps, batch_size: v.batch_size, lr: v.lr, seed: v.seed, ..Default::default() }
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seeds = Seeds::all(seed);
        self.vision.seed = seed;
        self.vision.corpus_seed = seed;
        self.eval.seed = seed;
    }
}
