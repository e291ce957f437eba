use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::stages::{batch_gradients, prepare_examples, BatchOrder, Example};
use super::TrainError;
use crate::data::{gen_instruction_corpus, Sample, TaskMix, Tokenizer};
use crate::model::{Component, LmPreset, ModelConfig, MultimodalModel, VisionVariant};
use crate::optim::{AdamW, AdamWConfig};

pub const MIN_WARMUP_STEPS: usize = 5;
pub const MIN_MEASURED_STEPS: usize = 50;

/// A fixed training and generation workload, identical across presets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Workload {
    pub batch_size: usize,
    pub warmup_steps: usize,
    pub measured_steps: usize,
    /// Prompts decoded greedily for the inference rate.
    pub generation_prompts: usize,
    pub tokens_per_prompt: usize,
    pub vocab_size: usize,
    pub vision: VisionVariant,
    pub seed: u64,
}

impl Default for Workload {
    fn default() -> Self {
        Workload {
            batch_size: 8,
            warmup_steps: MIN_WARMUP_STEPS,
            measured_steps: MIN_MEASURED_STEPS,
            generation_prompts: 8,
            tokens_per_prompt: 8,
            vocab_size: 512,
            vision: VisionVariant::A,
            seed: 17,
        }
    }
}

impl Workload {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.measured_steps == 0 || self.batch_size == 0 {
            return Err(TrainError::Measurement("workload has no training steps to measure".into()));
        }
        if self.warmup_steps < MIN_WARMUP_STEPS || self.measured_steps < MIN_MEASURED_STEPS {
            return Err(TrainError::Measurement(format!(
                "need at least {MIN_WARMUP_STEPS} warmup and {MIN_MEASURED_STEPS} measured steps, got {} and {}",
                self.warmup_steps, self.measured_steps
            )));
        }
        if self.generation_prompts == 0 || self.tokens_per_prompt == 0 {
            return Err(TrainError::Measurement("workload has no inference tokens to measure".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThroughputReport {
    pub preset: LmPreset,
    /// Optimizer steps per second over the measured steps.
    pub steps_per_second: f64,
    /// Greedily generated tokens per second.
    pub tokens_per_second: f64,
    pub wall_seconds: f64,
    pub warmup_steps: usize,
    pub measured_steps: usize,
    pub hardware: String,
}

/// CPU model, logical core count, and platform.
pub fn hardware_description() -> String {
    let cpu = std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| s.lines().find(|l| l.starts_with("model name")).map(|l| l.split(':').nth(1).unwrap_or("").trim().to_string()))
        .unwrap_or_else(|| "unknown cpu".into());
    let threads = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    format!("{cpu}; {threads} logical cores; {}-{}", std::env::consts::OS, std::env::consts::ARCH)
}

/// Trains and decodes a fixed workload on a freshly initialized model of `preset`.
pub fn measure_throughput(preset: LmPreset, workload: &Workload) -> Result<ThroughputReport, TrainError> {
    workload.validate()?;
    let start = Instant::now();
    let cfg = ModelConfig::preset(preset, workload.vision, workload.vocab_size);
    let mut model = MultimodalModel::<f32>::new(cfg, workload.seed)?;
    model.set_frozen(Component::Vision, true);
    let corpus = gen_instruction_corpus(workload.batch_size.max(workload.generation_prompts), workload.seed, &TaskMix::default())?;
    let examples = prepare_examples(&model, &corpus)?;
    let mut opt = AdamW::new(AdamWConfig::default());
    let mut order = BatchOrder::new(workload.seed, "throughput", examples.len());
    let mut step = |model: &mut MultimodalModel<f32>| -> Result<(), TrainError> {
        let idx = order.next_batch(workload.batch_size);
        let batch: Vec<&Example> = idx.iter().map(|&i| &examples[i]).collect();
        let (_, grads) = batch_gradients(model, &batch)?;
        opt.step(&mut model.params, &grads, 1e-4);
        Ok(())
    };
    for _ in 0..workload.warmup_steps {
        step(&mut model)?;
    }
    let t = Instant::now();
    for _ in 0..workload.measured_steps {
        step(&mut model)?;
    }
    let train_secs = t.elapsed().as_secs_f64();
    let tokens_per_second = generation_rate(&model, &corpus[..workload.generation_prompts], workload.tokens_per_prompt)?;
    Ok(ThroughputReport {
        preset,
        steps_per_second: workload.measured_steps as f64 / train_secs,
        tokens_per_second,
        wall_seconds: start.elapsed().as_secs_f64(),
        warmup_steps: workload.warmup_steps,
        measured_steps: workload.measured_steps,
        hardware: hardware_description(),
    })
}

/// Decodes exactly `tokens` tokens per prompt (no early stop) and returns tokens per second.
pub fn generation_rate(model: &MultimodalModel<f32>, prompts: &[Sample], tokens: usize) -> Result<f64, TrainError> {
    let tok = Tokenizer::new(model.config.language.vocab_size)?;
    let prepared = prompts
        .iter()
        .map(|s| Ok((model.image_prefix(&s.scene.render())?, s.prompt_ids(&tok)?)))
        .collect::<Result<Vec<_>, TrainError>>()?;
    let t = Instant::now();
    let mut produced = 0usize;
    for (prefix, prompt) in &prepared {
        let mut seq = prompt.clone();
        for _ in 0..tokens {
            let logits = model.logits_with_prefix(prefix, &seq)?;
            let (rows, _) = logits.dims2();
            seq.push(crate::model::argmax(logits.row(rows - 1)));
            produced += 1;
        }
    }
    Ok(produced as f64 / t.elapsed().as_secs_f64().max(1e-9))
}
