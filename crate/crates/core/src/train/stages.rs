use std::ops::ControlFlow;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::checkpoint::{Checkpoint, Stage};
use super::manifest::RunManifest;
use super::TrainError;
use crate::data::{Sample, TaskTag, Tokenizer};
use crate::model::{Component, Forward, MultimodalModel, ParamStore};
use crate::numeric::kernels::axpy;
use crate::numeric::{Rng, Tape, Tensor};
use crate::optim::{cosine_lr, AdamW, Grads};

/// Batches are split into this many contiguous chunks regardless of the
/// thread count, and chunk sums are added in chunk order, so gradients are
/// bit-identical on any machine.
pub const GRAD_CHUNKS: usize = 8;

/// One supervised exchange with cached vision features.
#[derive(Clone, Debug)]
pub struct Example {
    pub features: Tensor<f32>,
    pub prompt: Vec<usize>,
    pub answer: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub stage: Stage,
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

/// Called after every optimizer step with the updated model.
/// Returning `Break` ends the stage early.
pub type StepHook<'a> = dyn FnMut(&StepRecord, &MultimodalModel<f32>) -> ControlFlow<()> + 'a;

/// Tokenizes samples and runs the (frozen) vision tower once per image.
pub fn prepare_examples(model: &MultimodalModel<f32>, samples: &[Sample]) -> Result<Vec<Example>, TrainError> {
    let tok = Tokenizer::new(model.config.language.vocab_size)?;
    samples
        .par_iter()
        .map(|s| {
            Ok(Example {
                features: model.encode_image(&s.scene.render())?,
                prompt: s.prompt_ids(&tok)?,
                answer: s.answer_ids(&tok)?,
            })
        })
        .collect()
}

/// Mean answer loss over the batch and its gradient for every trainable parameter.
pub fn batch_gradients(model: &MultimodalModel<f32>, batch: &[&Example]) -> Result<(f64, Grads<f32>), TrainError> {
    if batch.is_empty() {
        return Err(TrainError::Input("empty batch".into()));
    }
    let chunk = batch.len().div_ceil(GRAD_CHUNKS);
    let parts: Vec<Result<(f64, Grads<f32>), TrainError>> = batch
        .par_chunks(chunk)
        .map(|examples| {
            let mut acc = Grads::new();
            let mut loss = 0.0;
            for ex in examples {
                let mut tape = Tape::new();
                let mut f = Forward::new(model, &mut tape, true);
                let x = f.tape().constant(ex.features.clone());
                let prefix = f.connect(x)?;
                let l = f.answer_loss(prefix, &ex.prompt, &ex.answer)?;
                loss += f.tape().value(l).data()[0] as f64;
                f.tape().backward(l)?;
                f.accumulate_gradients(&mut acc);
            }
            Ok((loss, acc))
        })
        .collect();
    let mut total = 0.0;
    let mut grads = Grads::new();
    for part in parts {
        let (l, g) = part?;
        total += l;
        for (name, v) in g {
            match grads.get_mut(&name) {
                Some(a) => axpy(a, &v),
                None => {
                    grads.insert(name, v);
                }
            }
        }
    }
    let inv = 1.0 / batch.len() as f32;
    for g in grads.values_mut() {
        g.iter_mut().for_each(|v| *v *= inv);
    }
    Ok((total / batch.len() as f64, grads))
}

/// Epoch-wise shuffled batches; the order depends only on `(seed, label)` and the corpus size.
pub struct BatchOrder {
    rng: Rng,
    n: usize,
    pending: Vec<usize>,
}

impl BatchOrder {
    pub fn new(seed: u64, label: &str, n: usize) -> Self {
        BatchOrder { rng: Rng::derived(seed, label), n, pending: Vec::new() }
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size.min(self.n) {
            if self.pending.is_empty() {
                self.pending = (0..self.n).rev().collect();
                self.rng.shuffle(&mut self.pending);
            }
            out.push(self.pending.pop().expect("refilled above"));
        }
        out
    }
}

#[allow(clippy::too_many_arguments)]
fn run_steps(
    model: &mut MultimodalModel<f32>,
    optimizer: &mut AdamW<f32>,
    examples: &[Example],
    stage: Stage,
    steps: usize,
    lr: f64,
    warmup: usize,
    batch_size: usize,
    order_seed: u64,
    hook: &mut StepHook<'_>,
) -> Result<usize, TrainError> {
    if examples.is_empty() {
        return Err(TrainError::Input(format!("{} corpus is empty", stage.as_str())));
    }
    if batch_size == 0 {
        return Err(TrainError::Input("batch size must be positive".into()));
    }
    let mut order = BatchOrder::new(order_seed, &format!("order/{}", stage.as_str()), examples.len());
    for step in 0..steps {
        let idx = order.next_batch(batch_size);
        let batch: Vec<&Example> = idx.iter().map(|&i| &examples[i]).collect();
        let (loss, grads) = batch_gradients(model, &batch)?;
        let rate = cosine_lr(lr, step, steps, warmup);
        optimizer.step(&mut model.params, &grads, rate);
        let rec = StepRecord { stage, step, loss, lr: rate };
        if hook(&rec, model).is_break() {
            return Ok(step + 1);
        }
    }
    Ok(steps)
}

/// Fresh model for a run: random init from the manifest's seed with the cached vision tower loaded.
pub fn init_checkpoint(manifest: &RunManifest, vision: &ParamStore<f32>) -> Result<Checkpoint, TrainError> {
    let mut model = MultimodalModel::<f32>::new(manifest.model.clone(), manifest.seeds.init)?;
    model.load_vision(vision)?;
    let got = model.component_hash(Component::Vision);
    if got != manifest.vision_hash {
        return Err(TrainError::Contract(format!(
            "vision tower hash {got} does not match manifest {}",
            manifest.vision_hash
        )));
    }
    Ok(Checkpoint { manifest: manifest.clone(), stage: Stage::Init, step: 0, params: model.params, optimizer: None })
}

/// Trains the connector on captions with both towers frozen.
pub fn stage1_pretrain_connector(
    init: &Checkpoint,
    corpus: &[Sample],
    hook: &mut StepHook<'_>,
) -> Result<Checkpoint, TrainError> {
    if init.stage != Stage::Init {
        return Err(TrainError::Contract(format!("stage 1 starts from init, got {}", init.stage.as_str())));
    }
    if let Some(s) = corpus.iter().find(|s| s.task != TaskTag::Caption) {
        return Err(TrainError::Input(format!(
            "stage 1 trains on captions only; sample {} is a {} task",
            s.id,
            s.task.as_str()
        )));
    }
    let mut model = init.model()?;
    model.set_frozen(Component::Vision, true);
    model.set_frozen(Component::Language, true);
    let examples = prepare_examples(&model, corpus)?;
    let h = &init.manifest.hyperparams;
    let mut opt = AdamW::new(h.adamw);
    let done = run_steps(
        &mut model,
        &mut opt,
        &examples,
        Stage::Stage1,
        h.steps_stage1,
        h.lr_stage1,
        h.warmup(h.steps_stage1),
        h.batch_size,
        init.manifest.seeds.order,
        hook,
    )?;
    Ok(Checkpoint {
        manifest: init.manifest.clone(),
        stage: Stage::Stage1,
        step: done as u64,
        params: model.params,
        optimizer: Some(opt),
    })
}

/// Jointly trains the connector and language tower on the instruction mixture.
/// Starts from the stage-1 checkpoint when the manifest pretrains the
/// connector, and from init otherwise.
pub fn stage2_finetune(from: &Checkpoint, corpus: &[Sample], hook: &mut StepHook<'_>) -> Result<Checkpoint, TrainError> {
    let expected = if from.manifest.pretrain_connector { Stage::Stage1 } else { Stage::Init };
    if from.stage != expected {
        return Err(TrainError::Contract(format!(
            "stage 2 of run {} must start from {}, got {}",
            from.manifest.run_id,
            expected.as_str(),
            from.stage.as_str()
        )));
    }
    let mut model = from.model()?;
    model.set_frozen(Component::Vision, true);
    let examples = prepare_examples(&model, corpus)?;
    let h = &from.manifest.hyperparams;
    let mut opt = AdamW::new(h.adamw);
    let done = run_steps(
        &mut model,
        &mut opt,
        &examples,
        Stage::Stage2,
        h.steps_stage2,
        h.lr_stage2,
        h.warmup(h.steps_stage2),
        h.batch_size,
        from.manifest.seeds.order,
        hook,
    )?;
    Ok(Checkpoint {
        manifest: from.manifest.clone(),
        stage: Stage::Stage2,
        step: done as u64,
        params: model.params,
        optimizer: Some(opt),
    })
}

/// Exact-match rate of greedy answers on the given samples.
pub fn answer_accuracy(model: &MultimodalModel<f32>, samples: &[Sample], max_new_tokens: usize) -> Result<f64, TrainError> {
    if samples.is_empty() {
        return Err(TrainError::Input("no samples to score".into()));
    }
    let tok = Tokenizer::new(model.config.language.vocab_size)?;
    let hits: Vec<Result<bool, TrainError>> = samples
        .par_iter()
        .map(|s| {
            let out = model.generate(&s.scene.render(), &s.prompt_ids(&tok)?, max_new_tokens)?;
            Ok(out == s.gold_answer_ids(&tok)?)
        })
        .collect();
    let mut correct = 0usize;
    for h in hits {
        correct += h? as usize;
    }
    Ok(correct as f64 / samples.len() as f64)
}
