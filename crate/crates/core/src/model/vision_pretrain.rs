//! Toy pretraining for the vision tower.
//!
//! Variant A learns from image-caption pairs with a symmetric InfoNCE loss
//! between mean-pooled patch features and a bag-of-words caption embedding.
//! Variant B matches a student's per-patch predictions on an augmented view to
//! the standardized features of an EMA teacher on the clean image.

use serde::{Deserialize, Serialize};

use super::config::{VisionTowerConfig, VisionVariant};
use super::forward::Forward;
use super::params::{init_vision_params, Component, ParamStore};
use super::ModelError;
use crate::data::{caption, Image, Sample, Tokenizer, TASK_WORDS};
use crate::numeric::{Rng, Tape, Tensor, Var};
use crate::optim::{cosine_lr, AdamW, AdamWConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VisionPretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Contrastive embedding width.
    pub projection_dim: usize,
    pub temperature: f64,
    /// Teacher momentum for self-distillation.
    pub ema: f64,
    /// Fraction of patches blanked in the student view.
    pub mask_ratio: f64,
}

impl Default for VisionPretrainConfig {
    fn default() -> Self {
        VisionPretrainConfig {
            steps: 300,
            batch_size: 32,
            lr: 1e-3,
            seed: 17,
            projection_dim: 32,
            temperature: 0.1,
            ema: 0.99,
            mask_ratio: 0.25,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VisionPretrainReport {
    pub variant: VisionVariant,
    pub steps: usize,
    /// Training loss at each step, before that step's update.
    pub losses: Vec<f64>,
}

impl VisionPretrainReport {
    pub fn initial_loss(&self) -> Option<f64> {
        self.losses.first().copied()
    }

    /// Mean over the last tenth of the run (at least one step).
    pub fn final_loss(&self) -> Option<f64> {
        let n = self.losses.len();
        if n == 0 {
            return None;
        }
        let k = (n / 10).max(1);
        Some(self.losses[n - k..].iter().sum::<f64>() / k as f64)
    }
}

/// Trains a fresh vision tower on `dataset` and returns its `vision.*` parameters.
pub fn pretrain_vision(
    cfg: &VisionTowerConfig,
    dataset: &[Sample],
    pc: &VisionPretrainConfig,
) -> Result<(ParamStore<f32>, VisionPretrainReport), ModelError> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(ModelError::Input("vision pretraining needs at least one image".into()));
    }
    if pc.batch_size == 0 {
        return Err(ModelError::Config("batch_size must be positive".into()));
    }
    let mut params = init_vision_params::<f32>(cfg, pc.seed);
    let tok = Tokenizer::new(TASK_WORDS.len())?;
    let images: Vec<Image> = dataset.iter().map(|s| s.scene.render()).collect();
    let captions = dataset.iter().map(|s| tok.encode(&caption(&s.scene))).collect::<Result<Vec<_>, _>>()?;

    let mut head_rng = Rng::derived(pc.seed, "vision-pretrain/head");
    let d = cfg.embed_dim;
    match cfg.variant {
        VisionVariant::A => {
            let e = pc.projection_dim;
            params.insert("head.img_proj".into(), normal(&[d, e], 1.0 / (d as f64).sqrt(), &mut head_rng));
            params.insert("head.txt_emb".into(), normal(&[TASK_WORDS.len(), e], 1.0, &mut head_rng));
        }
        VisionVariant::B => {
            params.insert("head.pred_w".into(), normal(&[d, d], 1.0 / (d as f64).sqrt(), &mut head_rng));
            params.insert("head.pred_b".into(), Tensor::zeros(&[d]));
        }
    }
    let mut teacher: ParamStore<f32> =
        params.iter().filter(|(n, _)| n.starts_with(Component::Vision.prefix())).map(|(n, t)| (n.clone(), t.clone())).collect();

    let mut opt = AdamW::new(AdamWConfig::default());
    let mut order_rng = Rng::derived(pc.seed, "vision-pretrain/order");
    let mut aug_rng = Rng::derived(pc.seed, "vision-pretrain/augment");
    let mut order: Vec<usize> = Vec::new();
    let mut losses = Vec::with_capacity(pc.steps);
    let warmup = pc.steps / 20;
    for step in 0..pc.steps {
        let mut batch = Vec::with_capacity(pc.batch_size);
        while batch.len() < pc.batch_size.min(images.len()) {
            if order.is_empty() {
                order = (0..images.len()).collect();
                order_rng.shuffle(&mut order);
            }
            batch.push(order.pop().expect("refilled above"));
        }
        let grads = {
            let mut tape = Tape::new();
            let mut f = Forward::vision_only(cfg, &params, &mut tape, true);
            let loss = match cfg.variant {
                VisionVariant::A => {
                    let caps: Vec<&[usize]> = batch.iter().map(|&i| captions[i].as_slice()).collect();
                    let imgs: Vec<&Image> = batch.iter().map(|&i| &images[i]).collect();
                    contrastive_loss(&mut f, &imgs, &caps, pc)?
                }
                VisionVariant::B => {
                    let mut views = Vec::with_capacity(batch.len());
                    let mut targets = Vec::with_capacity(batch.len());
                    for &i in &batch {
                        targets.push(teacher_targets(cfg, &teacher, &images[i])?);
                        views.push(augment(&images[i], cfg.patch_size, pc.mask_ratio, &mut aug_rng));
                    }
                    distill_loss(&mut f, &views, &targets)?
                }
            };
            losses.push(f.tape().value(loss).data()[0] as f64);
            f.tape().backward(loss)?;
            f.gradients()
        };
        opt.step(&mut params, &grads, cosine_lr(pc.lr, step, pc.steps, warmup));
        if cfg.variant == VisionVariant::B {
            let m = pc.ema as f32;
            for (name, t) in teacher.iter_mut() {
                for (w, &s) in t.data_mut().iter_mut().zip(params[name].data()) {
                    *w = m * *w + (1.0 - m) * s;
                }
            }
        }
    }
    params.retain(|n, _| n.starts_with(Component::Vision.prefix()));
    Ok((params, VisionPretrainReport { variant: cfg.variant, steps: pc.steps, losses }))
}

fn normal(shape: &[usize], std: f64, rng: &mut Rng) -> Tensor<f32> {
    let len = shape.iter().product();
    let data = (0..len).map(|_| (rng.normal() * std) as f32).collect();
    Tensor::new(shape.to_vec(), data).expect("shape and length agree")
}

/// Affine-free layer norm on the tape.
fn standardize(f: &mut Forward<'_, '_, f32>, x: Var) -> Result<Var, ModelError> {
    let width = f.tape().value(x).dims2().1;
    let g = f.tape().constant(Tensor::filled(&[width], 1.0));
    let b = f.tape().constant(Tensor::zeros(&[width]));
    Ok(f.tape().layer_norm(x, g, b)?)
}

fn contrastive_loss(
    f: &mut Forward<'_, '_, f32>,
    images: &[&Image],
    captions: &[&[usize]],
    pc: &VisionPretrainConfig,
) -> Result<Var, ModelError> {
    let mut img_rows = Vec::with_capacity(images.len());
    let mut txt_rows = Vec::with_capacity(images.len());
    let table = f.param("head.txt_emb")?;
    for (img, cap) in images.iter().zip(captions) {
        let feats = f.encode_image(img)?;
        img_rows.push(f.tape().mean_rows(feats)?);
        let words = f.tape().embedding(table, cap)?;
        txt_rows.push(f.tape().mean_rows(words)?);
    }
    let proj = f.param("head.img_proj")?;
    let t = f.tape();
    let img = t.concat_rows(&img_rows)?;
    let img = t.matmul(img, proj)?;
    let txt = t.concat_rows(&txt_rows)?;
    let img = standardize(f, img)?;
    let txt = standardize(f, txt)?;
    let t = f.tape();
    // Standardized rows have squared norm equal to their width, so this is cosine / temperature.
    let width = t.value(img).dims2().1 as f64;
    let logits = t.matmul_nt(img, txt)?;
    let logits = t.scale(logits, 1.0 / (pc.temperature * width))?;
    let labels: Vec<usize> = (0..images.len()).collect();
    let i2t = t.cross_entropy(logits, &labels)?;
    let lt = t.transpose(logits)?;
    let t2i = t.cross_entropy(lt, &labels)?;
    let both = t.add(i2t, t2i)?;
    Ok(t.scale(both, 0.5)?)
}

/// Teacher features on the clean image, standardized per patch.
fn teacher_targets(cfg: &VisionTowerConfig, teacher: &ParamStore<f32>, image: &Image) -> Result<Tensor<f32>, ModelError> {
    let mut tape = Tape::new();
    let mut f = Forward::vision_only(cfg, teacher, &mut tape, false);
    let x = f.encode_image(image)?;
    let x = standardize(&mut f, x)?;
    Ok(tape.value(x).clone())
}

fn distill_loss(f: &mut Forward<'_, '_, f32>, views: &[Image], targets: &[Tensor<f32>]) -> Result<Var, ModelError> {
    let w = f.param("head.pred_w")?;
    let b = f.param("head.pred_b")?;
    let mut per_image = Vec::with_capacity(views.len());
    for (view, target) in views.iter().zip(targets) {
        let feats = f.encode_image(view)?;
        let t = f.tape();
        let pred = t.matmul(feats, w)?;
        let pred = t.add(pred, b)?;
        let neg = Tensor::new(target.shape().to_vec(), target.data().iter().map(|v| -v).collect())?;
        let neg = t.constant(neg);
        let diff = t.add(pred, neg)?;
        let sq = t.mul(diff, diff)?;
        per_image.push(t.mean(sq)?);
    }
    let t = f.tape();
    let mut total = per_image[0];
    for &v in &per_image[1..] {
        total = t.add(total, v)?;
    }
    Ok(t.scale(total, 1.0 / per_image.len() as f64)?)
}

/// Student view: brightness jitter, pixel noise, and blanked patches.
fn augment(image: &Image, patch: usize, mask_ratio: f64, rng: &mut Rng) -> Image {
    let brightness = 0.7 + 0.3 * rng.uniform();
    let mut out = image.clone();
    for p in out.pixels.iter_mut() {
        let v = *p as f64 * brightness + rng.normal() * 8.0;
        *p = v.round().clamp(0.0, 255.0) as u8;
    }
    let (gh, gw) = (image.height / patch, image.width / patch);
    for pr in 0..gh {
        for pc in 0..gw {
            if rng.uniform() < mask_ratio {
                for y in pr * patch..(pr + 1) * patch {
                    for x in pc * patch..(pc + 1) * patch {
                        out.set(y, x, [128, 128, 128]);
                    }
                }
            }
        }
    }
    out
}
