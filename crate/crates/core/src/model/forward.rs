use std::collections::HashMap;

use super::config::{ModelConfig, VisionTowerConfig};
use super::params::{Component, ParamStore};
use super::{FrozenFlags, ModelError, MultimodalModel};
use crate::data::Image;
use crate::numeric::{AttentionMask, Scalar, Tape, Tensor, Var};
use crate::numeric::kernels::axpy;
use crate::optim::Grads;

/// Binds a model's parameters onto a tape and builds the forward graph.
///
/// Parameters become leaves lazily, once per tape. A parameter requires grad
/// only when the pass is a training pass and its component is not frozen.
pub struct Forward<'m, 't, T: Scalar> {
    params: &'m ParamStore<T>,
    vision: &'m VisionTowerConfig,
    config: Option<&'m ModelConfig>,
    frozen: FrozenFlags,
    tape: &'t mut Tape<'m, T>,
    bound: HashMap<&'m str, Var>,
    train: bool,
}

impl<'m, 't, T: Scalar> Forward<'m, 't, T> {
    pub fn new(model: &'m MultimodalModel<T>, tape: &'t mut Tape<'m, T>, train: bool) -> Self {
        Forward {
            params: &model.params,
            vision: &model.config.vision,
            config: Some(&model.config),
            frozen: model.frozen,
            tape,
            bound: HashMap::new(),
            train,
        }
    }

    /// Forward context over a bare vision tower plus any extra parameters
    /// (projection heads and the like) stored alongside it. Only
    /// [`Forward::encode_image`] and [`Forward::param`] are usable.
    pub fn vision_only(
        vision: &'m VisionTowerConfig,
        params: &'m ParamStore<T>,
        tape: &'t mut Tape<'m, T>,
        train: bool,
    ) -> Self {
        Forward { params, vision, config: None, frozen: FrozenFlags::default(), tape, bound: HashMap::new(), train }
    }

    fn config(&self) -> Result<&'m ModelConfig, ModelError> {
        self.config.ok_or_else(|| ModelError::Input("forward context has no language tower".into()))
    }

    pub fn tape(&mut self) -> &mut Tape<'m, T> {
        self.tape
    }

    pub fn param(&mut self, name: &str) -> Result<Var, ModelError> {
        let (key, t) =
            self.params.get_key_value(name).ok_or_else(|| ModelError::MissingParam(name.to_string()))?;
        if let Some(&v) = self.bound.get(key.as_str()) {
            return Ok(v);
        }
        let frozen = Component::of(name).is_some_and(|c| self.frozen.get(c));
        let v = self.tape.param(t, self.train && !frozen);
        self.bound.insert(key.as_str(), v);
        Ok(v)
    }

    /// Parameters bound so far, sorted by name.
    pub fn bound_params(&self) -> Vec<(&'m str, Var)> {
        let mut v: Vec<_> = self.bound.iter().map(|(k, v)| (*k, *v)).collect();
        v.sort_unstable();
        v
    }

    /// Gradients of every bound parameter that received one in the last
    /// `backward`, keyed by name.
    pub fn gradients(&self) -> Grads<T> {
        let mut out = Grads::new();
        for (name, v) in self.bound_params() {
            if let Some(g) = self.tape.grad(v) {
                out.insert(name.to_string(), g.to_vec());
            }
        }
        out
    }

    /// Adds the gradients of the last `backward` into `acc`, by parameter name.
    pub fn accumulate_gradients(&self, acc: &mut Grads<T>) {
        for (name, v) in self.bound_params() {
            if let Some(g) = self.tape.grad(v) {
                match acc.get_mut(name) {
                    Some(a) => axpy(a, g),
                    None => {
                        acc.insert(name.to_string(), g.to_vec());
                    }
                }
            }
        }
    }

    fn linear(&mut self, x: Var, w: &str, b: Option<&str>) -> Result<Var, ModelError> {
        let wv = self.param(w)?;
        let mut y = self.tape.matmul(x, wv)?;
        if let Some(b) = b {
            let bv = self.param(b)?;
            y = self.tape.add(y, bv)?;
        }
        Ok(y)
    }

    fn layer_norm(&mut self, x: Var, prefix: &str) -> Result<Var, ModelError> {
        let g = self.param(&format!("{prefix}.g"))?;
        let b = self.param(&format!("{prefix}.b"))?;
        Ok(self.tape.layer_norm(x, g, b)?)
    }

    /// Pre-norm transformer block. `retain_layer` tags the per-head attention
    /// matrices for retention on tapes that keep them.
    fn block(
        &mut self,
        prefix: &str,
        x: Var,
        heads: usize,
        mask: AttentionMask,
        retain_layer: Option<usize>,
    ) -> Result<Var, ModelError> {
        let d = self.tape.value(x).dims2().1;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let h = self.layer_norm(x, &format!("{prefix}ln1"))?;
        let q = self.linear(h, &format!("{prefix}attn.wq"), None)?;
        let k = self.linear(h, &format!("{prefix}attn.wk"), None)?;
        let v = self.linear(h, &format!("{prefix}attn.wv"), None)?;
        let mut outs = Vec::with_capacity(heads);
        for head in 0..heads {
            let t = &mut *self.tape;
            let qh = t.slice_cols(q, head * dh, dh)?;
            let kh = t.slice_cols(k, head * dh, dh)?;
            let vh = t.slice_cols(v, head * dh, dh)?;
            let s = t.matmul_nt(qh, kh)?;
            let s = t.scale(s, scale)?;
            let s = match mask {
                AttentionMask::Full => s,
                m => t.apply_mask(s, m)?,
            };
            let a = t.softmax_rows(s)?;
            if let Some(layer) = retain_layer {
                t.retain(layer, head, a);
            }
            outs.push(t.matmul(a, vh)?);
        }
        let o = if heads == 1 { outs[0] } else { self.tape.concat_cols(&outs)? };
        let o = self.linear(o, &format!("{prefix}attn.wo"), None)?;
        let x = self.tape.add(x, o)?;
        let h = self.layer_norm(x, &format!("{prefix}ln2"))?;
        let m = self.linear(h, &format!("{prefix}mlp.w1"), Some(&format!("{prefix}mlp.b1")))?;
        let m = self.tape.gelu(m)?;
        let m = self.linear(m, &format!("{prefix}mlp.w2"), Some(&format!("{prefix}mlp.b2")))?;
        Ok(self.tape.add(x, m)?)
    }

    /// Patch embeddings, `g² × d_v`.
    pub fn encode_image(&mut self, image: &Image) -> Result<Var, ModelError> {
        let cfg = self.vision;
        let patches = patchify::<T>(image, cfg.patch_size, cfg.patch_grid)?;
        let x = self.tape.constant(patches);
        let x = self.linear(x, "vision.patch.w", Some("vision.patch.b"))?;
        let pos = self.param("vision.pos")?;
        let mut x = self.tape.add(x, pos)?;
        for l in 0..cfg.layers {
            x = self.block(&format!("vision.blocks.{l}."), x, cfg.heads, AttentionMask::Full, None)?;
        }
        self.layer_norm(x, "vision.ln_f")
    }

    /// Two-layer GELU MLP from vision width to language width.
    pub fn connect(&mut self, patches: Var) -> Result<Var, ModelError> {
        let width = self.tape.value(patches).dims2().1;
        let config = self.config()?;
        let dv = config.vision.embed_dim;
        if width != dv {
            return Err(ModelError::Numeric(crate::numeric::NumericError::Dimension {
                op: "connect",
                left: self.tape.value(patches).shape().to_vec(),
                right: vec![dv, config.connector.hidden_dim],
            }));
        }
        let h = self.linear(patches, "connector.w1", Some("connector.b1"))?;
        let h = self.tape.gelu(h)?;
        self.linear(h, "connector.w2", Some("connector.b2"))
    }

    /// Language-tower hidden states (before the final norm) over
    /// `[prefix rows ‖ token embeddings]`. Prefix positions attend to each
    /// other bidirectionally; text positions attend causally and see the whole prefix.
    pub fn language(&mut self, prefix: Option<Var>, tokens: &[usize]) -> Result<Var, ModelError> {
        let cfg = &self.config()?.language;
        let n_prefix = prefix.map_or(0, |p| self.tape.value(p).dims2().0);
        let n = n_prefix + tokens.len();
        if n > cfg.context_length {
            return Err(ModelError::Length { needed: n, context: cfg.context_length });
        }
        if n == 0 {
            return Err(ModelError::Input("empty sequence".into()));
        }
        let mut parts = Vec::with_capacity(2);
        parts.extend(prefix);
        if !tokens.is_empty() {
            let table = self.param("lm.tok_emb")?;
            parts.push(self.tape.embedding(table, tokens)?);
        }
        let x = if parts.len() == 1 { parts[0] } else { self.tape.concat_rows(&parts)? };
        let pos_table = self.param("lm.pos")?;
        let positions: Vec<usize> = (0..n).collect();
        let pos = self.tape.gather_rows(pos_table, &positions)?;
        let mut x = self.tape.add(x, pos)?;
        let heads = cfg.heads;
        for l in 0..cfg.layers {
            x = self.block(&format!("lm.blocks.{l}."), x, heads, AttentionMask::Prefix(n_prefix), Some(l))?;
        }
        Ok(x)
    }

    /// Final norm plus the tied output projection onto the vocabulary.
    pub fn logits(&mut self, hidden: Var) -> Result<Var, ModelError> {
        let h = self.layer_norm(hidden, "lm.ln_f")?;
        let table = self.param("lm.tok_emb")?;
        Ok(self.tape.matmul_nt(h, table)?)
    }

    /// Image prefix through vision tower and connector.
    pub fn image_prefix(&mut self, image: &Image) -> Result<Var, ModelError> {
        let p = self.encode_image(image)?;
        self.connect(p)
    }

    /// Mean next-token loss over the answer positions of one exchange:
    /// the input is `image ‖ prompt ‖ answer[..-1]` and every answer token
    /// (including the end marker) is predicted from the position before it.
    pub fn answer_loss(&mut self, prefix: Var, prompt: &[usize], answer: &[usize]) -> Result<Var, ModelError> {
        if answer.is_empty() {
            return Err(ModelError::Input("answer must contain at least one token".into()));
        }
        let n_prefix = self.tape.value(prefix).dims2().0;
        let mut tokens = prompt.to_vec();
        tokens.extend_from_slice(&answer[..answer.len() - 1]);
        let hidden = self.language(Some(prefix), &tokens)?;
        let first = n_prefix + prompt.len() - 1;
        let rows: Vec<usize> = (first..first + answer.len()).collect();
        let picked = self.tape.gather_rows(hidden, &rows)?;
        let logits = self.logits(picked)?;
        Ok(self.tape.cross_entropy(logits, answer)?)
    }
}

/// Splits an RGB image into `grid²` flattened patches (row-major patch order,
/// pixels `(y, x, channel)` within a patch), values centered to `[-0.5, 0.5]`.
pub fn patchify<T: Scalar>(image: &Image, patch: usize, grid: usize) -> Result<Tensor<T>, ModelError> {
    if patch == 0 || !image.height.is_multiple_of(patch) || !image.width.is_multiple_of(patch) {
        return Err(ModelError::Config(format!(
            "image {}x{} is not divisible into {patch}-pixel patches",
            image.height, image.width
        )));
    }
    if image.height / patch != grid || image.width / patch != grid {
        return Err(ModelError::Config(format!(
            "image {}x{} with {patch}-pixel patches does not give a {grid}x{grid} grid",
            image.height, image.width
        )));
    }
    let dim = patch * patch * 3;
    let mut data = Vec::with_capacity(grid * grid * dim);
    for pr in 0..grid {
        for pc in 0..grid {
            for y in 0..patch {
                for x in 0..patch {
                    let px = image.get(pr * patch + y, pc * patch + x);
                    data.extend(px.iter().map(|&c| T::from_f64c(c as f64 / 255.0 - 0.5)));
                }
            }
        }
    }
    Ok(Tensor::new(vec![grid * grid, dim], data)?)
}
