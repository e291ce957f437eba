//! Gradient-weighted attention relevancy over the language tower.
//!
//! For each layer the head-averaged positive part of `∇A ⊙ A` is folded into
//! a running relevancy matrix, `R ← R + Ā·R` from `R = I`, in forward layer
//! order. The target row restricted to image positions gives a patch heatmap.

mod render;
mod trace_file;

pub use render::{colormap, render_comparison, render_overlay};
pub use trace_file::{load_trace, save_trace};

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Image, Sample, Tokenizer, END_OF_ANSWER_ID};
use crate::eval::MAX_ANSWER_TOKENS;
use crate::model::{ModelError, MultimodalModel};
use crate::numeric::{NumericError, Tape, Tensor};
use crate::train::{Checkpoint, TrainError};

#[derive(Debug, Error)]
pub enum RelevancyError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] NumericError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Data(#[from] crate::data::DataError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
}

/// Where image and text tokens sit in the traced sequence.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    /// Side of the patch grid; the first `grid²` positions are image tokens.
    pub grid: usize,
    /// Text token ids following the image tokens.
    pub text_tokens: Vec<usize>,
}

impl Layout {
    pub fn image_tokens(&self) -> usize {
        self.grid * self.grid
    }

    pub fn len(&self) -> usize {
        self.image_tokens() + self.text_tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Post-softmax attention and its gradient for every head of one layer,
/// each stored as `heads × n × n` row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerTrace {
    pub heads: usize,
    pub attention: Vec<f64>,
    pub gradient: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionTrace {
    pub n: usize,
    pub layers: Vec<LayerTrace>,
    pub layout: Layout,
    /// Sequence row whose output scores the target token.
    pub target_row: usize,
    pub target_token: usize,
    /// Index of the target among the generated tokens.
    pub generated_position: usize,
    /// Greedy output, ending in the end-of-answer id if decoding stopped on it.
    pub generated: Vec<usize>,
}

impl AttentionTrace {
    pub fn validate(&self) -> Result<(), RelevancyError> {
        if self.layout.len() != self.n || self.target_row >= self.n {
            return Err(RelevancyError::Input(format!(
                "trace layout covers {} tokens and targets row {} but n = {}",
                self.layout.len(),
                self.target_row,
                self.n
            )));
        }
        for (l, layer) in self.layers.iter().enumerate() {
            let size = layer.heads * self.n * self.n;
            if layer.heads == 0 || layer.attention.len() != size || layer.gradient.len() != size {
                return Err(RelevancyError::Input(format!("layer {l} arrays do not have {} heads of {}²", layer.heads, self.n)));
            }
        }
        Ok(())
    }
}

/// Greedy answer for `prompt`, then a retained-attention forward over the
/// prefix that predicts generated token `position` (0 = first) and the
/// gradient of that token's logit. The generated tokens include the
/// end-of-answer marker when decoding stopped on it.
pub fn capture_trace(
    model: &MultimodalModel<f32>,
    image: &Image,
    prompt: &[usize],
    position: usize,
) -> Result<AttentionTrace, RelevancyError> {
    let mut generated = model.generate(image, prompt, MAX_ANSWER_TOKENS)?;
    // A terminating end-of-answer token was emitted too and can be targeted.
    if generated.len() < MAX_ANSWER_TOKENS {
        generated.push(END_OF_ANSWER_ID);
    }
    if position >= generated.len() {
        return Err(RelevancyError::Input(format!(
            "target position {position} is outside the {} generated tokens",
            generated.len()
        )));
    }
    let target_token = generated[position];
    let mut text = prompt.to_vec();
    text.extend_from_slice(&generated[..position]);

    let lm = &model.config.language;
    let mut tape = Tape::with_attention_retention();
    let target = {
        let mut f = crate::model::Forward::new(model, &mut tape, false);
        let prefix = f.image_prefix(image)?;
        let h = f.language(Some(prefix), &text)?;
        let last = f.tape().value(h).dims2().0 - 1;
        let h = f.tape().gather_rows(h, &[last])?;
        let logits = f.logits(h)?;
        let mut onehot = vec![0.0f32; lm.vocab_size];
        onehot[target_token] = 1.0;
        let t = f.tape();
        let pick = t.constant(Tensor::new(vec![1, lm.vocab_size], onehot)?);
        let picked = t.mul(logits, pick)?;
        t.sum(picked)?
    };
    tape.backward(target)?;

    let grid = model.config.vision.patch_grid;
    let n = grid * grid + text.len();
    let mut layers: Vec<LayerTrace> = (0..lm.layers)
        .map(|_| LayerTrace { heads: lm.heads, attention: vec![0.0; lm.heads * n * n], gradient: vec![0.0; lm.heads * n * n] })
        .collect();
    for r in tape.retained() {
        let a = tape.value(r.var).to_f64_vec();
        let g: Vec<f64> = match tape.grad(r.var) {
            Some(g) => g.iter().map(|&v| v as f64).collect(),
            None => vec![0.0; a.len()],
        };
        let span = r.head * n * n..(r.head + 1) * n * n;
        layers[r.layer].attention[span.clone()].copy_from_slice(&a);
        layers[r.layer].gradient[span].copy_from_slice(&g);
    }
    Ok(AttentionTrace {
        n,
        layers,
        layout: Layout { grid, text_tokens: text },
        target_row: n - 1,
        target_token,
        generated_position: position,
        generated,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelevancyMap {
    pub n: usize,
    /// `n × n`, row-major.
    pub r: Vec<f64>,
    pub layout: Layout,
    pub target_row: usize,
    /// Whether each Ā was row-normalized before the update.
    pub normalized: bool,
}

impl RelevancyMap {
    pub fn target_row(&self) -> &[f64] {
        &self.r[self.target_row * self.n..(self.target_row + 1) * self.n]
    }

    /// Target-row relevancy over image positions, in patch order.
    pub fn image_slice(&self) -> &[f64] {
        &self.target_row()[..self.layout.image_tokens()]
    }
}

/// Head-averaged `(∇A ⊙ A)⁺`, optionally scaled so each nonzero row sums to 1.
pub fn layer_contribution(layer: &LayerTrace, n: usize, normalize: bool) -> Vec<f64> {
    let mut bar = vec![0.0; n * n];
    for h in 0..layer.heads {
        let off = h * n * n;
        for (i, b) in bar.iter_mut().enumerate() {
            *b += layer.gradient[off + i] * layer.attention[off + i];
        }
    }
    let inv = 1.0 / layer.heads as f64;
    // Clamp after averaging over heads; NaN survives so propagation can reject it.
    bar.iter_mut().for_each(|b| *b = if b.is_nan() || *b > 0.0 { *b * inv } else { 0.0 });
    if normalize {
        for row in bar.chunks_mut(n) {
            let s: f64 = row.iter().sum();
            if s > 0.0 {
                row.iter_mut().for_each(|v| *v /= s);
            }
        }
    }
    bar
}

pub fn propagate(trace: &AttentionTrace, normalize: bool) -> Result<RelevancyMap, RelevancyError> {
    trace.validate()?;
    let n = trace.n;
    let mut r = vec![0.0; n * n];
    for i in 0..n {
        r[i * n + i] = 1.0;
    }
    for (l, layer) in trace.layers.iter().enumerate() {
        let bar = layer_contribution(layer, n, normalize);
        if bar.iter().any(|v| !v.is_finite()) {
            return Err(RelevancyError::Numeric(format!("non-finite relevancy update at layer {l}")));
        }
        debug_assert!(bar.iter().all(|&v| v >= 0.0));
        let mut next = r.clone();
        for i in 0..n {
            for k in 0..n {
                let a = bar[i * n + k];
                if a != 0.0 {
                    for j in 0..n {
                        next[i * n + j] += a * r[k * n + j];
                    }
                }
            }
        }
        r = next;
    }
    Ok(RelevancyMap { n, r, layout: trace.layout.clone(), target_row: trace.target_row, normalized: normalize })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub grid: usize,
    /// `grid × grid` values in [0, 1], row-major.
    pub values: Vec<f64>,
    /// Set when the image slice was constant and the map is uniform 0.5.
    pub degenerate: bool,
}

impl Heatmap {
    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.grid + col]
    }
}

/// Min-max normalized image slice of the target row.
pub fn image_heatmap(map: &RelevancyMap) -> Heatmap {
    let grid = map.layout.grid;
    let raw = map.image_slice();
    let lo = raw.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(hi - lo).is_normal() || hi - lo <= 1e-12 * hi.abs().max(1.0) {
        log::warn!("relevancy over image patches is constant; emitting a uniform map");
        return Heatmap { grid, values: vec![0.5; grid * grid], degenerate: true };
    }
    Heatmap { grid, values: raw.iter().map(|v| (v - lo) / (hi - lo)).collect(), degenerate: false }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FocusStats {
    /// Share of the target row's relevancy that falls on image positions.
    pub image_mass: f64,
    /// Entropy (nats) of the image slice normalized to a distribution.
    pub entropy: f64,
}

pub fn focus_stats(map: &RelevancyMap) -> FocusStats {
    let row = map.target_row();
    let img = map.image_slice();
    let total: f64 = row.iter().sum();
    let img_total: f64 = img.iter().sum();
    let image_mass = if total > 0.0 { img_total / total } else { 0.0 };
    // With no mass on the image the distribution is taken as uniform.
    let entropy = if img_total > 0.0 {
        -img.iter().map(|v| v / img_total).filter(|&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>()
    } else {
        (img.len() as f64).ln()
    };
    FocusStats { image_mass, entropy }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunFocus {
    pub run_id: String,
    pub target_token: String,
    pub generated: String,
    pub degenerate: bool,
    #[serde(flatten)]
    pub stats: FocusStats,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub item_id: u64,
    pub question: String,
    pub normalized: bool,
    pub runs: Vec<RunFocus>,
    pub figure: PathBuf,
}

/// Trace, propagate, and summarize one checkpoint on one item.
pub fn relevancy_for(
    model: &MultimodalModel<f32>,
    tok: &Tokenizer,
    item: &Sample,
    position: usize,
    normalize: bool,
) -> Result<(AttentionTrace, RelevancyMap, Heatmap), RelevancyError> {
    let trace = capture_trace(model, &item.scene.render(), &item.prompt_ids(tok)?, position)?;
    let map = propagate(&trace, normalize)?;
    let heat = image_heatmap(&map);
    Ok((trace, map, heat))
}

/// Side-by-side heatmaps of two runs on the same item, written as
/// `<out_dir>/compare-<item>.png` plus `compare-<item>.json`.
pub fn compare_runs(
    a: &Checkpoint,
    b: &Checkpoint,
    item: &Sample,
    position: usize,
    normalize: bool,
    out_dir: &Path,
) -> Result<Comparison, RelevancyError> {
    let (va, vb) = (a.manifest.vocab_size, b.manifest.vocab_size);
    if va != vb {
        return Err(RelevancyError::Config(format!("runs use different vocabularies ({va} vs {vb} ids)")));
    }
    let tok = Tokenizer::new(va)?;
    let image = item.scene.render();
    let mut runs = Vec::new();
    let mut heats = Vec::new();
    for ck in [a, b] {
        let model = ck.model()?;
        let (trace, map, heat) = relevancy_for(&model, &tok, item, position, normalize)?;
        runs.push(RunFocus {
            run_id: ck.manifest.run_id.clone(),
            target_token: tok.word(trace.target_token),
            generated: tok.decode(&trace.generated),
            degenerate: heat.degenerate,
            stats: focus_stats(&map),
        });
        heats.push(heat);
    }
    fs::create_dir_all(out_dir)?;
    let figure = out_dir.join(format!("compare-{}.png", item.id));
    render_comparison(&image, &heats[0], &heats[1], &figure)?;
    let cmp = Comparison { item_id: item.id, question: item.question.clone(), normalized: normalize, runs, figure };
    fs::write(out_dir.join(format!("compare-{}.json", item.id)), serde_json::to_vec_pretty(&cmp)?)?;
    Ok(cmp)
}
