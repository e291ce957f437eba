use std::collections::BTreeMap;

use super::config::{ModelConfig, VisionTowerConfig, MLP_RATIO};
use crate::hashing::sha256_hex;
use crate::numeric::{Rng, Scalar, Tensor};

/// Named parameter arrays, iterated in name order.
pub type ParamStore<T> = BTreeMap<String, Tensor<T>>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Component {
    Vision,
    Connector,
    Language,
}

impl Component {
    pub const ALL: [Component; 3] = [Component::Vision, Component::Connector, Component::Language];

    pub fn prefix(self) -> &'static str {
        match self {
            Component::Vision => "vision.",
            Component::Connector => "connector.",
            Component::Language => "lm.",
        }
    }

    pub fn of(name: &str) -> Option<Component> {
        Component::ALL.into_iter().find(|c| name.starts_with(c.prefix()))
    }
}

#[derive(Clone, Copy, Debug)]
enum Init {
    Zeros,
    Ones,
    /// Normal with the given standard deviation.
    Normal(f64),
}

fn block_specs(prefix: &str, d: usize, layers: usize, out: &mut Vec<(String, Vec<usize>, Init)>) {
    let proj_std = 1.0 / (d as f64).sqrt();
    let resid_std = proj_std / (2.0 * layers as f64).sqrt();
    let hidden = MLP_RATIO * d;
    for l in 0..layers {
        let p = format!("{prefix}blocks.{l}.");
        out.push((format!("{p}ln1.g"), vec![d], Init::Ones));
        out.push((format!("{p}ln1.b"), vec![d], Init::Zeros));
        for w in ["wq", "wk", "wv"] {
            out.push((format!("{p}attn.{w}"), vec![d, d], Init::Normal(proj_std)));
        }
        out.push((format!("{p}attn.wo"), vec![d, d], Init::Normal(resid_std)));
        out.push((format!("{p}ln2.g"), vec![d], Init::Ones));
        out.push((format!("{p}ln2.b"), vec![d], Init::Zeros));
        out.push((format!("{p}mlp.w1"), vec![d, hidden], Init::Normal(proj_std)));
        out.push((format!("{p}mlp.b1"), vec![hidden], Init::Zeros));
        out.push((format!("{p}mlp.w2"), vec![hidden, d], Init::Normal(resid_std / 2.0)));
        out.push((format!("{p}mlp.b2"), vec![d], Init::Zeros));
    }
    out.push((format!("{prefix}ln_f.g"), vec![d], Init::Ones));
    out.push((format!("{prefix}ln_f.b"), vec![d], Init::Zeros));
}

fn vision_specs(v: &VisionTowerConfig, out: &mut Vec<(String, Vec<usize>, Init)>) {
    let d = v.embed_dim;
    out.push(("vision.patch.w".into(), vec![v.patch_dim(), d], Init::Normal(1.0 / (v.patch_dim() as f64).sqrt())));
    out.push(("vision.patch.b".into(), vec![d], Init::Zeros));
    out.push(("vision.pos".into(), vec![v.tokens(), d], Init::Normal(0.02)));
    block_specs("vision.", d, v.layers, out);
}

fn specs(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let mut out = Vec::new();
    vision_specs(&cfg.vision, &mut out);
    let (dv, h, d) = (cfg.vision.embed_dim, cfg.connector.hidden_dim, cfg.language.embed_dim);
    out.push(("connector.w1".into(), vec![dv, h], Init::Normal(1.0 / (dv as f64).sqrt())));
    out.push(("connector.b1".into(), vec![h], Init::Zeros));
    out.push(("connector.w2".into(), vec![h, d], Init::Normal(1.0 / (h as f64).sqrt())));
    out.push(("connector.b2".into(), vec![d], Init::Zeros));
    let lm = &cfg.language;
    out.push(("lm.tok_emb".into(), vec![lm.vocab_size, d], Init::Normal(0.02)));
    out.push(("lm.pos".into(), vec![lm.context_length, d], Init::Normal(0.02)));
    block_specs("lm.", d, lm.layers, &mut out);
    out
}

/// Fresh parameters. Each array draws from its own stream derived from
/// `(seed, name)`, so a component's initialization never depends on the shapes
/// of the others.
pub fn init_params<T: Scalar>(cfg: &ModelConfig, seed: u64) -> ParamStore<T> {
    materialize(specs(cfg), seed)
}

/// Fresh vision-tower parameters only; identical to the vision slice of
/// [`init_params`] for the same seed.
pub fn init_vision_params<T: Scalar>(v: &VisionTowerConfig, seed: u64) -> ParamStore<T> {
    let mut s = Vec::new();
    vision_specs(v, &mut s);
    materialize(s, seed)
}

fn materialize<T: Scalar>(specs: Vec<(String, Vec<usize>, Init)>, seed: u64) -> ParamStore<T> {
    specs
        .into_iter()
        .map(|(name, shape, init)| {
            let len: usize = shape.iter().product();
            let data: Vec<T> = match init {
                Init::Zeros => vec![T::zero(); len],
                Init::Ones => vec![T::one(); len],
                Init::Normal(std) => {
                    let mut rng = Rng::derived(seed, &format!("init/{name}"));
                    (0..len).map(|_| T::from_f64c(rng.normal() * std)).collect()
                }
            };
            let t = Tensor::new(shape, data).expect("spec shapes are consistent");
            (name, t)
        })
        .collect()
}

fn block_count(d: usize, layers: usize) -> usize {
    // two layer norms, four bias-free projections, MLP with biases; plus final norm
    layers * (4 * d + 4 * d * d + 2 * MLP_RATIO * d * d + MLP_RATIO * d + d) + 2 * d
}

/// Closed-form parameter counts per component.
pub fn param_count(cfg: &ModelConfig, component: Component) -> usize {
    match component {
        Component::Vision => {
            let v = &cfg.vision;
            let d = v.embed_dim;
            v.patch_dim() * d + d + v.tokens() * d + block_count(d, v.layers)
        }
        Component::Connector => {
            let (dv, h, d) = (cfg.vision.embed_dim, cfg.connector.hidden_dim, cfg.language.embed_dim);
            dv * h + h + h * d + d
        }
        Component::Language => {
            let l = &cfg.language;
            let d = l.embed_dim;
            l.vocab_size * d + l.context_length * d + block_count(d, l.layers)
        }
    }
}

pub fn total_param_count(cfg: &ModelConfig) -> usize {
    Component::ALL.iter().map(|&c| param_count(cfg, c)).sum()
}

/// SHA-256 over names, shapes, and little-endian values of a component's arrays.
pub fn component_hash<T: Scalar>(params: &ParamStore<T>, c: Component) -> String {
    let mut bytes = Vec::new();
    for (name, t) in params.iter().filter(|(n, _)| n.starts_with(c.prefix())) {
        bytes.extend_from_slice(name.as_bytes());
        for d in t.shape() {
            bytes.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        bytes.extend_from_slice(&t.payload_bytes());
    }
    sha256_hex(&bytes)
}
