//! Vision tower, connector, and language tower.

pub mod config;
pub mod forward;
pub mod params;
pub mod vision_pretrain;

pub use config::{ConnectorConfig, LanguageTowerConfig, LmPreset, ModelConfig, VisionTowerConfig, VisionVariant};
pub use forward::{patchify, Forward};
pub use params::{component_hash, init_params, init_vision_params, param_count, total_param_count, Component, ParamStore};
pub use vision_pretrain::{pretrain_vision, VisionPretrainConfig, VisionPretrainReport};

use thiserror::Error;

use crate::data::{DataError, Image, END_OF_ANSWER_ID};
use crate::numeric::{NumericError, Scalar, Tape, Tensor};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Numeric(#[from] NumericError),
    #[error("sequence of {needed} tokens exceeds the context length {context}")]
    Length { needed: usize, context: usize },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("missing parameter {0}")]
    MissingParam(String),
}

/// Which components are excluded from gradient updates.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct FrozenFlags {
    pub vision: bool,
    pub connector: bool,
    pub language: bool,
}

impl FrozenFlags {
    pub fn get(&self, c: Component) -> bool {
        match c {
            Component::Vision => self.vision,
            Component::Connector => self.connector,
            Component::Language => self.language,
        }
    }

    pub fn set(&mut self, c: Component, frozen: bool) {
        match c {
            Component::Vision => self.vision = frozen,
            Component::Connector => self.connector = frozen,
            Component::Language => self.language = frozen,
        }
    }
}

#[derive(Clone, Debug)]
pub struct MultimodalModel<T: Scalar = f32> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    pub frozen: FrozenFlags,
}

impl<T: Scalar> MultimodalModel<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let params = init_params(&config, seed);
        Ok(MultimodalModel { config, params, frozen: FrozenFlags::default() })
    }

    /// Wraps an existing parameter set after checking every name and shape
    /// against what the configuration prescribes.
    pub fn from_params(config: ModelConfig, params: ParamStore<T>) -> Result<Self, ModelError> {
        config.validate()?;
        let expected: ParamStore<T> = init_params(&config, 0);
        if expected.len() != params.len() {
            return Err(ModelError::Config(format!(
                "expected {} parameter arrays, got {}",
                expected.len(),
                params.len()
            )));
        }
        for (name, t) in &expected {
            let got = params.get(name).ok_or_else(|| ModelError::MissingParam(name.clone()))?;
            if got.shape() != t.shape() {
                return Err(ModelError::Config(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    got.shape(),
                    t.shape()
                )));
            }
        }
        Ok(MultimodalModel { config, params, frozen: FrozenFlags::default() })
    }

    pub fn is_frozen(&self, c: Component) -> bool {
        self.frozen.get(c)
    }

    pub fn set_frozen(&mut self, c: Component, frozen: bool) {
        self.frozen.set(c, frozen);
    }

    /// Replaces every vision parameter with the given tower weights.
    pub fn load_vision(&mut self, vision: &ParamStore<T>) -> Result<(), ModelError> {
        for (name, t) in self.params.iter_mut().filter(|(n, _)| n.starts_with(Component::Vision.prefix())) {
            let src = vision.get(name).ok_or_else(|| ModelError::MissingParam(name.clone()))?;
            if src.shape() != t.shape() {
                return Err(ModelError::Config(format!("vision parameter {name} has shape {:?}", src.shape())));
            }
            *t = src.clone();
        }
        Ok(())
    }

    /// Number of scalars held by a component's arrays.
    pub fn count(&self, c: Component) -> usize {
        self.params.iter().filter(|(n, _)| n.starts_with(c.prefix())).map(|(_, t)| t.len()).sum()
    }

    pub fn component_hash(&self, c: Component) -> String {
        component_hash(&self.params, c)
    }

    /// Vision features, `g² × d_v`.
    pub fn encode_image(&self, image: &Image) -> Result<Tensor<T>, ModelError> {
        let mut tape = Tape::new();
        let mut f = Forward::new(self, &mut tape, false);
        let v = f.encode_image(image)?;
        Ok(tape.value(v).clone())
    }

    /// Connector output for given vision features, `g² × d_lm`.
    pub fn connect(&self, features: &Tensor<T>) -> Result<Tensor<T>, ModelError> {
        let mut tape = Tape::new();
        let mut f = Forward::new(self, &mut tape, false);
        let x = f.tape().constant(features.clone());
        let v = f.connect(x)?;
        Ok(tape.value(v).clone())
    }

    /// Image tokens as seen by the language tower.
    pub fn image_prefix(&self, image: &Image) -> Result<Tensor<T>, ModelError> {
        self.connect(&self.encode_image(image)?)
    }

    /// Next-token logits for every position of `image ‖ tokens`, shape `(g² + n) × V`.
    pub fn forward_multimodal(&self, image: &Image, tokens: &[usize]) -> Result<Tensor<T>, ModelError> {
        let prefix = self.image_prefix(image)?;
        self.logits_with_prefix(&prefix, tokens)
    }

    pub fn logits_with_prefix(&self, prefix: &Tensor<T>, tokens: &[usize]) -> Result<Tensor<T>, ModelError> {
        let mut tape = Tape::new();
        let mut f = Forward::new(self, &mut tape, false);
        let p = f.tape().constant(prefix.clone());
        let h = f.language(Some(p), tokens)?;
        let l = f.logits(h)?;
        Ok(tape.value(l).clone())
    }

    /// Greedy decoding. Ties go to the lowest token id. Stops after
    /// `max_new_tokens` or at the end-of-answer marker, which is not returned.
    pub fn generate(&self, image: &Image, prompt: &[usize], max_new_tokens: usize) -> Result<Vec<usize>, ModelError> {
        self.generate_with_prefix(&self.image_prefix(image)?, prompt, max_new_tokens)
    }

    /// [`MultimodalModel::generate`] from precomputed image tokens.
    pub fn generate_with_prefix(
        &self,
        prefix: &Tensor<T>,
        prompt: &[usize],
        max_new_tokens: usize,
    ) -> Result<Vec<usize>, ModelError> {
        let vocab = self.config.language.vocab_size;
        if let Some(&bad) = prompt.iter().find(|&&t| t >= vocab) {
            return Err(ModelError::Input(format!("token id {bad} outside vocabulary of {vocab}")));
        }
        let mut tokens = prompt.to_vec();
        let mut out = Vec::new();
        for _ in 0..max_new_tokens {
            let mut tape = Tape::new();
            let mut f = Forward::new(self, &mut tape, false);
            let p = f.tape().constant(prefix.clone());
            let h = f.language(Some(p), &tokens)?;
            let last = f.tape().value(h).dims2().0 - 1;
            let h = f.tape().gather_rows(h, &[last])?;
            let l = f.logits(h)?;
            let next = argmax(tape.value(l).data());
            if next == END_OF_ANSWER_ID {
                break;
            }
            out.push(next);
            tokens.push(next);
        }
        Ok(out)
    }
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax<T: Scalar>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}
