//! Architecture configuration.
//!
//! The key-value file format is TOML with three optional sections. Any field
//! left out takes the preset default for the chosen variant / size:
//!
//! ```toml
//! [vision]
//! variant = "A"        # "A" (contrastive, CLIP-like) | "B" (self-distilled, DINO-like)
//! patch_grid = 4       # tokens per side; image tokens = patch_grid²
//! patch_size = 8       # pixels per patch side
//! embed_dim = 32
//! layers = 2
//! heads = 2
//!
//! [language]
//! size_preset = "S"    # "S" | "L"
//! vocab_size = 512
//! embed_dim = 64
//! layers = 4
//! heads = 4
//! context_length = 256
//!
//! [connector]
//! hidden_dim = 64      # defaults to the language embed_dim
//! ```

use serde::{Deserialize, Serialize};

use super::ModelError;

pub const MLP_RATIO: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum VisionVariant {
    /// Contrastive image-caption pretraining.
    A,
    /// Self-distillation pretraining; wider and deeper.
    B,
}

impl VisionVariant {
    pub fn as_str(self) -> &'static str {
        match self {
            VisionVariant::A => "A",
            VisionVariant::B => "B",
        }
    }
}

impl std::str::FromStr for VisionVariant {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, ModelError> {
        match s {
            "A" | "a" => Ok(VisionVariant::A),
            "B" | "b" => Ok(VisionVariant::B),
            _ => Err(ModelError::Config(format!("unknown vision variant {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LmPreset {
    S,
    L,
}

impl LmPreset {
    pub fn as_str(self) -> &'static str {
        match self {
            LmPreset::S => "S",
            LmPreset::L => "L",
        }
    }
}

impl std::str::FromStr for LmPreset {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, ModelError> {
        match s {
            "S" | "s" => Ok(LmPreset::S),
            "L" | "l" => Ok(LmPreset::L),
            _ => Err(ModelError::Config(format!("unknown language preset {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VisionTowerConfig {
    pub variant: VisionVariant,
    pub patch_grid: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub layers: usize,
    pub heads: usize,
}

impl VisionTowerConfig {
    pub fn preset(variant: VisionVariant) -> Self {
        let (embed_dim, layers, heads) = match variant {
            VisionVariant::A => (32, 2, 2),
            VisionVariant::B => (64, 4, 4),
        };
        VisionTowerConfig { variant, patch_grid: 4, patch_size: 8, embed_dim, layers, heads }
    }

    pub fn tokens(&self) -> usize {
        self.patch_grid * self.patch_grid
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.patch_grid < 2 {
            return Err(ModelError::Config(format!("patch_grid must be >= 2, got {}", self.patch_grid)));
        }
        if self.patch_size == 0 || self.layers == 0 || self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return Err(ModelError::Config(format!(
                "vision embed_dim {} must be a positive multiple of heads {}",
                self.embed_dim, self.heads
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LanguageTowerConfig {
    pub size_preset: LmPreset,
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub context_length: usize,
}

impl LanguageTowerConfig {
    pub fn preset(size: LmPreset, vocab_size: usize) -> Self {
        let (embed_dim, layers, heads) = match size {
            LmPreset::S => (64, 4, 4),
            LmPreset::L => (128, 8, 8),
        };
        LanguageTowerConfig { size_preset: size, vocab_size, embed_dim, layers, heads, context_length: 256 }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.layers == 0 || self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return Err(ModelError::Config(format!(
                "language embed_dim {} must be a positive multiple of heads {}",
                self.embed_dim, self.heads
            )));
        }
        if self.vocab_size < crate::data::TASK_WORDS.len() {
            return Err(ModelError::Config(format!(
                "vocab_size {} cannot hold the {} task words",
                self.vocab_size,
                crate::data::TASK_WORDS.len()
            )));
        }
        Ok(())
    }
}

/// Two linear layers with GELU between them.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConnectorConfig {
    pub hidden_dim: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vision: VisionTowerConfig,
    pub language: LanguageTowerConfig,
    pub connector: ConnectorConfig,
}

impl ModelConfig {
    pub fn preset(lm: LmPreset, vision: VisionVariant, vocab_size: usize) -> Self {
        let language = LanguageTowerConfig::preset(lm, vocab_size);
        ModelConfig {
            vision: VisionTowerConfig::preset(vision),
            connector: ConnectorConfig { hidden_dim: language.embed_dim },
            language,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        self.vision.validate()?;
        self.language.validate()?;
        if self.connector.hidden_dim == 0 {
            return Err(ModelError::Config("connector hidden_dim must be positive".into()));
        }
        if self.vision.tokens() >= self.language.context_length {
            return Err(ModelError::Config("image tokens fill the whole context".into()));
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self, ModelError> {
        let file: ConfigFile = toml::from_str(text).map_err(|e| ModelError::Config(e.to_string()))?;
        file.resolve()
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("model config serializes")
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    #[serde(default)]
    vision: VisionSection,
    #[serde(default)]
    language: LanguageSection,
    #[serde(default)]
    connector: ConnectorSection,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct VisionSection {
    variant: Option<VisionVariant>,
    patch_grid: Option<usize>,
    patch_size: Option<usize>,
    embed_dim: Option<usize>,
    layers: Option<usize>,
    heads: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct LanguageSection {
    size_preset: Option<LmPreset>,
    vocab_size: Option<usize>,
    embed_dim: Option<usize>,
    layers: Option<usize>,
    heads: Option<usize>,
    context_length: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConnectorSection {
    hidden_dim: Option<usize>,
}

impl ConfigFile {
    fn resolve(self) -> Result<ModelConfig, ModelError> {
        let v = self.vision;
        let mut vision = VisionTowerConfig::preset(v.variant.unwrap_or(VisionVariant::A));
        vision.patch_grid = v.patch_grid.unwrap_or(vision.patch_grid);
        vision.patch_size = v.patch_size.unwrap_or(vision.patch_size);
        vision.embed_dim = v.embed_dim.unwrap_or(vision.embed_dim);
        vision.layers = v.layers.unwrap_or(vision.layers);
        vision.heads = v.heads.unwrap_or(vision.heads);

        let l = self.language;
        let mut language =
            LanguageTowerConfig::preset(l.size_preset.unwrap_or(LmPreset::S), l.vocab_size.unwrap_or(512));
        language.embed_dim = l.embed_dim.unwrap_or(language.embed_dim);
        language.layers = l.layers.unwrap_or(language.layers);
        language.heads = l.heads.unwrap_or(language.heads);
        language.context_length = l.context_length.unwrap_or(language.context_length);

        let connector = ConnectorConfig { hidden_dim: self.connector.hidden_dim.unwrap_or(language.embed_dim) };
        let cfg = ModelConfig { vision, language, connector };
        cfg.validate()?;
        Ok(cfg)
    }
}
