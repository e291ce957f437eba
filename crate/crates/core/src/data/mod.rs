//! Procedural scenes, conversations, and held-out benchmark analogs.

mod corpus;
mod scene;
mod store;
mod tokenizer;

pub use corpus::{
    caption, gen_benchmark, gen_instruction_corpus, gen_pretrain_corpus, gen_vision_corpus, namespace_of,
    relation, scene_seed, BenchmarkName, BenchmarkSpec, Namespace, Role, Sample, TaskMix, TaskTag, Turn,
    CAPTION_PROMPT,
};
pub use scene::{Color, Image, Scene, SceneObject, Shape, CANVAS, CELL, GRID, MAX_OBJECTS};
pub use store::{read_corpus, write_corpus, ConversationRecord, CorpusKind, CorpusManifest};
pub use tokenizer::{
    Tokenizer, ASSISTANT, ASSISTANT_ID, END_OF_ANSWER, END_OF_ANSWER_ID, PAD, PAD_ID, TASK_WORDS, USER, USER_ID,
};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid task mix: {0}")]
    InvalidMix(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("corpus format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
