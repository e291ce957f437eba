//! Whitespace-word tokenizer over a closed task vocabulary.
//!
//! Task words always occupy ids `0..TASK_WORDS.len()`, so every vocabulary size
//! encodes task text identically and `V` only changes the embedding table and
//! the softmax width. Ids above the task block are filler: any out-of-vocabulary
//! word hashes onto one of them.

use super::DataError;
use crate::numeric::rng::fnv1a;

pub const PAD: &str = "<pad>";
pub const END_OF_ANSWER: &str = "<eoa>";
pub const USER: &str = "USER:";
pub const ASSISTANT: &str = "ASSISTANT:";

pub const TASK_WORDS: &[&str] = &[
    PAD, END_OF_ANSWER, USER, ASSISTANT, //
    "a", "and", "is", "there", "what", "color", "the", "how", "many", "objects", "where",
    "relative", "to", "describe", "image", "?", ".", //
    "yes", "no", //
    "red", "green", "blue", "yellow", //
    "circle", "square", "triangle", //
    "0", "1", "2", "3", "4", //
    "left", "right", "above", "below",
];

pub const PAD_ID: usize = 0;
pub const END_OF_ANSWER_ID: usize = 1;
pub const USER_ID: usize = 2;
pub const ASSISTANT_ID: usize = 3;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Tokenizer {
    vocab_size: usize,
}

impl Tokenizer {
    pub fn new(vocab_size: usize) -> Result<Self, DataError> {
        if vocab_size < TASK_WORDS.len() {
            return Err(DataError::Config(format!(
                "vocabulary size {vocab_size} is smaller than the {} task words",
                TASK_WORDS.len()
            )));
        }
        Ok(Tokenizer { vocab_size })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        TASK_WORDS.iter().position(|&w| w == word)
    }

    fn filler_id(&self, word: &str) -> Option<usize> {
        let k = TASK_WORDS.len();
        let span = self.vocab_size - k;
        (span > 0).then(|| k + (fnv1a(word) % span as u64) as usize)
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>, DataError> {
        text.split_whitespace()
            .map(|w| {
                self.id(w).or_else(|| self.filler_id(w)).ok_or_else(|| {
                    DataError::Config(format!("word {w:?} is outside a vocabulary with no filler ids"))
                })
            })
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter().map(|&i| self.word(i)).collect::<Vec<_>>().join(" ")
    }

    pub fn word(&self, id: usize) -> String {
        match TASK_WORDS.get(id) {
            Some(w) => (*w).to_string(),
            None => format!("<f{id}>"),
        }
    }
}
