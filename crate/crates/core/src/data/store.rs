//! On-disk corpus layout:
//!
//! ```text
//! <dir>/manifest.json         CorpusManifest
//! <dir>/images.bin            n × 32×32×3 u8, row-major RGB, in id order
//! <dir>/conversations.jsonl   one ConversationRecord per line, in id order
//! ```

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::corpus::{BenchmarkName, Sample, TaskMix, TaskTag, Turn};
use super::scene::{Scene, SceneObject, CANVAS};
use super::DataError;
use crate::hashing::sha256_hex;

pub const CORPUS_FORMAT: &str = "mmfm-corpus/1";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const IMAGES_FILE: &str = "images.bin";
pub const CONVERSATIONS_FILE: &str = "conversations.jsonl";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorpusKind {
    Pretrain,
    Instruct,
    Benchmark,
    Vision,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub format: String,
    pub kind: CorpusKind,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub benchmark: Option<BenchmarkName>,
    pub n: usize,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mix: Option<TaskMix>,
    pub image_shape: [usize; 3],
    pub images: String,
    pub images_sha256: String,
    pub conversations: String,
    pub conversations_sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConversationRecord {
    pub id: u64,
    pub scene_seed: u64,
    pub task: TaskTag,
    pub objects: Vec<SceneObject>,
    pub conversation: Vec<Turn>,
    pub gold_answer: String,
}

pub fn write_corpus(
    dir: &Path,
    kind: CorpusKind,
    benchmark: Option<BenchmarkName>,
    seed: u64,
    mix: Option<TaskMix>,
    samples: &[Sample],
) -> Result<PathBuf, DataError> {
    fs::create_dir_all(dir)?;
    let mut blob = Vec::with_capacity(samples.len() * CANVAS * CANVAS * 3);
    let mut lines = Vec::new();
    for s in samples {
        blob.extend_from_slice(&s.scene.render().pixels);
        let rec = ConversationRecord {
            id: s.id,
            scene_seed: s.scene.seed,
            task: s.task,
            objects: s.scene.objects.clone(),
            conversation: s.conversation(),
            gold_answer: s.answer.clone(),
        };
        serde_json::to_writer(&mut lines, &rec)?;
        lines.push(b'\n');
    }
    fs::write(dir.join(IMAGES_FILE), &blob)?;
    fs::write(dir.join(CONVERSATIONS_FILE), &lines)?;
    let manifest = CorpusManifest {
        format: CORPUS_FORMAT.into(),
        kind,
        benchmark,
        n: samples.len(),
        seed,
        mix,
        image_shape: [CANVAS, CANVAS, 3],
        images: IMAGES_FILE.into(),
        images_sha256: sha256_hex(&blob),
        conversations: CONVERSATIONS_FILE.into(),
        conversations_sha256: sha256_hex(&lines),
    };
    let path = dir.join(MANIFEST_FILE);
    let mut f = fs::File::create(&path)?;
    serde_json::to_writer_pretty(&mut f, &manifest)?;
    f.write_all(b"\n")?;
    Ok(path)
}

pub fn read_corpus(dir: &Path) -> Result<(CorpusManifest, Vec<Sample>), DataError> {
    let manifest: CorpusManifest = serde_json::from_slice(&fs::read(dir.join(MANIFEST_FILE))?)?;
    if manifest.format != CORPUS_FORMAT {
        return Err(DataError::Format(format!("unsupported corpus format {:?}", manifest.format)));
    }
    let blob = fs::read(dir.join(&manifest.images))?;
    let lines = fs::read(dir.join(&manifest.conversations))?;
    if sha256_hex(&blob) != manifest.images_sha256 || sha256_hex(&lines) != manifest.conversations_sha256 {
        return Err(DataError::Format("corpus files do not match manifest hashes".into()));
    }
    let per_image = manifest.image_shape.iter().product::<usize>();
    if blob.len() != per_image * manifest.n {
        return Err(DataError::Format("image blob size does not match manifest".into()));
    }
    let mut samples = Vec::with_capacity(manifest.n);
    for (k, line) in lines.split(|&b| b == b'\n').filter(|l| !l.is_empty()).enumerate() {
        let rec: ConversationRecord = serde_json::from_slice(line)?;
        let scene = Scene { seed: rec.scene_seed, objects: rec.objects };
        if scene.render().pixels != blob[k * per_image..(k + 1) * per_image] {
            return Err(DataError::Format(format!("image {k} does not match its scene")));
        }
        let question = rec.conversation.first().map(|t| t.text.clone()).unwrap_or_default();
        samples.push(Sample { id: rec.id, scene, task: rec.task, question, answer: rec.gold_answer });
    }
    if samples.len() != manifest.n {
        return Err(DataError::Format(format!("expected {} records, found {}", manifest.n, samples.len())));
    }
    Ok((manifest, samples))
}
