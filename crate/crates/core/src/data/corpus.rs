use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::scene::{Color, Scene, SceneObject, Shape};
use super::tokenizer::{Tokenizer, ASSISTANT_ID, END_OF_ANSWER_ID, USER_ID};
use super::DataError;
use crate::numeric::rng::splitmix64;
use crate::numeric::Rng;

pub const CAPTION_PROMPT: &str = "describe the image .";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskTag {
    Caption,
    Existence,
    Attribute,
    Count,
    Spatial,
}

impl TaskTag {
    pub const ALL: [TaskTag; 5] =
        [TaskTag::Caption, TaskTag::Existence, TaskTag::Attribute, TaskTag::Count, TaskTag::Spatial];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskTag::Caption => "caption",
            TaskTag::Existence => "existence",
            TaskTag::Attribute => "attribute",
            TaskTag::Count => "count",
            TaskTag::Spatial => "spatial",
        }
    }
}

impl std::str::FromStr for TaskTag {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TaskTag::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| DataError::Input(format!("unknown task tag {s:?}")))
    }
}

/// Task proportions for an instruction corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskMix {
    pub caption: f64,
    pub existence: f64,
    pub attribute: f64,
    pub count: f64,
    pub spatial: f64,
}

impl Default for TaskMix {
    fn default() -> Self {
        TaskMix { caption: 0.2, existence: 0.2, attribute: 0.2, count: 0.2, spatial: 0.2 }
    }
}

impl TaskMix {
    pub const ZERO: TaskMix = TaskMix { caption: 0.0, existence: 0.0, attribute: 0.0, count: 0.0, spatial: 0.0 };

    pub fn only(task: TaskTag) -> Self {
        let mut m = TaskMix::ZERO;
        *m.weight_mut(task) = 1.0;
        m
    }

    pub fn weight(&self, task: TaskTag) -> f64 {
        match task {
            TaskTag::Caption => self.caption,
            TaskTag::Existence => self.existence,
            TaskTag::Attribute => self.attribute,
            TaskTag::Count => self.count,
            TaskTag::Spatial => self.spatial,
        }
    }

    fn weight_mut(&mut self, task: TaskTag) -> &mut f64 {
        match task {
            TaskTag::Caption => &mut self.caption,
            TaskTag::Existence => &mut self.existence,
            TaskTag::Attribute => &mut self.attribute,
            TaskTag::Count => &mut self.count,
            TaskTag::Spatial => &mut self.spatial,
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let ws: Vec<f64> = TaskTag::ALL.iter().map(|&t| self.weight(t)).collect();
        if ws.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(DataError::InvalidMix(format!("negative or non-finite weight in {self:?}")));
        }
        let total: f64 = ws.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(DataError::InvalidMix(format!("weights sum to {total}, not 1")));
        }
        Ok(())
    }

    /// Parses `caption:.2,existence:.8`; unnamed tasks get weight 0.
    pub fn parse(spec: &str) -> Result<Self, DataError> {
        let mut m = TaskMix::ZERO;
        for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (name, w) = part
                .split_once(':')
                .ok_or_else(|| DataError::InvalidMix(format!("expected task:weight, got {part:?}")))?;
            let task: TaskTag = name.trim().parse().map_err(|_| DataError::InvalidMix(format!("unknown task {name:?}")))?;
            *m.weight_mut(task) =
                w.trim().parse().map_err(|_| DataError::InvalidMix(format!("bad weight {w:?}")))?;
        }
        m.validate()?;
        Ok(m)
    }

    fn draw(&self, rng: &mut Rng) -> TaskTag {
        let u = rng.uniform();
        let mut acc = 0.0;
        for t in TaskTag::ALL {
            acc += self.weight(t);
            if u < acc {
                return t;
            }
        }
        // Rounding slack: fall back to the last task with positive weight.
        *TaskTag::ALL.iter().rev().find(|&&t| self.weight(t) > 0.0).unwrap()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    User,
    Assistant,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub role: Role,
    pub text: String,
}

/// One image plus a single user/assistant exchange.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub id: u64,
    pub scene: Scene,
    pub task: TaskTag,
    pub question: String,
    pub answer: String,
}

impl Sample {
    pub fn conversation(&self) -> Vec<Turn> {
        vec![
            Turn { role: Role::User, text: self.question.clone() },
            Turn { role: Role::Assistant, text: self.answer.clone() },
        ]
    }

    /// `USER: <question> ASSISTANT:`; image tokens are prepended by the model.
    pub fn prompt_ids(&self, tok: &Tokenizer) -> Result<Vec<usize>, DataError> {
        let mut ids = vec![USER_ID];
        ids.extend(tok.encode(&self.question)?);
        ids.push(ASSISTANT_ID);
        Ok(ids)
    }

    /// Answer tokens followed by the end-of-answer marker.
    pub fn answer_ids(&self, tok: &Tokenizer) -> Result<Vec<usize>, DataError> {
        let mut ids = tok.encode(&self.answer)?;
        ids.push(END_OF_ANSWER_ID);
        Ok(ids)
    }

    pub fn gold_answer_ids(&self, tok: &Tokenizer) -> Result<Vec<usize>, DataError> {
        tok.encode(&self.answer)
    }
}

/// Disjoint scene-seed partitions; the namespace occupies the top byte.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Namespace {
    Pretrain = 1,
    Instruct = 2,
    Vision = 3,
    ToyGqa = 8,
    ToyPope = 9,
    ToyVqa = 10,
}

impl Namespace {
    pub fn is_training(self) -> bool {
        matches!(self, Namespace::Pretrain | Namespace::Instruct | Namespace::Vision)
    }
}

pub fn scene_seed(ns: Namespace, seed: u64, index: u64) -> u64 {
    let low = splitmix64(splitmix64(seed) ^ index) & ((1u64 << 56) - 1);
    ((ns as u64) << 56) | low
}

pub fn namespace_of(scene_seed: u64) -> u8 {
    (scene_seed >> 56) as u8
}

pub fn caption(scene: &Scene) -> String {
    scene
        .reading_order()
        .iter()
        .map(|o| format!("a {}", o.describe()))
        .collect::<Vec<_>>()
        .join(" and ")
}

/// Position of `a` relative to `b`: horizontal offset wins ties.
pub fn relation(a: &SceneObject, b: &SceneObject) -> &'static str {
    let dc = a.col as i64 - b.col as i64;
    let dr = a.row as i64 - b.row as i64;
    if dc.abs() >= dr.abs() {
        if dc < 0 {
            "left"
        } else {
            "right"
        }
    } else if dr < 0 {
        "above"
    } else {
        "below"
    }
}

fn pick<'a, T>(items: &'a [T], rng: &mut Rng) -> &'a T {
    &items[rng.below(items.len())]
}

/// Builds a (question, answer) for `task` on `scene`, or `None` if the scene
/// cannot support it.
fn pose(task: TaskTag, scene: &Scene, existence: Option<bool>, rng: &mut Rng) -> Option<(String, String)> {
    match task {
        TaskTag::Caption => Some((CAPTION_PROMPT.to_string(), caption(scene))),
        TaskTag::Existence => {
            let positive = existence.unwrap_or_else(|| rng.uniform() < 0.5);
            let (color, shape) = if positive {
                let o = pick(&scene.objects, rng);
                (o.color, o.shape)
            } else {
                let absent: Vec<(Color, Shape)> = Color::ALL
                    .iter()
                    .flat_map(|&c| Shape::ALL.iter().map(move |&s| (c, s)))
                    .filter(|&(c, s)| !scene.contains(c, s))
                    .collect();
                *pick(&absent, rng)
            };
            let answer = if positive { "yes" } else { "no" };
            Some((format!("is there a {} {} ?", color.word(), shape.word()), answer.to_string()))
        }
        TaskTag::Attribute => {
            let unique: Vec<&SceneObject> = scene
                .objects
                .iter()
                .filter(|o| scene.objects.iter().filter(|p| p.shape == o.shape).count() == 1)
                .collect();
            if unique.is_empty() {
                return None;
            }
            let o = pick(&unique, rng);
            Some((format!("what color is the {} ?", o.shape.word()), o.color.word().to_string()))
        }
        TaskTag::Count => {
            if rng.uniform() < 0.5 {
                Some(("how many objects ?".to_string(), scene.objects.len().to_string()))
            } else {
                let color = *pick(&Color::ALL, rng);
                let n = scene.objects.iter().filter(|o| o.color == color).count();
                Some((format!("how many {} objects ?", color.word()), n.to_string()))
            }
        }
        TaskTag::Spatial => {
            let unique: Vec<&SceneObject> =
                scene.objects.iter().filter(|o| scene.find_unique(o.color, o.shape).is_some()).collect();
            if unique.len() < 2 {
                return None;
            }
            let i = rng.below(unique.len());
            let mut j = rng.below(unique.len() - 1);
            if j >= i {
                j += 1;
            }
            let (a, b) = (unique[i], unique[j]);
            Some((
                format!("where is the {} relative to the {} ?", a.describe(), b.describe()),
                relation(a, b).to_string(),
            ))
        }
    }
}

fn make_sample(
    ns: Namespace,
    seed: u64,
    index: u64,
    task: Option<TaskTag>,
    mix: &TaskMix,
    existence: Option<bool>,
) -> Sample {
    let sseed = scene_seed(ns, seed, index);
    let mut rng = Rng::new(sseed);
    let task = task.unwrap_or_else(|| mix.draw(&mut rng));
    // Resample until the scene supports the task; attribute and spatial
    // questions need uniquely identifiable objects.
    loop {
        let scene = Scene::random(sseed, &mut rng);
        if let Some((question, answer)) = pose(task, &scene, existence, &mut rng) {
            return Sample { id: index, scene, task, question, answer };
        }
    }
}

pub fn gen_pretrain_corpus(n: usize, seed: u64) -> Result<Vec<Sample>, DataError> {
    if n == 0 {
        return Err(DataError::Input("corpus size must be at least 1".into()));
    }
    let mix = TaskMix::only(TaskTag::Caption);
    Ok((0..n as u64)
        .into_par_iter()
        .map(|i| make_sample(Namespace::Pretrain, seed, i, Some(TaskTag::Caption), &mix, None))
        .collect())
}

pub fn gen_instruction_corpus(n: usize, seed: u64, mix: &TaskMix) -> Result<Vec<Sample>, DataError> {
    mix.validate()?;
    if n == 0 {
        return Err(DataError::Input("corpus size must be at least 1".into()));
    }
    Ok((0..n as u64)
        .into_par_iter()
        .map(|i| make_sample(Namespace::Instruct, seed, i, None, mix, None))
        .collect())
}

/// Captioned scenes for vision-tower pretraining, drawn from their own namespace.
pub fn gen_vision_corpus(n: usize, seed: u64) -> Result<Vec<Sample>, DataError> {
    if n == 0 {
        return Err(DataError::Input("corpus size must be at least 1".into()));
    }
    let mix = TaskMix::only(TaskTag::Caption);
    Ok((0..n as u64)
        .into_par_iter()
        .map(|i| make_sample(Namespace::Vision, seed, i, Some(TaskTag::Caption), &mix, None))
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum BenchmarkName {
    #[serde(rename = "toy-gqa")]
    ToyGqa,
    #[serde(rename = "toy-pope")]
    ToyPope,
    #[serde(rename = "toy-vqa")]
    ToyVqa,
}

impl BenchmarkName {
    pub const ALL: [BenchmarkName; 3] = [BenchmarkName::ToyGqa, BenchmarkName::ToyPope, BenchmarkName::ToyVqa];

    pub fn as_str(self) -> &'static str {
        match self {
            BenchmarkName::ToyGqa => "toy-gqa",
            BenchmarkName::ToyPope => "toy-pope",
            BenchmarkName::ToyVqa => "toy-vqa",
        }
    }

    pub fn namespace(self) -> Namespace {
        match self {
            BenchmarkName::ToyGqa => Namespace::ToyGqa,
            BenchmarkName::ToyPope => Namespace::ToyPope,
            BenchmarkName::ToyVqa => Namespace::ToyVqa,
        }
    }

    pub fn mix(self) -> TaskMix {
        match self {
            BenchmarkName::ToyGqa => TaskMix { attribute: 0.5, spatial: 0.5, ..TaskMix::ZERO },
            BenchmarkName::ToyPope => TaskMix::only(TaskTag::Existence),
            BenchmarkName::ToyVqa => {
                TaskMix { count: 0.5, attribute: 0.25, existence: 0.25, ..TaskMix::ZERO }
            }
        }
    }

    /// Yes/no benchmarks additionally report precision, recall and F1.
    pub fn is_binary(self) -> bool {
        matches!(self, BenchmarkName::ToyPope)
    }
}

impl std::fmt::Display for BenchmarkName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for BenchmarkName {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        BenchmarkName::ALL
            .into_iter()
            .find(|b| b.as_str() == s)
            .ok_or_else(|| DataError::Input(format!("unknown benchmark {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchmarkSpec {
    pub name: BenchmarkName,
    pub size: usize,
    pub seed: u64,
}

/// Held-out items. toy-pope alternates positive (even ids) and negative probes.
pub fn gen_benchmark(spec: &BenchmarkSpec) -> Result<Vec<Sample>, DataError> {
    if spec.size == 0 {
        return Err(DataError::Input("benchmark size must be at least 1".into()));
    }
    let mix = spec.name.mix();
    let ns = spec.name.namespace();
    Ok((0..spec.size as u64)
        .into_par_iter()
        .map(|i| {
            let existence = spec.name.is_binary().then_some(i % 2 == 0);
            make_sample(ns, spec.seed, i, None, &mix, existence)
        })
        .collect())
}
