//! Seeded synthetic corpora: small tasks with known structure for tests,
//! benchmarks and the examples.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::corpus::{build_pairs, AnnotationRecord, AnswerType, MultipleChoiceQuestion, QaPair, Question, ANSWERS_PER_QUESTION};
use crate::error::{Error, Result};
use crate::features::{
    encode_map_store, encode_vector_store, gap, write_map_store, write_vector_store, ConvFeatureMap, ImageFeature,
    MapStore, VectorStore,
};
use crate::inference::Engine;
use crate::model::Hyperparams;
use crate::train::{train, TrainConfig};
use crate::vocab::tokenize;

/// Cluster `cluster`'s direction scaled by `scale`, plus uniform noise in
/// `[-noise, noise]` on every coordinate.
fn cluster_vector(rng: &mut ChaCha8Rng, dim: usize, cluster: usize, scale: f32, noise: f32) -> Vec<f32> {
    (0..dim)
        .map(|k| {
            let base = if k == cluster { scale } else { 0.0 };
            base + rng.random_range(-noise..=noise)
        })
        .collect()
}

fn in_memory_store(dim: usize, features: &[ImageFeature]) -> VectorStore {
    VectorStore::from_bytes(encode_vector_store(dim, features).expect("generated features are valid"))
        .expect("encoded store parses")
}

fn pair(question_id: u64, image_id: u64, question: &str, answer: String) -> QaPair {
    QaPair {
        question_id,
        image_id,
        tokens: tokenize(question),
        answer,
        answer_type: AnswerType::Other,
    }
}

/// Answers that need both modalities: the question names one of four
/// keywords, the image belongs to one of four orthogonal clusters, and the
/// answer is the (keyword, cluster) combination.
#[derive(Debug)]
pub struct SeparableTask {
    pub train: Vec<QaPair>,
    pub val: Vec<QaPair>,
    pub store: VectorStore,
}

impl SeparableTask {
    pub const KEYWORDS: [&'static str; 4] = ["red", "green", "blue", "yellow"];
    pub const SHAPES: [&'static str; 4] = ["circle", "square", "star", "ring"];
    pub const IMAGE_DIM: usize = 8;

    /// Training pairs draw keyword and cluster uniformly; validation pairs
    /// cycle through all sixteen combinations so no single-modality rule
    /// can exceed roughly a quarter of them.
    pub fn generate(n_train: usize, n_val: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut features = Vec::with_capacity(n_train + n_val);
        let mut make = |rng: &mut ChaCha8Rng, id: u64, kw: usize, shape: usize| {
            features.push(ImageFeature::new(
                id,
                cluster_vector(rng, Self::IMAGE_DIM, shape, 4.0, 0.3),
            ));
            let kw = Self::KEYWORDS[kw];
            pair(
                id,
                id,
                &format!("what is the {kw} one"),
                format!("{kw} {}", Self::SHAPES[shape]),
            )
        };
        let train = (0..n_train as u64)
            .map(|i| {
                let kw = rng.random_range(0..4);
                let shape = rng.random_range(0..4);
                make(&mut rng, i + 1, kw, shape)
            })
            .collect();
        let val = (0..n_val as u64)
            .map(|i| {
                let combo = (i % 16) as usize;
                make(&mut rng, 1_000_000 + i, combo % 4, combo / 4)
            })
            .collect();
        let store = in_memory_store(Self::IMAGE_DIM, &features);
        SeparableTask { train, val, store }
    }
}

/// A corpus where most answers follow from a keyword in the question and
/// the rest from the image cluster alone.
#[derive(Debug)]
pub struct WordBiasedTask {
    pub train: Vec<QaPair>,
    pub val: Vec<QaPair>,
    pub store: VectorStore,
}

impl WordBiasedTask {
    pub const TOPICS: [(&'static str, &'static str); 8] = [
        ("sport", "tennis"),
        ("animal", "dog"),
        ("food", "pizza"),
        ("vehicle", "bus"),
        ("weather", "sunny"),
        ("room", "kitchen"),
        ("fruit", "banana"),
        ("instrument", "guitar"),
    ];
    pub const COLORS: [&'static str; 8] = ["red", "blue", "green", "white", "black", "brown", "orange", "pink"];
    pub const IMAGE_DIM: usize = 16;

    /// `keyword_rate` of the questions name a topic whose answer is fixed;
    /// the others ask for the color, which only the image cluster reveals.
    pub fn generate(n_train: usize, n_val: usize, keyword_rate: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut features = Vec::with_capacity(n_train + n_val);
        let mut make = |rng: &mut ChaCha8Rng, id: u64| {
            let cluster = rng.random_range(0..Self::COLORS.len());
            features.push(ImageFeature::new(
                id,
                cluster_vector(rng, Self::IMAGE_DIM, cluster, 4.0, 0.3),
            ));
            if rng.random_bool(keyword_rate) {
                let (topic, answer) = *Self::TOPICS.choose(rng).expect("nonempty");
                pair(id, id, &format!("what {topic} is shown here"), answer.to_string())
            } else {
                pair(id, id, "what color is shown here", Self::COLORS[cluster].to_string())
            }
        };
        let train = (1..=n_train as u64).map(|id| make(&mut rng, id)).collect();
        let val = (0..n_val as u64).map(|i| make(&mut rng, 1_000_000 + i)).collect();
        let store = in_memory_store(Self::IMAGE_DIM, &features);
        WordBiasedTask { train, val, store }
    }
}

/// A small VQA-format corpus with convolutional maps whose pooled vectors
/// form the vector store.
#[derive(Debug, Clone)]
pub struct SyntheticVqa {
    pub questions: Vec<Question>,
    pub annotations: Vec<AnnotationRecord>,
    pub multiple_choice: Vec<MultipleChoiceQuestion>,
    pub maps: Vec<ConvFeatureMap>,
    pub features: Vec<ImageFeature>,
}

/// File locations produced by [`SyntheticVqa::write`].
#[derive(Debug, Clone)]
pub struct SyntheticPaths {
    pub questions: PathBuf,
    pub annotations: PathBuf,
    pub multiple_choice: PathBuf,
    pub vectors: PathBuf,
    pub maps: PathBuf,
}

impl SyntheticVqa {
    pub const OBJECTS: [&'static str; 6] = ["dog", "cat", "car", "pizza", "tree", "boat"];
    pub const MAP_SIDE: usize = 4;
    /// One channel per object and one per count from 1 to 4.
    pub const CHANNELS: usize = 10;

    pub fn generate(n_images: usize, questions_per_image: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = SyntheticVqa {
            questions: Vec::new(),
            annotations: Vec::new(),
            multiple_choice: Vec::new(),
            maps: Vec::new(),
            features: Vec::new(),
        };
        let n_obj = Self::OBJECTS.len();
        for i in 0..n_images as u64 {
            let image_id = 100 + 7 * i;
            let object = rng.random_range(0..n_obj);
            let count = rng.random_range(1..=4usize);
            let map = Self::render(&mut rng, image_id, object, count);
            out.features.push(gap(&map));
            out.maps.push(map);

            for q in 0..questions_per_image as u64 {
                let question_id = image_id * 100 + q;
                let (text, truth, answer_type) = match rng.random_range(0..3) {
                    0 => ("what is in the picture".to_string(), Self::OBJECTS[object].to_string(), AnswerType::Other),
                    1 => {
                        let asked = rng.random_range(0..n_obj);
                        let yes = if asked == object { "yes" } else { "no" };
                        (format!("is there a {} in the picture", Self::OBJECTS[asked]), yes.to_string(), AnswerType::YesNo)
                    }
                    _ => (format!("how many {}s are there", Self::OBJECTS[object]), count.to_string(), AnswerType::Number),
                };
                let agree = rng.random_range(6..=ANSWERS_PER_QUESTION);
                let mut humans: Vec<String> = vec![truth.clone(); agree];
                while humans.len() < ANSWERS_PER_QUESTION {
                    let other = match answer_type {
                        AnswerType::YesNo => if truth == "yes" { "no" } else { "yes" }.to_string(),
                        AnswerType::Number => rng.random_range(0..=6usize).to_string(),
                        _ => Self::OBJECTS.choose(&mut rng).expect("nonempty").to_string(),
                    };
                    humans.push(other);
                }
                humans.shuffle(&mut rng);

                let mut choices: Vec<String> = Self::OBJECTS.iter().map(|s| s.to_string()).collect();
                choices.extend(["yes", "no", "1", "2", "3", "4"].map(String::from));
                choices.shuffle(&mut rng);
                choices.truncate(5);
                if !choices.contains(&truth) {
                    choices[0] = truth.clone();
                }
                let question = Question {
                    question_id,
                    image_id,
                    text: text.clone(),
                };
                out.multiple_choice.push(MultipleChoiceQuestion {
                    question: question.clone(),
                    choices,
                });
                out.questions.push(question);
                out.annotations.push(AnnotationRecord {
                    question_id,
                    image_id,
                    human_answers: humans,
                    answer_type,
                });
            }
        }
        out
    }

    /// The object occupies a random 2×2 block; its channel fires there and
    /// the count channel fires everywhere.
    fn render(rng: &mut ChaCha8Rng, image_id: u64, object: usize, count: usize) -> ConvFeatureMap {
        let side = Self::MAP_SIDE;
        let (ox, oy) = (rng.random_range(0..side - 1), rng.random_range(0..side - 1));
        let mut data = Vec::with_capacity(side * side * Self::CHANNELS);
        for x in 0..side {
            for y in 0..side {
                let inside = (ox..ox + 2).contains(&x) && (oy..oy + 2).contains(&y);
                for k in 0..Self::CHANNELS {
                    let mut v = rng.random_range(0.0..0.2f32);
                    if k == object && inside {
                        v += 8.0;
                    }
                    if k == Self::OBJECTS.len() + count - 1 {
                        v += 2.0;
                    }
                    data.push(v);
                }
            }
        }
        ConvFeatureMap::new(image_id, side, side, Self::CHANNELS, data).expect("shape matches data")
    }

    pub fn questions_json(&self) -> String {
        let qs: Vec<_> = self
            .questions
            .iter()
            .map(|q| json!({"question_id": q.question_id, "image_id": q.image_id, "question": format!("{}?", capitalize(&q.text))}))
            .collect();
        serde_json::to_string_pretty(&json!({ "questions": qs })).expect("json")
    }

    pub fn annotations_json(&self) -> String {
        let anns: Vec<_> = self
            .annotations
            .iter()
            .map(|a| {
                let answers: Vec<_> = a
                    .human_answers
                    .iter()
                    .enumerate()
                    .map(|(i, s)| json!({"answer": s, "answer_id": i + 1}))
                    .collect();
                json!({
                    "question_id": a.question_id,
                    "image_id": a.image_id,
                    "answer_type": a.answer_type,
                    "answers": answers,
                })
            })
            .collect();
        serde_json::to_string_pretty(&json!({ "annotations": anns })).expect("json")
    }

    pub fn multiple_choice_json(&self) -> String {
        let qs: Vec<_> = self
            .multiple_choice
            .iter()
            .map(|m| {
                json!({
                    "question_id": m.question.question_id,
                    "image_id": m.question.image_id,
                    "question": m.question.text,
                    "multiple_choices": m.choices,
                })
            })
            .collect();
        serde_json::to_string_pretty(&json!({ "questions": qs })).expect("json")
    }

    pub fn vector_store(&self) -> Result<VectorStore> {
        VectorStore::from_bytes(encode_vector_store(Self::CHANNELS, &self.features)?)
    }

    pub fn map_store(&self) -> Result<MapStore> {
        let side = Self::MAP_SIDE;
        MapStore::from_bytes(encode_map_store((side, side, Self::CHANNELS), &self.maps)?)
    }

    pub fn pairs(&self) -> Result<Vec<QaPair>> {
        build_pairs(&self.questions, &self.annotations)
    }

    /// A small model trained on the whole corpus, with both stores loaded.
    pub fn toy_engine(&self, seed: u64) -> Result<Engine> {
        let pairs = self.pairs()?;
        let store = self.vector_store()?;
        let config = TrainConfig {
            embed_dim: 16,
            shuffle_seed: seed,
            hyper: Hyperparams {
                epochs: 30,
                batch_size: 16,
                seed,
                ..Hyperparams::default()
            },
            ..TrainConfig::default()
        };
        let (model, _) = train(&pairs, &pairs, &store, &config)?;
        Engine::new(model, store, Some(self.map_store()?))
    }

    /// Writes `questions.json`, `annotations.json`, `mc.json`,
    /// `features.ibf` and `maps.ibm` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<SyntheticPaths> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let paths = SyntheticPaths {
            questions: dir.join("questions.json"),
            annotations: dir.join("annotations.json"),
            multiple_choice: dir.join("mc.json"),
            vectors: dir.join("features.ibf"),
            maps: dir.join("maps.ibm"),
        };
        for (path, text) in [
            (&paths.questions, self.questions_json()),
            (&paths.annotations, self.annotations_json()),
            (&paths.multiple_choice, self.multiple_choice_json()),
        ] {
            fs::write(path, text).map_err(|e| Error::io(path, e))?;
        }
        write_vector_store(&paths.vectors, Self::CHANNELS, &self.features)?;
        let side = Self::MAP_SIDE;
        write_map_store(&paths.maps, (side, side, Self::CHANNELS), &self.maps)?;
        Ok(paths)
    }
}

fn capitalize(s: &str) -> String {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) => c.to_uppercase().chain(chars).collect(),
        None => String::new(),
    }
}
