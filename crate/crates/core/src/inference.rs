//! Prediction and attribution.
//!
//! Because the text path is two linear maps and the model has no bias,
//! every answer response splits exactly into a word part `r_w` and an image
//! part `r_v`; the word part splits further into per-token terms, and the
//! image part spreads over space through the conv map (CAM).
//!
//! All rankings sort by score descending with the lower class index
//! winning ties.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::corpus::normalize_answer;
use crate::error::{Error, Result};
use crate::features::{ConvFeatureMap, ImageFeature, MapStore, VectorStore};
use crate::model::{softmax, Model};
use crate::vocab::{encode_bow, tokenize, BowVector};

/// Per-class `r`, `r_w`, `r_v`, with `r[a] = r_w[a] + r_v[a]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Decomposition {
    pub logits: Vec<f64>,
    pub word: Vec<f64>,
    pub image: Vec<f64>,
}

impl Decomposition {
    pub fn from_parts(word: Vec<f64>, image: Vec<f64>) -> Self {
        let logits = word.iter().zip(&image).map(|(w, v)| w + v).collect();
        Decomposition { logits, word, image }
    }

    pub fn num_classes(&self) -> usize {
        self.logits.len()
    }
}

/// One ranked answer with its attribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerScore {
    #[serde(skip)]
    pub class: usize,
    pub answer: String,
    pub logit: f64,
    pub prob: f64,
    pub word_contrib: f64,
    pub image_contrib: f64,
}

impl AnswerScore {
    /// `answer (r = r_v [image] + r_w [word])`, printed to two decimals.
    ///
    /// The word term is printed as the difference of the rounded total and
    /// the rounded image term, so the printed numbers always add up.
    pub fn attribution_line(&self) -> String {
        let cents = |v: f64| (v * 100.0).round() as i64;
        let total = cents(self.logit);
        let image = cents(self.image_contrib);
        format!(
            "{} ({} = {} [image] + {} [word])",
            self.answer,
            fmt_cents(total),
            fmt_cents(image),
            fmt_cents(total - image)
        )
    }
}

fn fmt_cents(c: i64) -> String {
    let sign = if c < 0 { "-" } else { "" };
    format!("{sign}{}.{:02}", c.abs() / 100, c.abs() % 100)
}

/// Top-k answers of the full model.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub answers: Vec<AnswerScore>,
}

impl Prediction {
    pub fn top(&self) -> Option<&AnswerScore> {
        self.answers.first()
    }
}

/// An answer ranked by a single score (words-only or image-only).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedAnswer {
    #[serde(skip)]
    pub class: usize,
    pub answer: String,
    pub score: f64,
}

/// Class indices sorted by descending score, lower index first on ties.
pub fn rank(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx
}

fn clamp_k(k: usize, classes: usize) -> Result<usize> {
    if k == 0 {
        return Err(Error::Argument("k must be >= 1".into()));
    }
    if k > classes {
        tracing::warn!(k, classes, "k exceeds the number of answer classes; truncating");
    }
    Ok(k.min(classes))
}

fn answer_of(model: &Model, class: usize) -> String {
    model.vocab.answer_dict.answer(class).unwrap_or_default().to_string()
}

/// Bag-of-words for free question text under the model's dictionary.
pub fn question_bow(model: &Model, question: &str) -> BowVector {
    encode_bow(&tokenize(question), &model.vocab.word_dict)
}

pub fn decompose(model: &Model, question: &str, image: &[f32]) -> Result<Decomposition> {
    decompose_bow(model, &question_bow(model, question), image)
}

pub fn decompose_bow(model: &Model, bow: &BowVector, image: &[f32]) -> Result<Decomposition> {
    let word = model.params.word_logits(bow)?;
    let image = model.params.image_logits(image)?;
    Ok(Decomposition::from_parts(word, image))
}

/// Top-k answers for a decomposition.
pub fn topk_from(model: &Model, dec: &Decomposition, k: usize) -> Result<Prediction> {
    let k = clamp_k(k, dec.num_classes())?;
    let probs = softmax(&dec.logits);
    let answers = rank(&dec.logits)
        .into_iter()
        .take(k)
        .map(|a| AnswerScore {
            class: a,
            answer: answer_of(model, a),
            logit: dec.logits[a],
            prob: probs[a],
            word_contrib: dec.word[a],
            image_contrib: dec.image[a],
        })
        .collect();
    Ok(Prediction { answers })
}

pub fn predict_topk(model: &Model, question: &str, image: &ImageFeature, k: usize) -> Result<Prediction> {
    topk_from(model, &decompose(model, question, &image.vector)?, k)
}

fn ranked_by(model: &Model, scores: &[f64], k: usize) -> Result<Vec<RankedAnswer>> {
    let k = clamp_k(k, scores.len())?;
    Ok(rank(scores)
        .into_iter()
        .take(k)
        .map(|a| RankedAnswer {
            class: a,
            answer: answer_of(model, a),
            score: scores[a],
        })
        .collect())
}

/// Answers ranked by the word contribution `r_w` alone.
pub fn words_only_topk(model: &Model, question: &str, k: usize) -> Result<Vec<RankedAnswer>> {
    ranked_by(model, &model.params.word_logits(&question_bow(model, question))?, k)
}

/// Answers ranked by the image contribution `r_v` alone.
pub fn image_only_topk(model: &Model, image: &ImageFeature, k: usize) -> Result<Vec<RankedAnswer>> {
    ranked_by(model, &model.params.image_logits(&image.vector)?, k)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChoiceScore {
    pub choice: String,
    /// Probability under the full softmax; 0 when the choice is not an
    /// answer class.
    pub prob: f64,
    pub scored: bool,
    #[serde(skip)]
    pub class: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultipleChoice {
    pub chosen: String,
    pub chosen_index: usize,
    pub choices: Vec<ChoiceScore>,
    /// Set when no choice maps to an answer class; `chosen` is then the
    /// first choice.
    pub unscored: bool,
}

/// Picks the most probable of `choices` under the full model.
pub fn multiple_choice_from(model: &Model, dec: &Decomposition, choices: &[String]) -> Result<MultipleChoice> {
    if choices.is_empty() {
        return Err(Error::Argument("multiple choice needs at least one choice".into()));
    }
    let probs = softmax(&dec.logits);
    let scores: Vec<ChoiceScore> = choices
        .iter()
        .map(|c| {
            let class = model.vocab.answer_dict.class(&normalize_answer(c));
            ChoiceScore {
                choice: c.clone(),
                prob: class.map_or(0.0, |a| probs[a]),
                scored: class.is_some(),
                class,
            }
        })
        .collect();
    // Compare logits rather than probabilities so the winner is exactly the
    // open-ended argmax when every class is offered.
    let best = scores
        .iter()
        .enumerate()
        .filter_map(|(i, s)| s.class.map(|a| (i, a)))
        .fold(None::<(usize, usize)>, |best, (i, a)| match best {
            Some((_, ba)) if dec.logits[ba] > dec.logits[a] || (dec.logits[ba] == dec.logits[a] && ba <= a) => best,
            _ => Some((i, a)),
        });
    let (chosen_index, unscored) = match best {
        Some((i, _)) => (i, false),
        None => (0, true),
    };
    Ok(MultipleChoice {
        chosen: choices[chosen_index].clone(),
        chosen_index,
        choices: scores,
        unscored,
    })
}

pub fn predict_multiple_choice(
    model: &Model,
    question: &str,
    image: &ImageFeature,
    choices: &[String],
) -> Result<MultipleChoice> {
    multiple_choice_from(model, &decompose(model, question, &image.vector)?, choices)
}

/// Contribution of one distinct question token to `r_w` of a class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenImportance {
    pub token: String,
    pub count: u32,
    /// Contribution of a single occurrence, `(M_w·E)[class, word]`.
    pub per_occurrence: f64,
    /// `count × per_occurrence`.
    pub importance: f64,
    /// 1-based position in the descending ordering.
    pub rank: usize,
    pub oov: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WordImportance {
    pub class: usize,
    pub answer: String,
    pub tokens: Vec<TokenImportance>,
}

impl WordImportance {
    pub fn total(&self) -> f64 {
        self.tokens.iter().map(|t| t.importance).sum()
    }
}

/// Splits `r_w[class]` into per-token contributions.
///
/// Repeated tokens are listed once with their multiplicity; out-of-vocabulary
/// tokens are listed with zero importance.
pub fn word_importance(model: &Model, question: &str, class: usize) -> Result<WordImportance> {
    let classes = model.params.num_classes();
    if class >= classes {
        return Err(Error::Label { label: class, classes });
    }
    let mut entries: Vec<TokenImportance> = Vec::new();
    for tok in tokenize(question) {
        if let Some(e) = entries.iter_mut().find(|e| e.token == tok) {
            e.count += 1;
            continue;
        }
        let word = model.vocab.word_dict.index(&tok);
        entries.push(TokenImportance {
            per_occurrence: word.map_or(0.0, |w| model.params.word_class_weight(class, w)),
            oov: word.is_none(),
            token: tok,
            count: 1,
            importance: 0.0,
            rank: 0,
        });
    }
    for e in &mut entries {
        e.importance = e.count as f64 * e.per_occurrence;
    }
    entries.sort_by(|a, b| b.importance.partial_cmp(&a.importance).unwrap_or(Ordering::Equal));
    for (i, e) in entries.iter_mut().enumerate() {
        e.rank = i + 1;
    }
    Ok(WordImportance {
        class,
        answer: answer_of(model, class),
        tokens: entries,
    })
}

/// Class activation map over an `H × W` grid.
#[derive(Debug, Clone, PartialEq)]
pub struct CamGrid {
    pub class: usize,
    pub height: usize,
    pub width: usize,
    /// Raw scores, row-major over `[x][y]`.
    pub values: Vec<f64>,
}

impl CamGrid {
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[x * self.width + y]
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    /// Min-max normalized copy in `[0, 1]`; all zeros for a flat grid.
    pub fn normalized(&self) -> Vec<f64> {
        let min = self.values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if max <= min {
            return vec![0.0; self.values.len()];
        }
        self.values.iter().map(|v| (v - min) / (max - min)).collect()
    }

    /// Plain PGM (P2) of the normalized grid scaled to 0–255.
    pub fn to_pgm(&self) -> String {
        let mut out = format!("P2\n{} {}\n255\n", self.width, self.height);
        let norm = self.normalized();
        for row in norm.chunks(self.width.max(1)) {
            let line: Vec<String> = row.iter().map(|v| ((v * 255.0).round() as u32).to_string()).collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
        out
    }
}

/// `grid[x, y] = Σ_k M_v[class, k] · map[x, y, k]`.
pub fn cam(model: &Model, map: &ConvFeatureMap, class: usize) -> Result<CamGrid> {
    let classes = model.params.num_classes();
    if class >= classes {
        return Err(Error::Label { label: class, classes });
    }
    if map.channels != model.params.image_dim() {
        return Err(Error::Dimension(format!(
            "conv map has {} channels, model image dimension is {}",
            map.channels,
            model.params.image_dim()
        )));
    }
    let weights = model.params.m_v.row(class);
    let values = map
        .data
        .chunks_exact(map.channels)
        .map(|fiber| fiber.iter().zip(weights).map(|(&f, &w)| f as f64 * w as f64).sum())
        .collect();
    Ok(CamGrid {
        class,
        height: map.height,
        width: map.width,
        values,
    })
}

/// Bilinear upsampling with corner-aligned sampling.
pub fn upsample_bilinear(grid: &CamGrid, out_h: usize, out_w: usize) -> Result<CamGrid> {
    if out_h < grid.height || out_w < grid.width {
        return Err(Error::Argument(format!(
            "cannot upsample {}x{} to smaller {out_h}x{out_w}",
            grid.height, grid.width
        )));
    }
    let coord = |i: usize, out: usize, src: usize| -> (usize, usize, f64) {
        if out <= 1 || src <= 1 {
            return (0, 0, 0.0);
        }
        let pos = i as f64 * (src - 1) as f64 / (out - 1) as f64;
        let lo = (pos.floor() as usize).min(src - 1);
        let hi = (lo + 1).min(src - 1);
        (lo, hi, pos - lo as f64)
    };
    let mut values = Vec::with_capacity(out_h * out_w);
    for i in 0..out_h {
        let (x0, x1, fx) = coord(i, out_h, grid.height);
        for j in 0..out_w {
            let (y0, y1, fy) = coord(j, out_w, grid.width);
            let top = grid.get(x0, y0) * (1.0 - fy) + grid.get(x0, y1) * fy;
            let bottom = grid.get(x1, y0) * (1.0 - fy) + grid.get(x1, y1) * fy;
            values.push(top * (1.0 - fx) + bottom * fx);
        }
    }
    Ok(CamGrid {
        class: grid.class,
        height: out_h,
        width: out_w,
        values,
    })
}

/// Raw CAM values and dimensions as sent over the wire.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CamPayload {
    pub class: usize,
    pub answer: String,
    pub h: usize,
    pub w: usize,
    pub values: Vec<f64>,
}

/// Everything the demo shows for one question.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    pub question: String,
    pub image_id: u64,
    pub answers: Vec<AnswerScore>,
    /// Word importance for the top answer.
    pub word_importance: Vec<TokenImportance>,
    pub words_only: Vec<RankedAnswer>,
    pub image_only: Vec<RankedAnswer>,
    /// CAM for the top answer, present when a map store is available.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cam: Option<CamPayload>,
    pub flags: Vec<String>,
}

/// Model plus feature stores: answers questions about stored images.
#[derive(Debug)]
pub struct Engine {
    model: Model,
    vectors: VectorStore,
    maps: Option<MapStore>,
}

impl Engine {
    pub fn new(model: Model, vectors: VectorStore, maps: Option<MapStore>) -> Result<Self> {
        let d_v = model.params.image_dim();
        if vectors.dim() != d_v {
            return Err(Error::Dimension(format!(
                "vector store dim {} does not match model image dim {d_v}",
                vectors.dim()
            )));
        }
        if let Some(m) = &maps {
            if m.shape().2 != d_v {
                return Err(Error::Dimension(format!(
                    "map store has {} channels, model image dim is {d_v}",
                    m.shape().2
                )));
            }
        }
        Ok(Engine { model, vectors, maps })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn vectors(&self) -> &VectorStore {
        &self.vectors
    }

    pub fn maps(&self) -> Option<&MapStore> {
        self.maps.as_ref()
    }

    pub fn image(&self, image_id: u64) -> Result<ImageFeature> {
        self.vectors.get_vector(image_id)
    }

    pub fn decompose(&self, question: &str, image_id: u64) -> Result<Decomposition> {
        decompose(&self.model, question, &self.image(image_id)?.vector)
    }

    pub fn predict_topk(&self, question: &str, image_id: u64, k: usize) -> Result<Prediction> {
        predict_topk(&self.model, question, &self.image(image_id)?, k)
    }

    pub fn predict_multiple_choice(&self, question: &str, image_id: u64, choices: &[String]) -> Result<MultipleChoice> {
        predict_multiple_choice(&self.model, question, &self.image(image_id)?, choices)
    }

    pub fn words_only_topk(&self, question: &str, k: usize) -> Result<Vec<RankedAnswer>> {
        words_only_topk(&self.model, question, k)
    }

    pub fn image_only_topk(&self, image_id: u64, k: usize) -> Result<Vec<RankedAnswer>> {
        image_only_topk(&self.model, &self.image(image_id)?, k)
    }

    pub fn word_importance(&self, question: &str, class: usize) -> Result<WordImportance> {
        word_importance(&self.model, question, class)
    }

    /// CAM for `class`; `None` when no map store is loaded.
    pub fn cam(&self, image_id: u64, class: usize) -> Result<Option<CamGrid>> {
        match &self.maps {
            Some(store) => cam(&self.model, &store.get_map(image_id)?, class).map(Some),
            None => Ok(None),
        }
    }

    /// Top-k answers with words-only and image-only top-3, word importance
    /// and CAM for the top answer.
    pub fn explain(&self, question: &str, image_id: u64, k: usize) -> Result<Explanation> {
        let dec = self.decompose(question, image_id)?;
        let prediction = topk_from(&self.model, &dec, k)?;
        let top = prediction.top().map(|a| a.class).unwrap_or(0);
        let words_only = ranked_by(&self.model, &dec.word, 3)?;
        let image_only = ranked_by(&self.model, &dec.image, 3)?;
        let importance = self.word_importance(question, top)?;
        let cam = self.cam(image_id, top)?.map(|g| CamPayload {
            class: g.class,
            answer: answer_of(&self.model, g.class),
            h: g.height,
            w: g.width,
            values: g.values,
        });
        let mut flags = Vec::new();
        if tokenize(question).is_empty() {
            flags.push("empty_question".to_string());
        }
        Ok(Explanation {
            question: question.to_string(),
            image_id,
            answers: prediction.answers,
            word_importance: importance.tokens,
            words_only,
            image_only,
            cam,
            flags,
        })
    }
}
