//! VQA accuracy, per-answer-type breakdown, and evaluation-server result
//! files.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize, Serializer};

use crate::corpus::{normalize_answer, AnnotationRecord, AnswerType, MultipleChoiceQuestion, Question, ANSWERS_PER_QUESTION};
use crate::error::{Error, Result};
use crate::inference::Engine;

/// How a predicted answer is scored against the human answers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    /// `min(matches / 3, 1)` averaged over the ten 9-answer subsets.
    #[default]
    LeaveOneOut,
    /// `min(matches / 3, 1)` over all ten answers.
    Simple,
}

/// Accuracy of one predicted answer against exactly ten human answers.
pub fn vqa_accuracy<S: AsRef<str>>(predicted: &str, human_answers: &[S], metric: Metric) -> Result<f64> {
    if human_answers.len() != ANSWERS_PER_QUESTION {
        return Err(Error::Arity {
            expected: ANSWERS_PER_QUESTION,
            got: human_answers.len(),
        });
    }
    let matches: Vec<bool> = human_answers.iter().map(|h| h.as_ref() == predicted).collect();
    // Sum integer numerators and divide once so the result is independent
    // of answer order.
    Ok(match metric {
        Metric::Simple => matches.iter().filter(|&&m| m).count().min(3) as f64 / 3.0,
        Metric::LeaveOneOut => {
            let numerator: usize = (0..matches.len())
                .map(|i| {
                    let count = matches.iter().enumerate().filter(|&(j, &m)| j != i && m).count();
                    count.min(3)
                })
                .sum();
            numerator as f64 / (3 * ANSWERS_PER_QUESTION) as f64
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Track {
    #[default]
    OpenEnded,
    MultipleChoice,
}

/// One annotated question to evaluate.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalItem {
    pub question_id: u64,
    pub image_id: u64,
    pub question: String,
    pub human_answers: Vec<String>,
    pub answer_type: AnswerType,
    /// Candidate answers for the multiple-choice track.
    pub choices: Vec<String>,
}

impl EvalItem {
    /// Pairs every annotation with its question, in annotation order.
    pub fn join(questions: &[Question], annotations: &[AnnotationRecord]) -> Result<Vec<EvalItem>> {
        let by_id: HashMap<u64, &Question> = questions.iter().map(|q| (q.question_id, q)).collect();
        join_with(annotations, |id| by_id.get(&id).map(|q| (q.text.clone(), Vec::new())))
    }

    pub fn join_multiple_choice(
        questions: &[MultipleChoiceQuestion],
        annotations: &[AnnotationRecord],
    ) -> Result<Vec<EvalItem>> {
        let by_id: HashMap<u64, &MultipleChoiceQuestion> =
            questions.iter().map(|q| (q.question.question_id, q)).collect();
        join_with(annotations, |id| {
            by_id.get(&id).map(|q| (q.question.text.clone(), q.choices.clone()))
        })
    }
}

fn join_with(
    annotations: &[AnnotationRecord],
    lookup: impl Fn(u64) -> Option<(String, Vec<String>)>,
) -> Result<Vec<EvalItem>> {
    let mut missing = Vec::new();
    let mut items = Vec::with_capacity(annotations.len());
    for a in annotations {
        match lookup(a.question_id) {
            Some((question, choices)) => items.push(EvalItem {
                question_id: a.question_id,
                image_id: a.image_id,
                question,
                human_answers: a.human_answers.clone(),
                answer_type: a.answer_type,
                choices,
            }),
            None => missing.push(a.question_id),
        }
    }
    if missing.is_empty() {
        Ok(items)
    } else {
        Err(Error::Join { missing })
    }
}

fn percent<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_f64((v * 10_000.0).round() / 100.0)
}

fn percent_opt<S: Serializer>(v: &Option<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    match v {
        Some(v) => percent(v, s),
        None => s.serialize_none(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct BucketCounts {
    pub overall: usize,
    pub yes_no: usize,
    pub number: usize,
    pub other: usize,
    pub unknown: usize,
}

/// Accuracies in `[0, 1]`; serialized as percentages with two decimals.
/// A bucket with no questions is `None`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalResult {
    #[serde(serialize_with = "percent")]
    pub overall: f64,
    #[serde(serialize_with = "percent_opt")]
    pub yes_no: Option<f64>,
    #[serde(serialize_with = "percent_opt")]
    pub number: Option<f64>,
    #[serde(serialize_with = "percent_opt")]
    pub other: Option<f64>,
    #[serde(skip)]
    pub unknown: Option<f64>,
    pub counts: BucketCounts,
}

impl EvalResult {
    /// Aggregates `(answer type, accuracy)` per question.
    pub fn from_scores(scores: &[(AnswerType, f64)]) -> Self {
        let bucket = |t: AnswerType| {
            let vals: Vec<f64> = scores.iter().filter(|(a, _)| *a == t).map(|(_, v)| *v).collect();
            let mean = (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64);
            (mean, vals.len())
        };
        let (yes_no, n_yes_no) = bucket(AnswerType::YesNo);
        let (number, n_number) = bucket(AnswerType::Number);
        let (other, n_other) = bucket(AnswerType::Other);
        let (unknown, n_unknown) = bucket(AnswerType::Unknown);
        let overall = if scores.is_empty() {
            0.0
        } else {
            scores.iter().map(|(_, v)| v).sum::<f64>() / scores.len() as f64
        };
        EvalResult {
            overall,
            yes_no,
            number,
            other,
            unknown,
            counts: BucketCounts {
                overall: scores.len(),
                yes_no: n_yes_no,
                number: n_number,
                other: n_other,
                unknown: n_unknown,
            },
        }
    }
}

/// One line of a results file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResultEntry {
    pub question_id: u64,
    pub answer: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub result: EvalResult,
    /// Per-question predictions, in item order.
    pub predictions: Vec<ResultEntry>,
    pub scores: Vec<f64>,
}

/// Predicts every item on `track` and scores it with `metric`.
pub fn evaluate(engine: &Engine, items: &[EvalItem], track: Track, metric: Metric) -> Result<Evaluation> {
    let answers = items
        .par_iter()
        .map(|item| -> Result<String> {
            match track {
                Track::OpenEnded => Ok(engine
                    .predict_topk(&item.question, item.image_id, 1)?
                    .top()
                    .map(|a| a.answer.clone())
                    .unwrap_or_default()),
                Track::MultipleChoice => Ok(normalize_answer(
                    &engine
                        .predict_multiple_choice(&item.question, item.image_id, &item.choices)?
                        .chosen,
                )),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    score_predictions(items, answers, metric)
}

/// Scores already-made predictions, one per item.
pub fn score_predictions(items: &[EvalItem], answers: Vec<String>, metric: Metric) -> Result<Evaluation> {
    if answers.len() != items.len() {
        return Err(Error::Arity {
            expected: items.len(),
            got: answers.len(),
        });
    }
    let mut scores = Vec::with_capacity(items.len());
    let mut typed = Vec::with_capacity(items.len());
    for (item, answer) in items.iter().zip(&answers) {
        let s = vqa_accuracy(answer, &item.human_answers, metric)?;
        scores.push(s);
        typed.push((item.answer_type, s));
    }
    Ok(Evaluation {
        result: EvalResult::from_scores(&typed),
        predictions: items
            .iter()
            .zip(answers)
            .map(|(i, answer)| ResultEntry {
                question_id: i.question_id,
                answer,
            })
            .collect(),
        scores,
    })
}

/// Results as a JSON array sorted by question id.
pub fn results_json(predictions: &[ResultEntry]) -> Result<String> {
    let mut seen = BTreeSet::new();
    for p in predictions {
        if !seen.insert(p.question_id) {
            return Err(Error::Integrity(format!("duplicate question_id {} in results", p.question_id)));
        }
    }
    let mut sorted = predictions.to_vec();
    sorted.sort_by_key(|p| p.question_id);
    Ok(serde_json::to_string(&sorted).expect("results serialize"))
}

pub fn export_results(predictions: &[ResultEntry], path: &Path) -> Result<()> {
    let text = results_json(predictions)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_results(path: &Path) -> Result<Vec<ResultEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::from_json(&e, &text))
}
