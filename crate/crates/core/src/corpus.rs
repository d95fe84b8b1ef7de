//! VQA question/annotation ingestion, majority-vote labelling, and
//! image-grouped splitting.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::vocab;

/// Number of human answers collected per question.
pub const ANSWERS_PER_QUESTION: usize = 10;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Question {
    pub question_id: u64,
    pub image_id: u64,
    pub text: String,
}

/// A question from a multiple-choice file, with its candidate answers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MultipleChoiceQuestion {
    pub question: Question,
    pub choices: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AnswerType {
    #[serde(rename = "yes/no")]
    YesNo,
    #[serde(rename = "number")]
    Number,
    #[serde(rename = "other")]
    Other,
    #[serde(rename = "unknown")]
    Unknown,
}

impl AnswerType {
    pub fn parse(s: &str) -> Self {
        match s {
            "yes/no" => AnswerType::YesNo,
            "number" => AnswerType::Number,
            "other" => AnswerType::Other,
            _ => AnswerType::Unknown,
        }
    }
}

/// Ten normalized human answers for one question.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnnotationRecord {
    pub question_id: u64,
    pub image_id: u64,
    pub human_answers: Vec<String>,
    pub answer_type: AnswerType,
}

/// One training example.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaPair {
    pub question_id: u64,
    pub image_id: u64,
    pub tokens: Vec<String>,
    pub answer: String,
    pub answer_type: AnswerType,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Split {
    A,
    B,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub seed: u64,
    pub fraction_a: f64,
    pub assignment: BTreeMap<u64, Split>,
}

impl SplitSpec {
    pub fn split_of(&self, image_id: u64) -> Option<Split> {
        self.assignment.get(&image_id).copied()
    }

    pub fn count(&self, split: Split) -> usize {
        self.assignment.values().filter(|&&s| s == split).count()
    }
}

/// Lowercase, trim, collapse internal whitespace, strip trailing punctuation.
pub fn normalize_answer(raw: &str) -> String {
    let lowered = raw.to_lowercase();
    let collapsed = lowered.split_whitespace().collect::<Vec<_>>().join(" ");
    collapsed
        .trim_end_matches(|c: char| c.is_ascii_punctuation() || c.is_whitespace())
        .to_string()
}

fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn parse_root(root: &Value, key: &str) -> Result<Vec<Value>> {
    match root.get(key) {
        Some(Value::Array(items)) => Ok(items.clone()),
        Some(_) => Err(Error::schema(0, key, "is not an array")),
        None => Err(Error::schema(0, key, "is missing from the top-level object")),
    }
}

fn get_u64(rec: &Value, index: usize, field: &str) -> Result<u64> {
    match rec.get(field) {
        Some(v) => v
            .as_u64()
            .ok_or_else(|| Error::schema(index, field, "is not a non-negative integer")),
        None => Err(Error::schema(index, field, "is missing")),
    }
}

fn get_str<'v>(rec: &'v Value, index: usize, field: &str) -> Result<&'v str> {
    match rec.get(field) {
        Some(v) => v
            .as_str()
            .ok_or_else(|| Error::schema(index, field, "is not a string")),
        None => Err(Error::schema(index, field, "is missing")),
    }
}

fn parse_json(text: &str) -> Result<Value> {
    serde_json::from_str(text).map_err(|e| Error::from_json(&e, text))
}

fn question_from(rec: &Value, index: usize) -> Result<Question> {
    let question_id = get_u64(rec, index, "question_id")?;
    let image_id = get_u64(rec, index, "image_id")?;
    let text = get_str(rec, index, "question")?;
    if text.trim().is_empty() {
        return Err(Error::schema(index, "question", "is empty"));
    }
    Ok(Question {
        question_id,
        image_id,
        text: text.to_string(),
    })
}

fn check_unique_ids(ids: impl Iterator<Item = (usize, u64)>) -> Result<()> {
    let mut seen = BTreeSet::new();
    for (index, id) in ids {
        if !seen.insert(id) {
            return Err(Error::schema(index, "question_id", format!("duplicates id {id}")));
        }
    }
    Ok(())
}

/// Parses the `{"questions": [...]}` document.
pub fn parse_questions_str(text: &str) -> Result<Vec<Question>> {
    let root = parse_json(text)?;
    let records = parse_root(&root, "questions")?;
    let questions = records
        .iter()
        .enumerate()
        .map(|(i, rec)| question_from(rec, i))
        .collect::<Result<Vec<_>>>()?;
    check_unique_ids(questions.iter().enumerate().map(|(i, q)| (i, q.question_id)))?;
    Ok(questions)
}

pub fn parse_questions(path: &Path) -> Result<Vec<Question>> {
    parse_questions_str(&read_to_string(path)?)
}

/// Parses a multiple-choice question file (questions plus `multiple_choices`).
pub fn parse_multiple_choice_str(text: &str) -> Result<Vec<MultipleChoiceQuestion>> {
    let root = parse_json(text)?;
    let records = parse_root(&root, "questions")?;
    let out = records
        .iter()
        .enumerate()
        .map(|(i, rec)| {
            let question = question_from(rec, i)?;
            let choices = match rec.get("multiple_choices") {
                Some(Value::Array(items)) => items
                    .iter()
                    .map(|c| {
                        c.as_str()
                            .map(str::to_string)
                            .ok_or_else(|| Error::schema(i, "multiple_choices", "contains a non-string"))
                    })
                    .collect::<Result<Vec<_>>>()?,
                Some(_) => return Err(Error::schema(i, "multiple_choices", "is not an array")),
                None => return Err(Error::schema(i, "multiple_choices", "is missing")),
            };
            Ok(MultipleChoiceQuestion { question, choices })
        })
        .collect::<Result<Vec<_>>>()?;
    check_unique_ids(out.iter().enumerate().map(|(i, q)| (i, q.question.question_id)))?;
    Ok(out)
}

pub fn parse_multiple_choice(path: &Path) -> Result<Vec<MultipleChoiceQuestion>> {
    parse_multiple_choice_str(&read_to_string(path)?)
}

/// Parses the `{"annotations": [...]}` document, normalizing every answer.
pub fn parse_annotations_str(text: &str) -> Result<Vec<AnnotationRecord>> {
    let root = parse_json(text)?;
    let records = parse_root(&root, "annotations")?;
    records
        .iter()
        .enumerate()
        .map(|(i, rec)| {
            let question_id = get_u64(rec, i, "question_id")?;
            let image_id = get_u64(rec, i, "image_id")?;
            let answer_type = match rec.get("answer_type") {
                Some(Value::String(s)) => AnswerType::parse(s),
                Some(Value::Null) | None => AnswerType::Unknown,
                Some(_) => return Err(Error::schema(i, "answer_type", "is not a string")),
            };
            let answers = match rec.get("answers") {
                Some(Value::Array(items)) => items,
                Some(_) => return Err(Error::schema(i, "answers", "is not an array")),
                None => return Err(Error::schema(i, "answers", "is missing")),
            };
            if answers.len() != ANSWERS_PER_QUESTION {
                return Err(Error::schema(
                    i,
                    "answers",
                    format!("has {} entries, expected {ANSWERS_PER_QUESTION}", answers.len()),
                ));
            }
            let human_answers = answers
                .iter()
                .map(|a| {
                    let norm = normalize_answer(get_str(a, i, "answer")?);
                    if norm.is_empty() {
                        Err(Error::schema(i, "answer", "is empty after normalization"))
                    } else {
                        Ok(norm)
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(AnnotationRecord {
                question_id,
                image_id,
                human_answers,
                answer_type,
            })
        })
        .collect()
}

pub fn parse_annotations(path: &Path) -> Result<Vec<AnnotationRecord>> {
    parse_annotations_str(&read_to_string(path)?)
}

/// How ties among equally frequent answers are resolved.
///
/// With corpus-global frequencies, the globally more common answer wins;
/// remaining ties (or no frequency data) go to the lexicographically
/// smallest answer.
#[derive(Debug, Clone, Copy, Default)]
pub struct TieBreak<'a> {
    pub global_frequency: Option<&'a HashMap<String, u64>>,
}

impl<'a> TieBreak<'a> {
    pub fn lexicographic() -> Self {
        TieBreak {
            global_frequency: None,
        }
    }

    pub fn with_global(freq: &'a HashMap<String, u64>) -> Self {
        TieBreak {
            global_frequency: Some(freq),
        }
    }

    fn global(&self, answer: &str) -> u64 {
        self.global_frequency
            .and_then(|f| f.get(answer).copied())
            .unwrap_or(0)
    }
}

/// Returns the modal answer among exactly ten normalized answers.
pub fn majority_vote<S: AsRef<str>>(answers: &[S], tiebreak: TieBreak<'_>) -> Result<String> {
    if answers.len() != ANSWERS_PER_QUESTION {
        return Err(Error::Arity {
            expected: ANSWERS_PER_QUESTION,
            got: answers.len(),
        });
    }
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for a in answers {
        *counts.entry(a.as_ref()).or_default() += 1;
    }
    // BTreeMap iterates lexicographically, so the first maximum wins remaining ties.
    let best = counts
        .into_iter()
        .fold(None::<(&str, usize, u64)>, |best, (ans, c)| {
            let g = tiebreak.global(ans);
            match best {
                Some((_, bc, bg)) if (bc, bg) >= (c, g) => best,
                _ => Some((ans, c, g)),
            }
        })
        .map(|(a, _, _)| a.to_string());
    Ok(best.expect("ten answers yield a mode"))
}

/// Frequency of every normalized human answer across all annotations.
pub fn global_answer_frequency(annotations: &[AnnotationRecord]) -> HashMap<String, u64> {
    let mut freq = HashMap::new();
    for a in annotations.iter().flat_map(|r| r.human_answers.iter()) {
        *freq.entry(a.clone()).or_default() += 1;
    }
    freq
}

/// Joins annotations to questions and labels each by majority vote.
///
/// Output order follows `annotations`.
pub fn build_pairs(questions: &[Question], annotations: &[AnnotationRecord]) -> Result<Vec<QaPair>> {
    let by_id: HashMap<u64, &Question> = questions.iter().map(|q| (q.question_id, q)).collect();
    let missing: Vec<u64> = annotations
        .iter()
        .map(|a| a.question_id)
        .filter(|id| !by_id.contains_key(id))
        .collect();
    if !missing.is_empty() {
        return Err(Error::Join { missing });
    }
    let freq = global_answer_frequency(annotations);
    let tiebreak = TieBreak::with_global(&freq);
    annotations
        .iter()
        .map(|a| {
            let q = by_id[&a.question_id];
            Ok(QaPair {
                question_id: a.question_id,
                image_id: q.image_id,
                tokens: vocab::tokenize(&q.text),
                answer: majority_vote(&a.human_answers, tiebreak)?,
                answer_type: a.answer_type,
            })
        })
        .collect()
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn image_key(image_id: u64, seed: u64) -> u64 {
    splitmix64(image_id ^ splitmix64(seed))
}

/// Partitions pairs by image so that no image straddles the two subsets.
///
/// Images are ranked by a seeded hash of their id and the first
/// `round(fraction_a * n_images)` go to subset A.
pub fn split_by_image(
    pairs: &[QaPair],
    fraction_a: f64,
    seed: u64,
) -> Result<(Vec<QaPair>, Vec<QaPair>, SplitSpec)> {
    if !(fraction_a > 0.0 && fraction_a < 1.0) {
        return Err(Error::Argument(format!(
            "split fraction must lie in (0, 1), got {fraction_a}"
        )));
    }
    let images: BTreeSet<u64> = pairs.iter().map(|p| p.image_id).collect();
    let mut ranked: Vec<(u64, u64)> = images.iter().map(|&id| (image_key(id, seed), id)).collect();
    ranked.sort_unstable();
    let n_a = (fraction_a * ranked.len() as f64).round() as usize;
    let assignment: BTreeMap<u64, Split> = ranked
        .iter()
        .enumerate()
        .map(|(rank, &(_, id))| (id, if rank < n_a { Split::A } else { Split::B }))
        .collect();
    let (a, b): (Vec<QaPair>, Vec<QaPair>) = pairs
        .iter()
        .cloned()
        .partition(|p| assignment[&p.image_id] == Split::A);
    Ok((
        a,
        b,
        SplitSpec {
            seed,
            fraction_a,
            assignment,
        },
    ))
}

pub fn write_pairs_jsonl(path: &Path, pairs: &[QaPair]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for p in pairs {
        let line = serde_json::to_string(p).expect("pairs serialize");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_pairs_jsonl(path: &Path) -> Result<Vec<QaPair>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut offset = 0usize;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            let pair = serde_json::from_str(&line).map_err(|e| match Error::from_json(&e, &line) {
                Error::Parse { offset: o, message } => Error::Parse {
                    offset: offset + o,
                    message,
                },
                other => other,
            })?;
            out.push(pair);
        }
        offset += line.len() + 1;
    }
    Ok(out)
}
