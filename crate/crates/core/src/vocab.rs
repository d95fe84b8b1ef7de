//! Question tokenization, frequency-thresholded dictionaries, and
//! bag-of-words encoding.
//!
//! Word indices are assigned by descending corpus frequency, ties broken
//! lexicographically, so dictionaries built from the same pairs are always
//! identical.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::corpus::QaPair;
use crate::error::{Error, Result};

/// Splits question text into lowercase word tokens.
///
/// Characters outside `[a-z0-9']` (after lowercasing) act as separators.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Tokenizer;

impl Tokenizer {
    pub fn tokenize(&self, text: &str) -> Vec<String> {
        let cleaned: String = text
            .chars()
            .flat_map(char::to_lowercase)
            .map(|c| {
                if c.is_ascii_lowercase() || c.is_ascii_digit() || c == '\'' {
                    c
                } else {
                    ' '
                }
            })
            .collect();
        cleaned.split_whitespace().map(str::to_owned).collect()
    }
}

pub fn tokenize(text: &str) -> Vec<String> {
    Tokenizer.tokenize(text)
}

/// Orders `(item, count)` pairs by descending count then lexicographically.
fn ranked(counts: HashMap<&str, usize>, min_count: usize) -> Vec<String> {
    let mut kept: Vec<(&str, usize)> = counts.into_iter().filter(|&(_, c)| c >= min_count).collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    kept.into_iter().map(|(s, _)| s.to_owned()).collect()
}

fn index_of(items: &[String]) -> HashMap<String, usize> {
    items.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect()
}

/// Question-word dictionary.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "WordDictRepr", into = "WordDictRepr")]
pub struct WordDict {
    words: Vec<String>,
    min_count: usize,
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct WordDictRepr {
    words: Vec<String>,
    min_count: usize,
}

impl TryFrom<WordDictRepr> for WordDict {
    type Error = Error;

    fn try_from(r: WordDictRepr) -> Result<Self> {
        WordDict::from_words(r.words, r.min_count)
    }
}

impl From<WordDict> for WordDictRepr {
    fn from(d: WordDict) -> Self {
        WordDictRepr {
            words: d.words,
            min_count: d.min_count,
        }
    }
}

impl WordDict {
    /// Builds a dictionary from an explicit index-ordered word list.
    pub fn from_words(words: Vec<String>, min_count: usize) -> Result<Self> {
        let index = index_of(&words);
        if index.len() != words.len() {
            return Err(Error::Integrity("duplicate word in dictionary".into()));
        }
        Ok(WordDict {
            words,
            min_count,
            index,
        })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn min_count(&self) -> usize {
        self.min_count
    }

    pub fn index(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn word(&self, index: usize) -> Option<&str> {
        self.words.get(index).map(String::as_str)
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }
}

/// Answer-class dictionary. Class 0 is the most frequent training answer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "AnswerDictRepr", into = "AnswerDictRepr")]
pub struct AnswerDict {
    answers: Vec<String>,
    min_count: usize,
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct AnswerDictRepr {
    answers: Vec<String>,
    min_count: usize,
}

impl TryFrom<AnswerDictRepr> for AnswerDict {
    type Error = Error;

    fn try_from(r: AnswerDictRepr) -> Result<Self> {
        AnswerDict::from_answers(r.answers, r.min_count)
    }
}

impl From<AnswerDict> for AnswerDictRepr {
    fn from(d: AnswerDict) -> Self {
        AnswerDictRepr {
            answers: d.answers,
            min_count: d.min_count,
        }
    }
}

impl AnswerDict {
    pub fn from_answers(answers: Vec<String>, min_count: usize) -> Result<Self> {
        let index = index_of(&answers);
        if index.len() != answers.len() {
            return Err(Error::Integrity("duplicate answer in dictionary".into()));
        }
        Ok(AnswerDict {
            answers,
            min_count,
            index,
        })
    }

    pub fn len(&self) -> usize {
        self.answers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.answers.is_empty()
    }

    pub fn min_count(&self) -> usize {
        self.min_count
    }

    pub fn class(&self, answer: &str) -> Option<usize> {
        self.index.get(answer).copied()
    }

    pub fn answer(&self, class: usize) -> Option<&str> {
        self.answers.get(class).map(String::as_str)
    }

    pub fn answers(&self) -> &[String] {
        &self.answers
    }
}

/// Both dictionaries a model is trained against.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub word_dict: WordDict,
    pub answer_dict: AnswerDict,
}

impl Vocabulary {
    pub fn build(pairs: &[QaPair], word_min_count: usize, answer_min_count: usize) -> Result<Self> {
        Ok(Vocabulary {
            word_dict: build_word_dict(pairs, word_min_count)?,
            answer_dict: build_answer_dict(pairs, answer_min_count)?,
        })
    }
}

/// Keeps every question word occurring at least `min_count` times.
pub fn build_word_dict(pairs: &[QaPair], min_count: usize) -> Result<WordDict> {
    if min_count == 0 {
        return Err(Error::Argument("word min_count must be >= 1".into()));
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for tok in pairs.iter().flat_map(|p| p.tokens.iter()) {
        *counts.entry(tok.as_str()).or_default() += 1;
    }
    WordDict::from_words(ranked(counts, min_count), min_count)
}

/// Keeps every answer that is the label of at least `min_count` pairs.
pub fn build_answer_dict(pairs: &[QaPair], min_count: usize) -> Result<AnswerDict> {
    if min_count == 0 {
        return Err(Error::Argument("answer min_count must be >= 1".into()));
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for p in pairs {
        *counts.entry(p.answer.as_str()).or_default() += 1;
    }
    AnswerDict::from_answers(ranked(counts, min_count), min_count)
}

/// Sparse word-count vector over a [`WordDict`].
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BowVector {
    counts: BTreeMap<usize, u32>,
}

impl BowVector {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_counts(counts: impl IntoIterator<Item = (usize, u32)>) -> Self {
        let mut bow = BowVector::new();
        for (i, c) in counts {
            bow.increment(i, c);
        }
        bow
    }

    pub fn increment(&mut self, index: usize, count: u32) {
        if count > 0 {
            *self.counts.entry(index).or_default() += count;
        }
    }

    pub fn get(&self, index: usize) -> u32 {
        self.counts.get(&index).copied().unwrap_or(0)
    }

    /// `(word index, count)` in ascending index order.
    pub fn iter(&self) -> impl Iterator<Item = (usize, u32)> + '_ {
        self.counts.iter().map(|(&i, &c)| (i, c))
    }

    /// Number of distinct words present.
    pub fn nnz(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn total(&self) -> u64 {
        self.counts.values().map(|&c| c as u64).sum()
    }

    pub fn max_index(&self) -> Option<usize> {
        self.counts.keys().next_back().copied()
    }
}

impl std::ops::Add for &BowVector {
    type Output = BowVector;

    fn add(self, rhs: &BowVector) -> BowVector {
        let mut out = self.clone();
        for (i, c) in rhs.iter() {
            out.increment(i, c);
        }
        out
    }
}

/// Counts in-dictionary tokens; out-of-vocabulary tokens are dropped.
pub fn encode_bow<S: AsRef<str>>(tokens: &[S], dict: &WordDict) -> BowVector {
    let mut bow = BowVector::new();
    for t in tokens {
        if let Some(i) = dict.index(t.as_ref()) {
            bow.increment(i, 1);
        }
    }
    bow
}
