//! The bag-of-words + image softmax classifier.
//!
//! A question's bag-of-words counts are embedded linearly (`x_w = E·bow`),
//! the image contributes its pooled CNN vector `x_v`, and the answer
//! response is
//!
//! ```text
//! r = M_w·x_w + M_v·x_v
//! ```
//!
//! with no bias term, so `r` splits exactly into a word part and an image
//! part. Parameters are stored as `f32`; every reduction runs in `f64`.
//!
//! The embedding is kept word-major (`V × d_e`, one row per word), i.e. the
//! transpose of `E`. That makes the forward pass a sparse sum of rows and
//! makes per-row max-norm clipping act on individual word vectors.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::{BowVector, Vocabulary};

/// Bound of the uniform initialization range.
pub const INIT_RANGE: f32 = 0.08;

/// Dense row-major `f32` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "{} values cannot fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f32) {
        self.data[i * self.cols + j] = v;
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.set(j, i, self.get(i, j));
            }
        }
        t
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

fn dot(a: &[f32], x: &[f64]) -> f64 {
    a.iter().zip(x).map(|(&a, &x)| a as f64 * x).sum()
}

fn dot_f32(a: &[f32], x: &[f32]) -> f64 {
    a.iter().zip(x).map(|(&a, &x)| a as f64 * x as f64).sum()
}

/// Training hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub lr_embedding: f64,
    pub lr_softmax: f64,
    pub clip_embedding: f64,
    pub clip_softmax: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            lr_embedding: 0.1,
            lr_softmax: 0.01,
            clip_embedding: 20.0,
            clip_softmax: 20.0,
            epochs: 50,
            batch_size: 128,
            seed: 0,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::Argument(format!("{name} must be positive, got {v}")))
            }
        };
        if !(self.lr_embedding >= 0.0 && self.lr_softmax >= 0.0) {
            return Err(Error::Argument("learning rates must be non-negative".into()));
        }
        positive("clip_embedding", self.clip_embedding)?;
        positive("clip_softmax", self.clip_softmax)?;
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Argument("epochs and batch_size must be >= 1".into()));
        }
        if self.lr_embedding < self.lr_softmax {
            tracing::warn!(
                lr_embedding = self.lr_embedding,
                lr_softmax = self.lr_softmax,
                "embedding learning rate is below the softmax learning rate"
            );
        }
        Ok(())
    }
}

/// Embedding and the two softmax blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    /// `V × d_e`, row `w` is the embedding of word `w`.
    pub embedding: Matrix,
    /// `A × d_e`.
    pub m_w: Matrix,
    /// `A × d_v`.
    pub m_v: Matrix,
}

/// Pre-softmax answer responses.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits(pub Vec<f64>);

impl Logits {
    pub fn argmax(&self) -> Option<usize> {
        argmax(&self.0)
    }
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(values: &[f64]) -> Option<usize> {
    values
        .iter()
        .enumerate()
        .fold(None, |best: Option<(usize, f64)>, (i, &v)| match best {
            Some((_, bv)) if bv >= v => best,
            _ => Some((i, v)),
        })
        .map(|(i, _)| i)
}

impl ModelParams {
    /// Uniform `[-0.08, 0.08]` initialization, deterministic per seed.
    pub fn init(vocab_size: usize, embed_dim: usize, image_dim: usize, classes: usize, seed: u64) -> Result<Self> {
        if vocab_size == 0 || embed_dim == 0 || image_dim == 0 || classes == 0 {
            return Err(Error::Dimension(format!(
                "all dimensions must be >= 1 (V={vocab_size}, d_e={embed_dim}, d_v={image_dim}, A={classes})"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fill = |rows, cols| {
            let data = (0..rows * cols)
                .map(|_| rng.random_range(-INIT_RANGE..=INIT_RANGE))
                .collect();
            Matrix { rows, cols, data }
        };
        let embedding = fill(vocab_size, embed_dim);
        let m_w = fill(classes, embed_dim);
        let m_v = fill(classes, image_dim);
        Ok(ModelParams { embedding, m_w, m_v })
    }

    pub fn from_parts(embedding: Matrix, m_w: Matrix, m_v: Matrix) -> Result<Self> {
        if embedding.cols() != m_w.cols() || m_w.rows() != m_v.rows() {
            return Err(Error::Dimension(format!(
                "inconsistent blocks: E^T {}x{}, M_w {}x{}, M_v {}x{}",
                embedding.rows(),
                embedding.cols(),
                m_w.rows(),
                m_w.cols(),
                m_v.rows(),
                m_v.cols()
            )));
        }
        Ok(ModelParams { embedding, m_w, m_v })
    }

    pub fn vocab_size(&self) -> usize {
        self.embedding.rows()
    }

    pub fn embed_dim(&self) -> usize {
        self.embedding.cols()
    }

    pub fn image_dim(&self) -> usize {
        self.m_v.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.m_w.rows()
    }

    pub fn is_finite(&self) -> bool {
        self.embedding.is_finite() && self.m_w.is_finite() && self.m_v.is_finite()
    }

    fn check_bow(&self, bow: &BowVector) -> Result<()> {
        match bow.max_index() {
            Some(i) if i >= self.vocab_size() => Err(Error::Dimension(format!(
                "word index {i} outside vocabulary of {}",
                self.vocab_size()
            ))),
            _ => Ok(()),
        }
    }

    fn check_image(&self, image: &[f32]) -> Result<()> {
        if image.len() != self.image_dim() {
            return Err(Error::Dimension(format!(
                "image feature has {} values, model expects {}",
                image.len(),
                self.image_dim()
            )));
        }
        Ok(())
    }

    /// `x_w = E·bow`.
    pub fn word_features(&self, bow: &BowVector) -> Result<Vec<f64>> {
        self.check_bow(bow)?;
        let mut x = vec![0f64; self.embed_dim()];
        for (w, c) in bow.iter() {
            for (xi, &e) in x.iter_mut().zip(self.embedding.row(w)) {
                *xi += c as f64 * e as f64;
            }
        }
        Ok(x)
    }

    /// `r_w = M_w·x_w` for every class.
    pub fn word_logits(&self, bow: &BowVector) -> Result<Vec<f64>> {
        let x_w = self.word_features(bow)?;
        Ok((0..self.num_classes()).map(|a| dot(self.m_w.row(a), &x_w)).collect())
    }

    /// `r_v = M_v·x_v` for every class.
    pub fn image_logits(&self, image: &[f32]) -> Result<Vec<f64>> {
        self.check_image(image)?;
        Ok((0..self.num_classes()).map(|a| dot_f32(self.m_v.row(a), image)).collect())
    }

    /// The composite word-to-answer map `(M_w·E)[class, word]`.
    pub fn word_class_weight(&self, class: usize, word: usize) -> f64 {
        dot_f32(self.m_w.row(class), self.embedding.row(word))
    }
}

/// `r = M_w·(E·bow) + M_v·x_v`.
pub fn forward(params: &ModelParams, bow: &BowVector, image: &[f32]) -> Result<Logits> {
    let x_w = params.word_features(bow)?;
    params.check_image(image)?;
    Ok(Logits(
        (0..params.num_classes())
            .map(|a| dot(params.m_w.row(a), &x_w) + dot_f32(params.m_v.row(a), image))
            .collect(),
    ))
}

/// Max-shifted softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&r| (r - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|&r| (r - max).exp()).sum::<f64>().ln()
}

/// One labelled input to the loss.
#[derive(Debug, Clone, Copy)]
pub struct Example<'a> {
    pub bow: &'a BowVector,
    pub image: &'a [f32],
    pub label: usize,
}

/// Gradients of the mean cross-entropy. Embedding gradients are kept
/// only for the words that occur in the batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    pub embedding: BTreeMap<usize, Vec<f64>>,
    /// `A × d_e`, row-major.
    pub m_w: Vec<f64>,
    /// `A × d_v`, row-major.
    pub m_v: Vec<f64>,
    embed_dim: usize,
    image_dim: usize,
}

impl Grads {
    fn zeros(params: &ModelParams) -> Self {
        Grads {
            embedding: BTreeMap::new(),
            m_w: vec![0.0; params.num_classes() * params.embed_dim()],
            m_v: vec![0.0; params.num_classes() * params.image_dim()],
            embed_dim: params.embed_dim(),
            image_dim: params.image_dim(),
        }
    }

    /// Gradient of embedding entry `E[j, word]`.
    pub fn embedding_at(&self, word: usize, j: usize) -> f64 {
        self.embedding.get(&word).map_or(0.0, |row| row[j])
    }

    pub fn m_w_at(&self, class: usize, j: usize) -> f64 {
        self.m_w[class * self.embed_dim + j]
    }

    pub fn m_v_at(&self, class: usize, k: usize) -> f64 {
        self.m_v[class * self.image_dim + k]
    }

    pub fn max_abs(&self) -> f64 {
        self.embedding
            .values()
            .flatten()
            .chain(&self.m_w)
            .chain(&self.m_v)
            .fold(0.0, |m, g| m.max(g.abs()))
    }
}

/// Mean cross-entropy over `batch` and its exact gradients.
pub fn loss_and_grads(params: &ModelParams, batch: &[Example<'_>]) -> Result<(f64, Grads)> {
    let classes = params.num_classes();
    let d_e = params.embed_dim();
    let d_v = params.image_dim();
    let mut grads = Grads::zeros(params);
    if batch.is_empty() {
        return Ok((0.0, grads));
    }
    let scale = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    for ex in batch {
        if ex.label >= classes {
            return Err(Error::Label {
                label: ex.label,
                classes,
            });
        }
        let x_w = params.word_features(ex.bow)?;
        params.check_image(ex.image)?;
        let logits: Vec<f64> = (0..classes)
            .map(|a| dot(params.m_w.row(a), &x_w) + dot_f32(params.m_v.row(a), ex.image))
            .collect();
        loss += log_sum_exp(&logits) - logits[ex.label];

        let mut delta = softmax(&logits);
        delta[ex.label] -= 1.0;
        let mut g_xw = vec![0f64; d_e];
        for (a, &da) in delta.iter().enumerate() {
            let da = da * scale;
            let gw = &mut grads.m_w[a * d_e..(a + 1) * d_e];
            for (g, &x) in gw.iter_mut().zip(&x_w) {
                *g += da * x;
            }
            for (gx, &m) in g_xw.iter_mut().zip(params.m_w.row(a)) {
                *gx += da * m as f64;
            }
            let gv = &mut grads.m_v[a * d_v..(a + 1) * d_v];
            for (g, &x) in gv.iter_mut().zip(ex.image) {
                *g += da * x as f64;
            }
        }
        for (w, c) in ex.bow.iter() {
            let row = grads.embedding.entry(w).or_insert_with(|| vec![0.0; d_e]);
            for (g, &gx) in row.iter_mut().zip(&g_xw) {
                *g += c as f64 * gx;
            }
        }
    }
    Ok((loss * scale, grads))
}

/// Rescales any row whose L2 norm exceeds `max_norm` down to `max_norm`.
pub fn weight_clip(matrix: &mut Matrix, max_norm: f64) {
    for i in 0..matrix.rows() {
        clip_rows(&mut [matrix.row_mut(i)], max_norm);
    }
}

/// Clips the concatenation of `parts` as a single row.
fn clip_rows(parts: &mut [&mut [f32]], max_norm: f64) {
    let norm = |parts: &[&mut [f32]]| {
        parts
            .iter()
            .flat_map(|p| p.iter())
            .map(|&v| v as f64 * v as f64)
            .sum::<f64>()
            .sqrt()
    };
    let original: Vec<Vec<f32>> = parts.iter().map(|p| p.to_vec()).collect();
    let n = norm(parts);
    // Non-finite rows are left for the caller's divergence check.
    if n <= max_norm || !n.is_finite() {
        return;
    }
    // f32 rounding can leave the rescaled norm a hair above the bound.
    let mut scale = max_norm / n;
    loop {
        for (p, o) in parts.iter_mut().zip(&original) {
            for (v, &ov) in p.iter_mut().zip(o) {
                *v = (ov as f64 * scale) as f32;
            }
        }
        if norm(parts) <= max_norm {
            break;
        }
        scale *= 1.0 - 1e-7;
    }
}

/// Clips each class row of the full softmax matrix `[M_w, M_v]`.
pub fn clip_softmax_rows(params: &mut ModelParams, max_norm: f64) {
    for a in 0..params.num_classes() {
        let ModelParams { m_w, m_v, .. } = params;
        clip_rows(&mut [m_w.row_mut(a), m_v.row_mut(a)], max_norm);
    }
}

/// One plain SGD step with per-layer learning rates, followed by max-norm
/// clipping of the embedding rows and the softmax rows.
pub fn sgd_step(params: &mut ModelParams, grads: &Grads, hyper: &Hyperparams) {
    if hyper.lr_embedding != 0.0 {
        for (&w, g) in &grads.embedding {
            for (p, &gv) in params.embedding.row_mut(w).iter_mut().zip(g) {
                *p = (*p as f64 - hyper.lr_embedding * gv) as f32;
            }
        }
    }
    if hyper.lr_softmax != 0.0 {
        for (p, &g) in params.m_w.as_mut_slice().iter_mut().zip(&grads.m_w) {
            *p = (*p as f64 - hyper.lr_softmax * g) as f32;
        }
        for (p, &g) in params.m_v.as_mut_slice().iter_mut().zip(&grads.m_v) {
            *p = (*p as f64 - hyper.lr_softmax * g) as f32;
        }
    }
    weight_clip(&mut params.embedding, hyper.clip_embedding);
    clip_softmax_rows(params, hyper.clip_softmax);
}

/// Trained parameters together with the dictionaries and settings they
/// were trained with.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub params: ModelParams,
    pub vocab: Vocabulary,
    pub hyper: Hyperparams,
}

impl Model {
    pub fn new(params: ModelParams, vocab: Vocabulary, hyper: Hyperparams) -> Result<Self> {
        if params.vocab_size() != vocab.word_dict.len() || params.num_classes() != vocab.answer_dict.len() {
            return Err(Error::Dimension(format!(
                "parameters are {}x{} (V x A) but dictionaries hold {} words and {} answers",
                params.vocab_size(),
                params.num_classes(),
                vocab.word_dict.len(),
                vocab.answer_dict.len()
            )));
        }
        Ok(Model { params, vocab, hyper })
    }
}
