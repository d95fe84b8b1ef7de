//! Minibatch SGD training loop, validation tracking, and one-parameter-at-a-time
//! grid search.

use std::collections::HashMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::QaPair;
use crate::error::{Error, Result};
use crate::features::VectorStore;
use crate::model::{self, forward, loss_and_grads, sgd_step, Example, Hyperparams, Model, ModelParams};
use crate::vocab::{encode_bow, BowVector, Vocabulary};

/// Which inputs the classifier sees. `WordsOnly` zeroes the image feature,
/// `ImageOnly` empties the question; both keep the same architecture.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Inputs {
    #[default]
    Both,
    WordsOnly,
    ImageOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub hyper: Hyperparams,
    pub embed_dim: usize,
    /// Validation evaluations per epoch (>= 1).
    pub evals_per_epoch: usize,
    /// Epochs without validation improvement before stopping; 0 trains for
    /// exactly `hyper.epochs`.
    pub patience: usize,
    pub shuffle_seed: u64,
    pub word_min_count: usize,
    pub answer_min_count: usize,
    pub inputs: Inputs,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            hyper: Hyperparams::default(),
            embed_dim: 256,
            evals_per_epoch: 1,
            patience: 0,
            shuffle_seed: 0,
            word_min_count: 1,
            answer_min_count: 1,
            inputs: Inputs::Both,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    /// 1-based epoch.
    pub epoch: usize,
    /// Batches completed within the epoch.
    pub batch: usize,
    /// Mean training loss over the epoch so far.
    pub mean_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
    pub evaluations: Vec<Evaluation>,
    pub wall_clock_secs: f64,
    /// 1-based epoch of the returned checkpoint.
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    pub train_examples: usize,
    /// Training pairs dropped because their answer is not an answer class.
    pub skipped_pairs: usize,
}

impl TrainReport {
    /// Everything except timing, for determinism checks.
    pub fn same_run(&self, other: &TrainReport) -> bool {
        TrainReport {
            wall_clock_secs: 0.0,
            ..self.clone()
        } == TrainReport {
            wall_clock_secs: 0.0,
            ..other.clone()
        }
    }
}

/// Bag-of-words and image vector ready for the model.
struct Encoded {
    bow: BowVector,
    image: Vec<f32>,
    label: Option<usize>,
    answer: String,
}

fn encode_pairs(pairs: &[QaPair], vocab: &Vocabulary, store: &VectorStore, inputs: Inputs) -> Result<Vec<Encoded>> {
    let mut cache: HashMap<u64, Vec<f32>> = HashMap::new();
    pairs
        .iter()
        .map(|p| {
            let image = match inputs {
                Inputs::WordsOnly => {
                    if !store.contains(p.image_id) {
                        return Err(Error::ImageNotFound(p.image_id));
                    }
                    vec![0.0; store.dim()]
                }
                _ => match cache.get(&p.image_id) {
                    Some(v) => v.clone(),
                    None => {
                        let v = store.get_vector(p.image_id)?.vector;
                        cache.insert(p.image_id, v.clone());
                        v
                    }
                },
            };
            let bow = match inputs {
                Inputs::ImageOnly => BowVector::new(),
                _ => encode_bow(&p.tokens, &vocab.word_dict),
            };
            Ok(Encoded {
                bow,
                image,
                label: vocab.answer_dict.class(&p.answer),
                answer: p.answer.clone(),
            })
        })
        .collect()
}

fn accuracy_of(params: &ModelParams, vocab: &Vocabulary, data: &[Encoded]) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for e in data {
        let logits = forward(params, &e.bow, &e.image)?;
        let predicted = logits.argmax().and_then(|a| vocab.answer_dict.answer(a));
        if predicted == Some(e.answer.as_str()) {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Top-1 exact-match accuracy of `model` on `pairs`, seeing only `inputs`.
pub fn top1_accuracy(model: &Model, pairs: &[QaPair], store: &VectorStore, inputs: Inputs) -> Result<f64> {
    let data = encode_pairs(pairs, &model.vocab, store, inputs)?;
    accuracy_of(&model.params, &model.vocab, &data)
}

/// Batch indices after which validation runs, spread evenly over an epoch.
fn eval_points(batches: usize, evals: usize) -> Vec<usize> {
    let mut points: Vec<usize> = (1..=evals).map(|i| (i * batches).div_ceil(evals)).collect();
    points.dedup();
    points
}

/// Builds dictionaries from `train_pairs` and trains.
pub fn train(
    train_pairs: &[QaPair],
    val_pairs: &[QaPair],
    store: &VectorStore,
    config: &TrainConfig,
) -> Result<(Model, TrainReport)> {
    let vocab = Vocabulary::build(train_pairs, config.word_min_count, config.answer_min_count)?;
    train_with_vocabulary(train_pairs, val_pairs, store, vocab, config, |_| {})
}

/// Trains against fixed dictionaries, calling `on_eval` after every
/// validation pass. Returns the checkpoint with the best validation accuracy
/// (the later one on ties).
pub fn train_with_vocabulary(
    train_pairs: &[QaPair],
    val_pairs: &[QaPair],
    store: &VectorStore,
    vocab: Vocabulary,
    config: &TrainConfig,
    mut on_eval: impl FnMut(&Evaluation),
) -> Result<(Model, TrainReport)> {
    let started = Instant::now();
    let hyper = &config.hyper;
    hyper.validate()?;
    if config.evals_per_epoch == 0 {
        return Err(Error::Argument("evals_per_epoch must be >= 1".into()));
    }
    let all_train = encode_pairs(train_pairs, &vocab, store, config.inputs)?;
    let skipped_pairs = all_train.iter().filter(|e| e.label.is_none()).count();
    let train_data: Vec<&Encoded> = all_train.iter().filter(|e| e.label.is_some()).collect();
    if train_data.is_empty() {
        return Err(Error::Argument("no training pair has an answer in the answer dictionary".into()));
    }
    let val_data = encode_pairs(val_pairs, &vocab, store, config.inputs)?;

    let mut params = ModelParams::init(
        vocab.word_dict.len().max(1),
        config.embed_dim,
        store.dim(),
        vocab.answer_dict.len(),
        hyper.seed,
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.shuffle_seed);
    let mut order: Vec<usize> = (0..train_data.len()).collect();
    let batches = train_data.len().div_ceil(hyper.batch_size);
    let points = eval_points(batches, config.evals_per_epoch);

    let mut best: Option<(f64, usize, ModelParams)> = None;
    let mut epoch_losses = Vec::with_capacity(hyper.epochs);
    let mut evaluations = Vec::new();
    let mut stale_epochs = 0usize;

    for epoch in 1..=hyper.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        let mut improved = false;
        let mut next_point = 0usize;
        for (b, chunk) in order.chunks(hyper.batch_size).enumerate() {
            let batch: Vec<Example<'_>> = chunk
                .iter()
                .map(|&i| {
                    let e = train_data[i];
                    Example {
                        bow: &e.bow,
                        image: &e.image,
                        label: e.label.expect("filtered"),
                    }
                })
                .collect();
            let (loss, grads) = loss_and_grads(&params, &batch)?;
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch });
            }
            sgd_step(&mut params, &grads, hyper);
            if !params.is_finite() {
                return Err(Error::Divergence { epoch });
            }
            loss_sum += loss * batch.len() as f64;
            seen += batch.len();

            if points.get(next_point) == Some(&(b + 1)) {
                next_point += 1;
                let val_accuracy = accuracy_of(&params, &vocab, &val_data)?;
                let ev = Evaluation {
                    epoch,
                    batch: b + 1,
                    mean_loss: loss_sum / seen as f64,
                    val_accuracy,
                };
                tracing::debug!(epoch, batch = b + 1, mean_loss = ev.mean_loss, val_accuracy, "evaluation");
                on_eval(&ev);
                evaluations.push(ev);
                let better = match &best {
                    None => true,
                    Some((acc, _, _)) => val_accuracy > *acc,
                };
                if better {
                    improved = true;
                }
                if best.as_ref().is_none_or(|(acc, _, _)| val_accuracy >= *acc) {
                    best = Some((val_accuracy, epoch, params.clone()));
                }
            }
        }
        epoch_losses.push(loss_sum / seen as f64);
        stale_epochs = if improved { 0 } else { stale_epochs + 1 };
        if config.patience > 0 && stale_epochs >= config.patience {
            break;
        }
    }

    let (best_val_accuracy, best_epoch, best_params) = best.expect("at least one evaluation per epoch");
    let report = TrainReport {
        epoch_losses,
        evaluations,
        wall_clock_secs: started.elapsed().as_secs_f64(),
        best_epoch,
        best_val_accuracy,
        train_examples: train_data.len(),
        skipped_pairs,
    };
    let model = Model::new(best_params, vocab, hyper.clone())?;
    Ok((model, report))
}

/// Parameters the grid search can vary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridParam {
    Epochs,
    LrEmbedding,
    LrSoftmax,
    ClipEmbedding,
    ClipSoftmax,
    WordMinCount,
    AnswerMinCount,
}

impl std::str::FromStr for GridParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "epochs" => GridParam::Epochs,
            "lr_embedding" => GridParam::LrEmbedding,
            "lr_softmax" => GridParam::LrSoftmax,
            "clip_embedding" => GridParam::ClipEmbedding,
            "clip_softmax" => GridParam::ClipSoftmax,
            "word_min_count" => GridParam::WordMinCount,
            "answer_min_count" => GridParam::AnswerMinCount,
            other => return Err(Error::Argument(format!("unknown grid parameter `{other}`"))),
        })
    }
}

impl GridParam {
    /// `base` with this parameter set to `value`.
    pub fn apply(self, base: &TrainConfig, value: f64) -> Result<TrainConfig> {
        let count = || {
            if value >= 1.0 && value.fract() == 0.0 {
                Ok(value as usize)
            } else {
                Err(Error::Argument(format!("{self:?} needs a positive integer, got {value}")))
            }
        };
        let mut c = base.clone();
        match self {
            GridParam::Epochs => c.hyper.epochs = count()?,
            GridParam::LrEmbedding => c.hyper.lr_embedding = value,
            GridParam::LrSoftmax => c.hyper.lr_softmax = value,
            GridParam::ClipEmbedding => c.hyper.clip_embedding = value,
            GridParam::ClipSoftmax => c.hyper.clip_softmax = value,
            GridParam::WordMinCount => c.word_min_count = count()?,
            GridParam::AnswerMinCount => c.answer_min_count = count()?,
        }
        Ok(c)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub value: f64,
    pub val_accuracy: f64,
    pub best_epoch: usize,
}

/// One full training run per candidate value; rows sorted by validation
/// accuracy, best first (candidate order on ties). Runs are independent and
/// execute in parallel.
pub fn grid_search(
    param: GridParam,
    values: &[f64],
    base: &TrainConfig,
    train_pairs: &[QaPair],
    val_pairs: &[QaPair],
    store: &VectorStore,
) -> Result<Vec<GridRow>> {
    if values.is_empty() {
        return Err(Error::Argument("grid search needs at least one candidate value".into()));
    }
    let configs = values
        .iter()
        .map(|&v| param.apply(base, v))
        .collect::<Result<Vec<_>>>()?;
    let mut rows = values
        .par_iter()
        .zip(configs.par_iter())
        .map(|(&value, config)| {
            let (_, report) = train(train_pairs, val_pairs, store, config)?;
            Ok(GridRow {
                value,
                val_accuracy: report.best_val_accuracy,
                best_epoch: report.best_epoch,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    rows.sort_by(|a, b| b.val_accuracy.total_cmp(&a.val_accuracy));
    Ok(rows)
}

/// Mean training loss of a model over labelled pairs (pairs outside the
/// answer dictionary are ignored).
pub fn mean_loss(model: &Model, pairs: &[QaPair], store: &VectorStore, inputs: Inputs) -> Result<f64> {
    let data = encode_pairs(pairs, &model.vocab, store, inputs)?;
    let batch: Vec<Example<'_>> = data
        .iter()
        .filter_map(|e| {
            e.label.map(|label| Example {
                bow: &e.bow,
                image: &e.image,
                label,
            })
        })
        .collect();
    Ok(model::loss_and_grads(&model.params, &batch)?.0)
}
