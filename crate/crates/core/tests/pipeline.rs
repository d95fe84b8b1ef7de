use std::collections::HashMap;

use ibowimg::eval::{evaluate, score_predictions, EvalItem, Metric, Track};
use ibowimg::inference::Engine;
use ibowimg::model::{self, forward, softmax, weight_clip, Hyperparams, Matrix, Model, ModelParams};
use ibowimg::synthetic::{SeparableTask, SyntheticVqa};
use ibowimg::train::{grid_search, train, GridParam, TrainConfig};
use ibowimg::vocab::{AnswerDict, BowVector, Vocabulary, WordDict};
use proptest::prelude::*;

/// Official accuracy written out longhand: average over the ten
/// nine-annotator subsets of min(matches / 3, 1).
fn oracle_accuracy(pred: &str, humans: &[String]) -> f64 {
    let mut total = 0.0;
    for skip in 0..humans.len() {
        let matches = humans
            .iter()
            .enumerate()
            .filter(|&(j, h)| j != skip && h == pred)
            .count() as f64;
        total += (matches / 3.0).min(1.0);
    }
    total / humans.len() as f64
}

/// A model that can only ever answer `answer`.
fn constant_engine(corpus: &SyntheticVqa, answer: &str) -> Engine {
    let vocab = Vocabulary {
        word_dict: WordDict::from_words(vec!["what".into(), "dog".into()], 1).unwrap(),
        answer_dict: AnswerDict::from_answers(vec![answer.to_string()], 1).unwrap(),
    };
    let params = ModelParams::init(2, 4, SyntheticVqa::CHANNELS, 1, 3).unwrap();
    let model = Model::new(params, vocab, Hyperparams::default()).unwrap();
    Engine::new(model, corpus.vector_store().unwrap(), None).unwrap()
}

fn items(corpus: &SyntheticVqa) -> Vec<EvalItem> {
    EvalItem::join(&corpus.questions, &corpus.annotations).unwrap()
}

#[test]
fn majority_answers_score_perfectly() {
    let corpus = SyntheticVqa::generate(12, 3, 1);
    let items = items(&corpus);
    let majority: Vec<String> = items
        .iter()
        .map(|item| {
            let mut counts: HashMap<&str, usize> = HashMap::new();
            for h in &item.human_answers {
                *counts.entry(h).or_default() += 1;
            }
            counts.into_iter().max_by_key(|&(a, c)| (c, std::cmp::Reverse(a))).unwrap().0.to_string()
        })
        .collect();
    let eval = score_predictions(&items, majority, Metric::LeaveOneOut).unwrap();
    assert_eq!(eval.result.overall, 1.0);
    assert!(eval.scores.iter().all(|&s| s == 1.0));
}

#[test]
fn absent_answer_scores_zero() {
    let corpus = SyntheticVqa::generate(12, 3, 1);
    let engine = constant_engine(&corpus, "zebra crossing");
    let eval = evaluate(&engine, &items(&corpus), Track::OpenEnded, Metric::LeaveOneOut).unwrap();
    assert_eq!(eval.result.overall, 0.0);
    assert!(eval.predictions.iter().all(|p| p.answer == "zebra crossing"));
}

#[test]
fn constant_yes_matches_oracle() {
    let corpus = SyntheticVqa::generate(20, 3, 2);
    let items = items(&corpus);
    let engine = constant_engine(&corpus, "yes");
    let eval = evaluate(&engine, &items, Track::OpenEnded, Metric::LeaveOneOut).unwrap();
    let want: Vec<f64> = items.iter().map(|i| oracle_accuracy("yes", &i.human_answers)).collect();
    for (got, want) in eval.scores.iter().zip(&want) {
        assert!((got - want).abs() < 1e-12);
    }
    let mean = want.iter().sum::<f64>() / want.len() as f64;
    assert!((eval.result.overall - mean).abs() < 1e-12);
    assert!(eval.result.overall > 0.0 && eval.result.overall < 1.0);
}

#[test]
fn training_loss_settles_on_separable_task() {
    let task = SeparableTask::generate(600, 100, 0);
    let config = TrainConfig {
        embed_dim: 32,
        hyper: Hyperparams {
            epochs: 12,
            ..Hyperparams::default()
        },
        ..TrainConfig::default()
    };
    let (_, report) = train(&task.train, &task.val, &task.store, &config).unwrap();
    let losses = &report.epoch_losses;
    for w in losses[1..].windows(2) {
        assert!(w[1] <= w[0] + 1e-9, "{losses:?}");
    }
    assert!(losses.last().unwrap() < &losses[0]);
}

#[test]
fn grid_ranks_learning_above_frozen() {
    let task = SeparableTask::generate(300, 80, 5);
    let base = TrainConfig {
        embed_dim: 16,
        hyper: Hyperparams {
            epochs: 6,
            ..Hyperparams::default()
        },
        ..TrainConfig::default()
    };
    let rows = grid_search(GridParam::LrSoftmax, &[0.0, 0.05], &base, &task.train, &task.val, &task.store).unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0].value, 0.05);
    assert!(rows[0].val_accuracy > rows[1].val_accuracy);
}

fn params_strategy() -> impl Strategy<Value = (ModelParams, BowVector, Vec<f32>)> {
    (1usize..6, 1usize..5, 1usize..5, 2usize..5, any::<u64>()).prop_flat_map(|(v, de, dv, a, seed)| {
        let bow = prop::collection::btree_map(0..v, 1u32..4, 0..=v);
        let image = prop::collection::vec(-2.0f32..2.0, dv);
        (bow, image).prop_map(move |(bow, image)| {
            let params = ModelParams::init(v, de, dv, a, seed).unwrap();
            (params, BowVector::from_counts(bow), image)
        })
    })
}

proptest! {
    #[test]
    fn shifting_every_class_equally_keeps_probabilities(
        (params, bow, image) in params_strategy(),
        shift in prop::collection::vec(-1.0f32..1.0, 1..5),
    ) {
        let before = softmax(&forward(&params, &bow, &image).unwrap().0);
        let mut shifted = params.clone();
        let dv = shifted.image_dim();
        for a in 0..shifted.num_classes() {
            for (k, s) in shift.iter().take(dv).enumerate() {
                let v = shifted.m_v.get(a, k);
                shifted.m_v.set(a, k, v + s);
            }
        }
        let after = softmax(&forward(&shifted, &bow, &image).unwrap().0);
        for (x, y) in before.iter().zip(&after) {
            prop_assert!((x - y).abs() < 1e-5, "{before:?} vs {after:?}");
        }
    }

    #[test]
    fn weight_clip_is_idempotent(
        rows in 1usize..5,
        cols in 1usize..6,
        data in prop::collection::vec(-10.0f32..10.0, 30),
        max_norm in 0.1f64..8.0,
    ) {
        let mut m = Matrix::from_vec(rows, cols, data[..rows * cols].to_vec()).unwrap();
        let original = m.clone();
        weight_clip(&mut m, max_norm);
        let once = m.clone();
        weight_clip(&mut m, max_norm);
        prop_assert_eq!(&m, &once);
        for i in 0..rows {
            let norm = m.row(i).iter().map(|&v| v as f64 * v as f64).sum::<f64>().sqrt();
            let orig = original.row(i).iter().map(|&v| v as f64 * v as f64).sum::<f64>().sqrt();
            prop_assert!(norm <= max_norm);
            if orig <= max_norm {
                prop_assert_eq!(m.row(i), original.row(i));
            }
        }
    }

    #[test]
    fn softmax_clip_bounds_joint_rows(
        (mut params, _bow, _image) in params_strategy(),
        scale in 1.0f32..50.0,
        max_norm in 0.05f64..2.0,
    ) {
        for v in params.m_w.as_mut_slice().iter_mut().chain(params.m_v.as_mut_slice()) {
            *v *= scale;
        }
        model::clip_softmax_rows(&mut params, max_norm);
        for a in 0..params.num_classes() {
            let sq: f64 = params.m_w.row(a).iter().chain(params.m_v.row(a)).map(|&v| v as f64 * v as f64).sum();
            prop_assert!(sq.sqrt() <= max_norm);
        }
    }
}
