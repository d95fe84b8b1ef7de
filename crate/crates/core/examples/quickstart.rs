//! Train a small model on a generated corpus, save it, reload it and ask a
//! question with the answer split into word and image contributions.
//!
//! cargo run --example quickstart

use ibowimg::checkpoint;
use ibowimg::corpus::split_by_image;
use ibowimg::inference::Engine;
use ibowimg::model::Hyperparams;
use ibowimg::synthetic::SyntheticVqa;
use ibowimg::train::{train, TrainConfig};

fn main() -> ibowimg::Result<()> {
    let corpus = SyntheticVqa::generate(60, 3, 7);
    let pairs = corpus.pairs()?;
    let (train_pairs, val_pairs, _) = split_by_image(&pairs, 0.8, 1)?;
    let store = corpus.vector_store()?;

    let config = TrainConfig {
        embed_dim: 32,
        hyper: Hyperparams {
            epochs: 20,
            batch_size: 16,
            ..Hyperparams::default()
        },
        ..TrainConfig::default()
    };
    let (model, report) = train(&train_pairs, &val_pairs, &store, &config)?;
    println!(
        "trained on {} pairs, best val accuracy {:.3} at epoch {}",
        report.train_examples, report.best_val_accuracy, report.best_epoch
    );

    let dir = tempfile::tempdir().expect("temp dir");
    let path = dir.path().join("model.json");
    checkpoint::save(&model, &path)?;
    let engine = Engine::new(checkpoint::load(&path)?, store, None)?;

    let image_id = val_pairs[0].image_id;
    let question = "what animal is in the picture";
    println!("image {image_id}: {question}");
    for answer in engine.predict_topk(question, image_id, 3)?.answers {
        println!("  {}  p={:.3}", answer.attribution_line(), answer.prob);
    }
    Ok(())
}
