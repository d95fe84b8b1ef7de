//! Compare image-only, words-only and combined models on a task where the
//! question words carry most of the answer.
//!
//! cargo run --release --example ablation_trend

use ibowimg::synthetic::WordBiasedTask;
use ibowimg::train::{top1_accuracy, train, Inputs, TrainConfig};

fn main() -> ibowimg::Result<()> {
    println!("seed  image_only  words_only  both");
    for seed in 0..3 {
        let task = WordBiasedTask::generate(1000, 300, 0.8, seed);
        let mut row = Vec::new();
        for inputs in [Inputs::ImageOnly, Inputs::WordsOnly, Inputs::Both] {
            let config = TrainConfig {
                inputs,
                shuffle_seed: seed,
                ..TrainConfig::default()
            };
            let (model, _) = train(&task.train, &task.val, &task.store, &config)?;
            row.push(top1_accuracy(&model, &task.val, &task.store, inputs)?);
        }
        println!("{seed:<5} {:<11.3} {:<11.3} {:.3}", row[0], row[1], row[2]);
    }
    Ok(())
}
