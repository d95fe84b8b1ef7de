//! Train while watching validation accuracy, then sweep one hyperparameter.
//!
//! cargo run --release --example train_grid

use ibowimg::model::Hyperparams;
use ibowimg::synthetic::SeparableTask;
use ibowimg::train::{grid_search, train_with_vocabulary, GridParam, TrainConfig};
use ibowimg::vocab::Vocabulary;

fn main() -> ibowimg::Result<()> {
    let task = SeparableTask::generate(800, 160, 0);
    let config = TrainConfig {
        evals_per_epoch: 2,
        patience: 5,
        hyper: Hyperparams {
            epochs: 40,
            ..Hyperparams::default()
        },
        ..TrainConfig::default()
    };
    let vocab = Vocabulary::build(&task.train, 1, 1)?;
    let (_, report) = train_with_vocabulary(&task.train, &task.val, &task.store, vocab, &config, |e| {
        println!("epoch {} batch {} loss {:.4} val_acc {:.3}", e.epoch, e.batch, e.mean_loss, e.val_accuracy)
    })?;
    println!("best epoch {} ({:.3}) in {:.2}s", report.best_epoch, report.best_val_accuracy, report.wall_clock_secs);

    let rows = grid_search(
        GridParam::LrSoftmax,
        &[0.0, 0.003, 0.01, 0.03],
        &config,
        &task.train,
        &task.val,
        &task.store,
    )?;
    println!("lr_softmax  val_acc  best_epoch");
    for row in rows {
        println!("{:<11} {:<8.3} {}", row.value, row.val_accuracy, row.best_epoch);
    }
    Ok(())
}
