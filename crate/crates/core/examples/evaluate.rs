//! Score a model on both tracks with the consensus metric and export a
//! results file.
//!
//! cargo run --example evaluate

use ibowimg::eval::{evaluate, export_results, read_results, vqa_accuracy, EvalItem, Metric, Track};
use ibowimg::synthetic::SyntheticVqa;

fn main() -> ibowimg::Result<()> {
    let humans = ["red", "red", "red", "blue", "red", "red", "green", "red", "red", "red"];
    println!("`red` against {humans:?}: {:.3}", vqa_accuracy("red", &humans, Metric::LeaveOneOut)?);
    println!("`blue`: {:.3}", vqa_accuracy("blue", &humans, Metric::LeaveOneOut)?);

    let corpus = SyntheticVqa::generate(40, 3, 5);
    let engine = corpus.toy_engine(5)?;

    let open = EvalItem::join(&corpus.questions, &corpus.annotations)?;
    let oe = evaluate(&engine, &open, Track::OpenEnded, Metric::LeaveOneOut)?;
    println!("open-ended: {}", serde_json::to_string(&oe.result).expect("json"));

    let mc_items = EvalItem::join_multiple_choice(&corpus.multiple_choice, &corpus.annotations)?;
    let mc = evaluate(&engine, &mc_items, Track::MultipleChoice, Metric::LeaveOneOut)?;
    println!("multiple choice: {}", serde_json::to_string(&mc.result).expect("json"));

    let dir = tempfile::tempdir().expect("temp dir");
    let path = dir.path().join("results.json");
    export_results(&oe.predictions, &path)?;
    println!("exported {} results", read_results(&path)?.len());
    Ok(())
}
