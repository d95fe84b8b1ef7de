//! Break one prediction down: per-word importance, words-only and
//! image-only rankings, and a class activation map written as a PGM.
//!
//! cargo run --example explain

use ibowimg::inference::upsample_bilinear;
use ibowimg::synthetic::SyntheticVqa;

fn main() -> ibowimg::Result<()> {
    let corpus = SyntheticVqa::generate(40, 3, 11);
    let engine = corpus.toy_engine(11)?;
    let image_id = corpus.features[0].image_id;
    let question = "what is the main object in the image";

    let ex = engine.explain(question, image_id, 3)?;
    for a in &ex.answers {
        println!("{}", a.attribution_line());
    }
    let top = &ex.answers[0];
    println!("word importance for `{}`:", top.answer);
    for t in &ex.word_importance {
        let oov = if t.oov { " (unknown word)" } else { "" };
        println!("  #{} {} x{}: {:+.3}{oov}", t.rank, t.token, t.count, t.importance);
    }
    let words_total: f64 = ex.word_importance.iter().map(|t| t.importance).sum();
    println!("sum of word importances {words_total:.6} = word contribution {:.6}", top.word_contrib);
    println!("words only: {:?}", ex.words_only.iter().map(|r| &r.answer).collect::<Vec<_>>());
    println!("image only: {:?}", ex.image_only.iter().map(|r| &r.answer).collect::<Vec<_>>());

    let cam = engine.cam(image_id, top.class)?.expect("map store loaded");
    println!("CAM mean {:.6} = image contribution {:.6}", cam.mean(), top.image_contrib);
    let big = upsample_bilinear(&cam, 32, 32)?;
    let dir = tempfile::tempdir().expect("temp dir");
    let path = dir.path().join("cam.pgm");
    std::fs::write(&path, big.to_pgm()).expect("write pgm");
    println!("wrote {}x{} heat map to {}", big.height, big.width, path.display());
    Ok(())
}
