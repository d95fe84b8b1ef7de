//! Turn raw question and annotation files into labelled training pairs and
//! an image-disjoint split.
//!
//! cargo run --example corpus_prep

use ibowimg::corpus::{
    build_pairs, majority_vote, parse_annotations_str, parse_questions_str, split_by_image, write_pairs_jsonl,
    Split, TieBreak,
};
use ibowimg::synthetic::SyntheticVqa;

fn main() -> ibowimg::Result<()> {
    let corpus = SyntheticVqa::generate(30, 2, 3);
    let questions = parse_questions_str(&corpus.questions_json())?;
    let annotations = parse_annotations_str(&corpus.annotations_json())?;

    let first = &annotations[0];
    println!("human answers for question {}: {:?}", first.question_id, first.human_answers);
    println!("majority: {}", majority_vote(&first.human_answers, TieBreak::lexicographic())?);

    let pairs = build_pairs(&questions, &annotations)?;
    let (a, b, spec) = split_by_image(&pairs, 0.7, 42)?;
    println!(
        "{} pairs -> {} train / {} val; {} images in A, {} in B",
        pairs.len(),
        a.len(),
        b.len(),
        spec.count(Split::A),
        spec.count(Split::B)
    );
    for p in pairs.iter().take(3) {
        println!("  {:?} -> {} ({:?})", p.tokens, p.answer, p.answer_type);
    }

    let dir = tempfile::tempdir().expect("temp dir");
    let out = dir.path().join("pairs.jsonl");
    write_pairs_jsonl(&out, &pairs)?;
    println!("wrote {}", out.display());
    Ok(())
}
