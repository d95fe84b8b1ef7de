use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use ibowimg::cli::run_with;
use ibowimg::synthetic::{SyntheticPaths, SyntheticVqa};

struct Output {
    code: i32,
    out: String,
    err: String,
}

fn run<S: AsRef<str>>(args: &[S]) -> Output {
    let argv: Vec<String> = std::iter::once("ibowimg".to_string())
        .chain(args.iter().map(|a| a.as_ref().to_string()))
        .collect();
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let code = run_with(argv, &mut out, &mut err);
    Output {
        code,
        out: String::from_utf8(out).unwrap(),
        err: String::from_utf8(err).unwrap(),
    }
}

fn p(path: &Path) -> String {
    path.display().to_string()
}

/// Raw corpus, prepared pairs and a small trained checkpoint.
struct Workspace {
    _dir: tempfile::TempDir,
    root: PathBuf,
    raw: SyntheticPaths,
    model: PathBuf,
    image_id: String,
}

impl Workspace {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let corpus = SyntheticVqa::generate(40, 3, 4);
        let raw = corpus.write(&root.join("raw")).unwrap();
        let ws = Workspace {
            model: root.join("model.json"),
            image_id: corpus.features[0].image_id.to_string(),
            _dir: dir,
            root,
            raw,
        };
        let prep = run(&[
            "prep".into(),
            "--questions".into(),
            p(&ws.raw.questions),
            "--annotations".into(),
            p(&ws.raw.annotations),
            "--out".into(),
            p(&ws.path("pairs.jsonl")),
            "--split".into(),
            "0.7".into(),
            "--seed".into(),
            "42".into(),
        ]);
        assert_eq!(prep.code, 0, "{}", prep.err);
        let train = run(&ws.train_args(&p(&ws.model)));
        assert_eq!(train.code, 0, "{}", train.err);
        ws
    }

    fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn train_args(&self, out: &str) -> Vec<String> {
        [
            "train",
            "--train",
            &p(&self.path("pairs.a.jsonl")),
            "--val",
            &p(&self.path("pairs.b.jsonl")),
            "--features",
            &p(&self.raw.vectors),
            "--out",
            out,
            "--embed-dim",
            "16",
            "--epochs",
            "15",
            "--batch-size",
            "16",
        ]
        .map(String::from)
        .to_vec()
    }

    /// `cmd --checkpoint .. --features .. --image-id .. --question q`.
    fn query(&self, cmd: &str, question: &str) -> Vec<String> {
        [
            cmd,
            "--checkpoint",
            &p(&self.model),
            "--features",
            &p(&self.raw.vectors),
            "--image-id",
            &self.image_id,
            "--question",
            question,
        ]
        .map(String::from)
        .to_vec()
    }
}

fn with(mut base: Vec<String>, extra: &[&str]) -> Vec<String> {
    base.extend(extra.iter().map(|s| s.to_string()));
    base
}

#[test]
fn prep_writes_pairs_and_split() {
    let ws = Workspace::new();
    for name in ["pairs.jsonl", "pairs.a.jsonl", "pairs.b.jsonl", "pairs.split.json"] {
        assert!(ws.path(name).is_file(), "{name} missing");
    }
    let all = ibowimg::corpus::read_pairs_jsonl(&ws.path("pairs.jsonl")).unwrap();
    let a = ibowimg::corpus::read_pairs_jsonl(&ws.path("pairs.a.jsonl")).unwrap();
    let b = ibowimg::corpus::read_pairs_jsonl(&ws.path("pairs.b.jsonl")).unwrap();
    assert_eq!(all.len(), 120);
    assert_eq!(a.len() + b.len(), all.len());
    let spec: serde_json::Value = serde_json::from_str(&fs::read_to_string(ws.path("pairs.split.json")).unwrap()).unwrap();
    assert_eq!(spec["seed"], 42);
}

#[test]
fn every_run_prints_resolved_config() {
    let ws = Workspace::new();
    let out = run(&ws.query("predict", "what is in the picture"));
    assert_eq!(out.code, 0, "{}", out.err);
    let line = out.err.lines().find(|l| l.starts_with("resolved config: ")).unwrap();
    let v: serde_json::Value = serde_json::from_str(line.trim_start_matches("resolved config: ")).unwrap();
    assert_eq!(v["command"], "predict");
    assert_eq!(v["predict"]["k"], 3);
}

#[test]
fn train_streams_evaluations_and_writes_report() {
    let ws = Workspace::new();
    let out = run(&with(ws.train_args(&p(&ws.path("m2.json"))), &["--evals-per-epoch", "2"]));
    assert_eq!(out.code, 0, "{}", out.err);
    let evals = out.err.lines().filter(|l| l.starts_with("epoch ")).count();
    assert_eq!(evals, 30);
    assert!(out.err.contains("val_acc"));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(ws.path("m2.report.json")).unwrap()).unwrap();
    assert_eq!(report["epoch_losses"].as_array().unwrap().len(), 15);
    assert!(ws.path("m2.ibw").is_file());
}

#[test]
fn training_is_byte_identical_across_runs() {
    let ws = Workspace::new();
    fs::create_dir(ws.path("again")).unwrap();
    assert_eq!(run(&ws.train_args(&p(&ws.path("again/model.json")))).code, 0);
    for name in ["model.json", "model.ibw"] {
        assert_eq!(fs::read(ws.path(name)).unwrap(), fs::read(ws.path("again").join(name)).unwrap());
    }
    let first = run(&ws.query("explain", "how many dogs are there"));
    let second = run(&ws.query("explain", "how many dogs are there"));
    assert_eq!(first.out, second.out);
}

#[test]
fn predict_prints_attribution_lines() {
    let ws = Workspace::new();
    let out = run(&ws.query("predict", "what is in the picture"));
    assert_eq!(out.code, 0, "{}", out.err);
    let lines: Vec<&str> = out.out.lines().collect();
    assert_eq!(lines.len(), 3);
    for line in lines {
        // answer (r = v [image] + w [word])  p=...
        let inner = &line[line.find('(').unwrap() + 1..line.find(')').unwrap()];
        let nums: Vec<f64> = inner
            .split(['=', '+', '['])
            .filter_map(|t| t.trim().parse().ok())
            .collect();
        assert_eq!(nums.len(), 3, "{line}");
        assert!((nums[0] - (nums[1] + nums[2])).abs() < 1e-9, "{line}");
        assert!(line.contains("[image]") && line.contains("[word]"));
    }
    let json = run(&with(ws.query("predict", "what is in the picture"), &["--json", "--k", "2"]));
    let v: serde_json::Value = serde_json::from_str(&json.out).unwrap();
    assert_eq!(v.as_array().unwrap().len(), 2);
}

#[test]
fn mc_picks_a_choice() {
    let ws = Workspace::new();
    let out = run(&with(ws.query("mc", "is there a dog in the picture"), &["--choices", "yes,no,purple"]));
    assert_eq!(out.code, 0, "{}", out.err);
    assert!(out.out.starts_with("chosen: "));
    assert!(out.out.contains("purple") && out.out.contains("not an answer class"));
    let missing = run(&ws.query("mc", "is there a dog"));
    assert_eq!(missing.code, 1);
}

#[test]
fn explain_report_and_cam() {
    let ws = Workspace::new();
    let cam = ws.path("cam.pgm");
    let out = run(&with(
        ws.query("explain", "what is in the picture"),
        &["--maps", &p(&ws.raw.maps), "--cam", &p(&cam), "--cam-size", "8"],
    ));
    assert_eq!(out.code, 0, "{}", out.err);
    for section in ["answers:", "words only:", "image only:", "word importance for"] {
        assert!(out.out.contains(section), "{section}");
    }
    let pgm = fs::read_to_string(&cam).unwrap();
    let mut lines = pgm.lines();
    assert_eq!(lines.next(), Some("P2"));
    assert_eq!(lines.next(), Some("8 8"));
    assert_eq!(lines.next(), Some("255"));
    let values: Vec<u32> = lines.flat_map(|l| l.split_whitespace().map(|v| v.parse::<u32>().unwrap())).collect();
    assert_eq!(values.len(), 64);
    assert!(values.iter().all(|&v| v <= 255));

    let no_maps = run(&with(ws.query("explain", "what"), &["--cam", &p(&cam)]));
    assert_eq!(no_maps.code, 2);
    assert!(no_maps.err.contains("--maps"));
}

#[test]
fn eval_scores_and_exports() {
    let ws = Workspace::new();
    let results = ws.path("results.json");
    let out = run(&[
        "eval".to_string(),
        "--checkpoint".into(),
        p(&ws.model),
        "--features".into(),
        p(&ws.raw.vectors),
        "--questions".into(),
        p(&ws.raw.questions),
        "--annotations".into(),
        p(&ws.raw.annotations),
        "--out".into(),
        p(&results),
    ]);
    assert_eq!(out.code, 0, "{}", out.err);
    let table: serde_json::Value = serde_json::from_str(&out.out).unwrap();
    assert!(table["overall"].as_f64().unwrap() > 50.0, "{table}");
    assert_eq!(table["counts"]["overall"], 120);
    let exported = ibowimg::eval::read_results(&results).unwrap();
    assert_eq!(exported.len(), 120);
    assert!(exported.windows(2).all(|w| w[0].question_id < w[1].question_id));

    let mc = run(&[
        "eval".to_string(),
        "--checkpoint".into(),
        p(&ws.model),
        "--features".into(),
        p(&ws.raw.vectors),
        "--questions".into(),
        p(&ws.raw.multiple_choice),
        "--annotations".into(),
        p(&ws.raw.annotations),
        "--track".into(),
        "multiple-choice".into(),
    ]);
    assert_eq!(mc.code, 0, "{}", mc.err);
    let mc_table: serde_json::Value = serde_json::from_str(&mc.out).unwrap();
    assert!(mc_table["overall"].as_f64().unwrap() >= table["overall"].as_f64().unwrap() - 1e-9);
}

#[test]
fn eval_with_missing_store_names_path() {
    let ws = Workspace::new();
    let gone = ws.path("absent.ibf");
    let out = run(&[
        "eval".to_string(),
        "--checkpoint".into(),
        p(&ws.model),
        "--features".into(),
        p(&gone),
        "--questions".into(),
        p(&ws.raw.questions),
        "--annotations".into(),
        p(&ws.raw.annotations),
    ]);
    assert_eq!(out.code, 2);
    assert!(out.err.contains("absent.ibf"), "{}", out.err);
}

#[test]
fn grid_and_vocab() {
    let ws = Workspace::new();
    let mut args = ws.train_args(&p(&ws.path("grid.json")));
    args[0] = "grid".into();
    let out = run(&with(args, &["--param", "lr_softmax", "--values", "0,0.01"]));
    assert_eq!(out.code, 0, "{}", out.err);
    let rows: Vec<serde_json::Value> = serde_json::from_str(&fs::read_to_string(ws.path("grid.json")).unwrap()).unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0]["value"], 0.01);
    assert!(out.out.lines().next().unwrap().contains("val_acc"));

    let vocab = ws.path("vocab.json");
    let out = run(&[
        "vocab".to_string(),
        "--pairs".into(),
        p(&ws.path("pairs.a.jsonl")),
        "--answer-min-count".into(),
        "2".into(),
        "--out".into(),
        p(&vocab),
    ]);
    assert_eq!(out.code, 0, "{}", out.err);
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&vocab).unwrap()).unwrap();
    assert_eq!(v["answer_dict"]["min_count"], 2);

    // A prebuilt vocabulary fixes the answer classes of the trained model.
    let out = run(&with(ws.train_args(&p(&ws.path("fixed.json"))), &["--vocab", &p(&vocab)]));
    assert_eq!(out.code, 0, "{}", out.err);
    let m = ibowimg::checkpoint::load(&ws.path("fixed.json")).unwrap();
    assert_eq!(m.vocab.answer_dict.min_count(), 2);
}

#[test]
fn config_file_with_flag_override() {
    let ws = Workspace::new();
    let config = ws.path("run.toml");
    fs::write(&config, "seed = 7\n[predict]\nk = 2\n").unwrap();
    let from_file = run(&with(ws.query("predict", "what is in the picture"), &["--config", &p(&config)]));
    assert_eq!(from_file.code, 0, "{}", from_file.err);
    assert_eq!(from_file.out.lines().count(), 2);
    assert!(from_file.err.contains("\"seed\":7"));
    let flag = run(&with(ws.query("predict", "what is in the picture"), &["--config", &p(&config), "--k", "1", "--seed", "3"]));
    assert_eq!(flag.out.lines().count(), 1);
    assert!(flag.err.contains("\"seed\":3"));

    fs::write(&config, "[predict]\nkk = 2\n").unwrap();
    let bad = run(&with(ws.query("predict", "what"), &["--config", &p(&config)]));
    assert_eq!(bad.code, 1);
    assert!(bad.err.contains("kk"));
    fs::write(&config, "[predikt]\n").unwrap();
    assert_eq!(run(&with(ws.query("predict", "what"), &["--config", &p(&config)])).code, 1);
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(run(&["frobnicate"]).code, 1);
    let unknown_flag = run(&["predict", "--temperature", "2"]);
    assert_eq!(unknown_flag.code, 1);
    assert!(unknown_flag.err.contains("--temperature"));
    assert_eq!(run(&["prep", "--questions", "q.json"]).code, 1);
    assert_eq!(run(&["--help"]).code, 0);
}

#[test]
fn data_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let q = dir.path().join("q.json");
    fs::write(&q, "{\"questions\": [").unwrap();
    let out = run(&[
        "prep".to_string(),
        "--questions".into(),
        p(&q),
        "--annotations".into(),
        p(&q),
        "--out".into(),
        p(&dir.path().join("pairs.jsonl")),
    ]);
    assert_eq!(out.code, 2);
    assert!(out.err.contains("parse error"));
}

#[test]
fn divergence_exits_three() {
    let ws = Workspace::new();
    let out = run(&with(
        ws.train_args(&p(&ws.path("bad.json"))),
        &["--lr-softmax", "1e300", "--lr-embedding", "1e300", "--clip-softmax", "1e308", "--clip-embedding", "1e308"],
    ));
    assert_eq!(out.code, 3, "{}", out.err);
    assert!(out.err.contains("diverged"));
}

#[test]
fn binary_unknown_subcommand() {
    let out = Command::new(env!("CARGO_BIN_EXE_ibowimg")).arg("nope").output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    let ok = Command::new(env!("CARGO_BIN_EXE_ibowimg")).arg("--version").output().unwrap();
    assert_eq!(ok.status.code(), Some(0));
}
