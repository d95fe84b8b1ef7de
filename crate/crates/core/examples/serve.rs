//! Run the HTTP service on a local port, call each endpoint once and shut
//! down. Pass `--forever` to keep it running for a browser front end.
//!
//! cargo run --example serve [-- --forever]

use ibowimg::checkpoint;
use ibowimg::service::{serve, ServiceConfig};
use ibowimg::synthetic::SyntheticVqa;
use serde_json::{json, Value};

#[tokio::main]
async fn main() -> ibowimg::Result<()> {
    let forever = std::env::args().any(|a| a == "--forever");
    let corpus = SyntheticVqa::generate(20, 3, 2);
    let engine = corpus.toy_engine(2)?;
    let dir = tempfile::tempdir().expect("temp dir");
    let paths = corpus.write(dir.path())?;
    let ckpt = dir.path().join("model.json");
    checkpoint::save(engine.model(), &ckpt)?;

    let port = if forever { 8080 } else { 18_731 };
    let config = ServiceConfig {
        bind: ([127, 0, 0, 1], port).into(),
        checkpoint: ckpt,
        vectors: paths.vectors,
        maps: Some(paths.maps),
        ..ServiceConfig::default()
    };
    if forever {
        println!("serving on http://127.0.0.1:{port}, ctrl-c to stop");
        return serve(config, async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await;
    }

    let (stop, stopped) = tokio::sync::oneshot::channel::<()>();
    let server = tokio::spawn(serve(config, async {
        let _ = stopped.await;
    }));
    let base = format!("http://127.0.0.1:{port}/api");
    let client = reqwest::Client::new();
    loop {
        match client.get(format!("{base}/health")).send().await {
            Ok(r) if r.status() == 200 => {
                println!("health: {}", r.json::<Value>().await.expect("json"));
                break;
            }
            _ => tokio::time::sleep(std::time::Duration::from_millis(20)).await,
        }
    }
    let images: Value = client.get(format!("{base}/images")).send().await.expect("images").json().await.expect("json");
    let image_id = images[0]["image_id"].clone();
    let ask: Value = client
        .post(format!("{base}/ask"))
        .json(&json!({"image_id": image_id, "question": "what animal is this", "k": 2}))
        .send()
        .await
        .expect("ask")
        .json()
        .await
        .expect("json");
    println!("ask: {}", ask["answers"]);
    let mc: Value = client
        .post(format!("{base}/mc"))
        .json(&json!({"image_id": image_id, "question": "is there a dog", "choices": ["yes", "no"]}))
        .send()
        .await
        .expect("mc")
        .json()
        .await
        .expect("json");
    println!("mc chose {}", mc["chosen"]);

    let _ = stop.send(());
    server.await.expect("server task")
}
