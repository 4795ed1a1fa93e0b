use std::path::Path;
use std::process::{Command, Output};
use std::sync::Arc;
use std::time::Duration;

use advex::nn::load_checkpoint;
use advex::tensor::Tensor;
use advex_cli::queue::{load_queue, QueueManifest, QUEUE_FILE};
use advex_cli::service::{router, AppState, ServiceConfig};
use axum::body::Body;
use axum::http::{header, Request, StatusCode};
use serde_json::{json, Value};
use tempfile::TempDir;
use tower::ServiceExt;

const TRAIN_CONFIG: &str =
    r#"{"epochs":30,"lr":{"base":0.01,"warmup_epochs":2,"step_epochs":[25],"step_factor":0.1}}"#;

fn advex(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_advex"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

fn ok_json(dir: &Path, args: &[&str]) -> Value {
    let out = advex(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).unwrap()
}

fn err_json(out: &Output) -> Value {
    assert!(!out.status.success());
    assert!(out.stdout.is_empty());
    serde_json::from_slice(&out.stderr).unwrap()
}

/// Blobs dataset plus a trained model inside `dir`.
fn trained(dir: &Path) {
    ok_json(dir, &["gen-data", "--dir", "data", "--per-class", "100", "--test-per-class", "40", "--seed", "3"]);
    std::fs::write(dir.join("cfg.json"), TRAIN_CONFIG).unwrap();
    let r = ok_json(dir, &["train", "--data", "data", "--checkpoint", "model", "--config", "cfg.json", "--seed", "3"]);
    assert!(r["test"]["accuracy"].as_f64().unwrap() > 0.9, "{r}");
}

fn prepare(dir: &Path, size: usize) -> Value {
    let n = size.to_string();
    ok_json(
        dir,
        &["serve", "--model", "model", "--state-dir", "state", "--data", "data", "--queue-size", &n, "--prepare-only", "--seed", "5"],
    )
}

#[test]
fn pipeline_from_data_to_merged_retraining() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    trained(dir);

    let ara = ok_json(dir, &["ara", "--model", "model", "--data", "data", "--quota", "30", "--seed", "1", "--csv", "curve.csv"]);
    let area = ara["summary"]["area"].as_f64().unwrap();
    assert!(area > 0.0 && area <= 0.2 * (1.0 - 1.0 / 3.0));
    assert!(std::fs::read_to_string(dir.join("curve.csv")).unwrap().starts_with("r,accuracy\n"));

    let again = ok_json(dir, &["ara", "--model", "model", "--data", "data", "--quota", "30", "--seed", "1"]);
    assert_eq!(again["summary"], ara["summary"]);

    let atk = ok_json(dir, &["attack", "--model", "model", "--data", "data", "--count", "3", "--goal", "btr"]);
    assert_eq!(atk["attempted"], 3);

    let ex = ok_json(dir, &["explain", "--model", "model", "--data", "data", "--index", "2", "--rho", "0.05", "--image", "e.aetn"]);
    assert!((ex["rmse"].as_f64().unwrap() - 0.05).abs() < 0.005, "{ex}");
    assert!(ex["probability_after"].as_f64() > ex["probability_before"].as_f64());
    assert!(Tensor::load(dir.join("e.aetn")).is_ok());

    let prep = prepare(dir, 8);
    assert_eq!(prep["queue"], 8);
    assert_eq!(prep["progress"]["remaining"], 8);

    // Annotate through the REST API, as the UI would.
    let net = load_checkpoint(dir.join("model")).unwrap();
    let state = dir.join("state");
    let items = load_queue(&state, &net).unwrap().items;
    let app = router(Arc::new(
        AppState::new(
            items,
            ServiceConfig {
                lease: Duration::from_secs(600),
                allow_overlap: false,
                log_path: state.join("annotations.jsonl"),
            },
        )
        .unwrap(),
    ));
    let decisions = ["unchanged", "changed", "unchanged", "unsure", "unchanged"];
    let rt = tokio::runtime::Runtime::new().unwrap();
    rt.block_on(async {
        for d in decisions {
            let next = app
                .clone()
                .oneshot(Request::get("/api/queue/next?annotator=ann").body(Body::empty()).unwrap())
                .await
                .unwrap();
            assert_eq!(next.status(), StatusCode::OK);
            let body = http_body_util::BodyExt::collect(next.into_body()).await.unwrap().to_bytes();
            let item: Value = serde_json::from_slice(&body).unwrap();
            let req = Request::post("/api/annotations")
                .header(header::CONTENT_TYPE, "application/json")
                .body(Body::from(json!({"id": item["id"], "decision": d, "annotator": "ann"}).to_string()))
                .unwrap();
            assert_eq!(app.clone().oneshot(req).await.unwrap().status(), StatusCode::OK);
        }
    });

    let merged = ok_json(
        dir,
        &["merge-retrain", "--data", "data", "--log", "state/annotations.jsonl", "--out-data", "merged", "--checkpoint", "model2", "--config", "cfg.json", "--seed", "3"],
    );
    assert_eq!(merged["merge"]["unchanged"], 3);
    assert_eq!(merged["merge"]["added"], 3);
    assert_eq!(merged["merge"]["train_after"], 303);
    assert_eq!(merged["train_examples"], 303);

    // Merging the merged dataset again adds nothing.
    let twice = ok_json(
        dir,
        &["merge-retrain", "--data", "merged", "--log", "state/annotations.jsonl", "--out-data", "merged2", "--checkpoint", "model3", "--config", "cfg.json", "--epochs", "1"],
    );
    assert_eq!(twice["merge"]["added"], 0);
    assert_eq!(twice["merge"]["train_after"], 303);

    // Restarting the service replays the log.
    let restarted = prepare(dir, 8);
    assert_eq!(restarted["progress"]["decided"], 5);
    assert_eq!(restarted["progress"]["counts"]["unchanged"], 3);
}

#[test]
fn queue_items_meet_the_high_confidence_goal_and_tampering_is_caught() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    trained(dir);
    prepare(dir, 4);
    let net = load_checkpoint(dir.join("model")).unwrap();
    let state = dir.join("state");
    let manifest: QueueManifest = load_queue(&state, &net).unwrap();
    assert_eq!(manifest.margin, 0.5);
    for it in &manifest.items {
        let p = &it.prediction;
        let best = p[it.predicted_adversarial_class];
        assert_ne!(it.predicted_adversarial_class, it.original_label);
        assert!(p.iter().enumerate().all(|(j, &s)| j == it.predicted_adversarial_class || best - s > 0.5));
    }

    // Replace one adversarial image with its clean original.
    let it = &manifest.items[0];
    std::fs::copy(state.join(&it.original_image), state.join(&it.adversarial_image)).unwrap();
    let out = advex(dir, &["serve", "--model", "model", "--state-dir", "state", "--prepare-only"]);
    let e = err_json(&out);
    assert_eq!(e["error"]["kind"], "invalid");
    assert!(e["error"]["message"].as_str().unwrap().contains(&it.id));
    assert!(state.join(QUEUE_FILE).exists());
}

#[test]
fn failures_are_reported_as_json_on_stderr() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();

    let out = advex(dir, &["train", "--data", "missing", "--checkpoint", "m"]);
    assert_eq!(out.status.code(), Some(1));
    let e = err_json(&out);
    assert_eq!(e["error"]["kind"], "io");
    assert!(e["error"]["message"].as_str().unwrap().contains("missing"));

    let out = advex(dir, &["train", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(err_json(&out)["error"]["kind"], "usage");

    let out = advex(dir, &["gen-data", "--dir", "d", "--classes", "1"]);
    assert_eq!(err_json(&out)["error"]["kind"], "config");

    let out = advex(dir, &["serve", "--model", "nowhere", "--state-dir", "s", "--prepare-only"]);
    assert_eq!(err_json(&out)["error"]["kind"], "io");
}

#[test]
fn out_flag_writes_the_result_file() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    let out = advex(dir, &["gen-data", "--kind", "digits", "--dir", "d", "--per-class", "3", "--test-per-class", "2", "--out", "r.json"]);
    assert!(out.status.success());
    assert!(out.stdout.is_empty());
    let r: Value = serde_json::from_slice(&std::fs::read(dir.join("r.json")).unwrap()).unwrap();
    assert_eq!(r["image_shape"], json!([1, 8, 8]));
    assert_eq!(r["train"], 30);
}

#[test]
fn same_seed_gives_identical_checkpoints() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    ok_json(dir, &["gen-data", "--dir", "data", "--per-class", "30", "--test-per-class", "10", "--seed", "9"]);
    for m in ["a", "b"] {
        ok_json(dir, &["train", "--data", "data", "--checkpoint", m, "--epochs", "3", "--lr", "0.01", "--seed", "4"]);
    }
    let (a, b) = (load_checkpoint(dir.join("a")).unwrap(), load_checkpoint(dir.join("b")).unwrap());
    assert_eq!(a.params.len(), b.params.len());
    for (x, y) in a.params.iter().zip(&b.params) {
        assert_eq!(x.value, y.value);
    }
}
