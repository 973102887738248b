use std::path::Path;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use mriq_cli::render::{codes, decode};
use mriq_cli::server::{router, AppState};
use mriq_core::dataset::{build_dataset, DatasetConfig, DatasetManifest, Split, MANIFEST_FILE};
use mriq_core::io::read_image;

fn tiny_config() -> DatasetConfig {
    DatasetConfig {
        scan_types: vec!["knee-fs".parse().unwrap(), "brain-nfs".parse().unwrap()],
        train_slices: 4,
        val_slices: 2,
        test_slices: 2,
        slices_per_subject: 2,
        size: 32,
        n_coils: 2,
        ..Default::default()
    }
}

struct Fixture {
    dir: tempfile::TempDir,
    manifest: DatasetManifest,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let manifest = build_dataset(&tiny_config(), dir.path()).unwrap();
        Fixture { dir, manifest }
    }

    fn app(&self) -> Router {
        let state = AppState::open(&self.dir.path().join(MANIFEST_FILE), &self.labels(), None).unwrap();
        router(Arc::new(state))
    }

    fn labels(&self) -> std::path::PathBuf {
        self.dir.path().join("labels.json")
    }

    fn root(&self) -> &Path {
        self.dir.path()
    }
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req.header("content-type", "application/json").body(Body::from(b.to_string())),
        None => req.body(Body::empty()),
    }
    .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, bytes)
}

async fn call_json(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let (s, b) = call(app, method, uri, body).await;
    let v = if b.is_empty() { Value::Null } else { serde_json::from_slice(&b).unwrap() };
    (s, v)
}

#[tokio::test]
async fn set_queue_drains_per_rater_then_returns_204() {
    let fx = Fixture::new();
    let app = fx.app();
    let n_train = fx.manifest.split(Split::Train).count();
    let mut seen = Vec::new();
    loop {
        let (s, v) = call_json(&app, "GET", "/api/sets/next?rater=alice", None).await;
        if s == StatusCode::NO_CONTENT {
            break;
        }
        assert_eq!(s, StatusCode::OK);
        assert_eq!(v["h"], Value::Null, "queue only hands out unlabeled sets");
        assert_eq!(v["m_t"], 5);
        assert_eq!(v["versions"].as_array().unwrap().len(), 5);
        let id = v["id"].as_str().unwrap().to_string();
        assert!(!seen.contains(&id));
        let (s, v) = call_json(&app, "POST", &format!("/api/sets/{id}/label"), Some(json!({"h": 2, "rater": "alice"}))).await;
        assert_eq!(s, StatusCode::OK);
        assert_eq!(v["h"], 2);
        seen.push(id);
        assert!(seen.len() <= n_train);
    }
    assert_eq!(seen.len(), n_train);

    // another rater still has the full queue
    let (s, v) = call_json(&app, "GET", "/api/sets/next?rater=bob", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["id"], json!(seen[0]));
}

#[tokio::test]
async fn pick_range_and_unknown_ids() {
    let fx = Fixture::new();
    let app = fx.app();
    let id = fx.manifest.split(Split::Train).next().unwrap().slice_id.clone();
    let uri = format!("/api/sets/{id}/label");
    for h in [0, 4, 6] {
        let (s, v) = call_json(&app, "POST", &uri, Some(json!({ "h": h }))).await;
        assert_eq!(s, StatusCode::OK, "h={h}");
        assert_eq!(v["h"], h);
    }
    let (s, v) = call_json(&app, "POST", &uri, Some(json!({ "h": 7 }))).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert!(v["error"].as_str().unwrap().contains("0..=6"));
    let (s, _) = call_json(&app, "POST", &uri, Some(json!({ "h": -1 }))).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);

    // the rejected posts left the last accepted pick in place
    let (_, v) = call_json(&app, "GET", &format!("/api/sets/{id}"), None).await;
    assert_eq!(v["h"], 6);

    let (s, _) = call_json(&app, "POST", "/api/sets/nope/label", Some(json!({ "h": 1 }))).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let test_id = fx.manifest.split(Split::Test).next().unwrap().slice_id.clone();
    let (s, _) = call_json(&app, "GET", &format!("/api/sets/{test_id}"), None).await;
    assert_eq!(s, StatusCode::NOT_FOUND, "test slices are not calibration sets");
}

#[tokio::test]
async fn thresholds_validate_and_persist() {
    let fx = Fixture::new();
    let app = fx.app();
    let (s, v) = call_json(&app, "GET", "/api/rulers", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v.as_array().unwrap().len(), 2);

    let (s, v) = call_json(&app, "GET", "/api/rulers/knee-fs", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["m_r"], 8);
    assert_eq!(v["threshold"]["source"], "ruler");
    assert_eq!(v["levels_db"][7], Value::Null);

    let uri = "/api/rulers/knee-fs/threshold";
    for (a, b) in [(3, 2), (2, 8), (9, 9)] {
        let (s, _) = call_json(&app, "POST", uri, Some(json!({ "t_a": a, "t_b": b }))).await;
        assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY, "({a}, {b})");
    }
    let (s, v) = call_json(&app, "POST", uri, Some(json!({ "t_a": 2, "t_b": 3 }))).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["threshold"], json!({ "t_a": 2, "t_b": 3, "source": "store" }));
    let (s, _) = call_json(&app, "POST", uri, Some(json!({ "t_a": 7, "t_b": 7 }))).await;
    assert_eq!(s, StatusCode::OK);

    let (s, _) = call_json(&app, "GET", "/api/rulers/spine-fs", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _) = call_json(&app, "GET", "/api/rulers/not-a-scan-type", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);

    // a fresh service over the same store sees the latest threshold
    let again = fx.app();
    let (_, v) = call_json(&again, "GET", "/api/rulers/knee-fs", None).await;
    assert_eq!(v["threshold"], json!({ "t_a": 7, "t_b": 7, "source": "store" }));
}

#[tokio::test]
async fn test_labels_queue_and_echo() {
    let fx = Fixture::new();
    let app = fx.app();
    let (s, item) = call_json(&app, "GET", "/api/test/next?rater=r1", None).await;
    assert_eq!(s, StatusCode::OK);
    let id = item["id"].as_str().unwrap().to_string();
    assert!(id.ends_with("-v1"));
    assert_eq!(item["m_r"], 8);

    let uri = format!("/api/test/{id}/label");
    let (s, _) = call_json(&app, "POST", &uri, Some(json!({ "rs": 8, "pf": true, "rater": "r1" }))).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    let (s, v) = call_json(&app, "POST", &uri, Some(json!({ "rs": 5, "pf": true, "rater": "r1" }))).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["label"], json!({ "rs": 5, "pf": true }));

    let (_, v) = call_json(&app, "GET", &format!("/api/test/{id}?rater=r1"), None).await;
    assert_eq!(v["label"], json!({ "rs": 5, "pf": true }));
    let (_, v) = call_json(&app, "GET", &format!("/api/test/{id}?rater=r2"), None).await;
    assert_eq!(v["label"], Value::Null, "labels are kept per rater");

    let (_, next) = call_json(&app, "GET", "/api/test/next?rater=r1", None).await;
    assert_ne!(next["id"], json!(id));

    let train_id = fx.manifest.split(Split::Train).next().unwrap().slice_id.clone();
    for bad in [format!("{train_id}-v1"), format!("{id}9"), "x".to_string()] {
        let (s, _) = call_json(&app, "POST", &format!("/api/test/{bad}/label"), Some(json!({ "rs": 1, "pf": false }))).await;
        assert_eq!(s, StatusCode::NOT_FOUND, "{bad}");
    }
}

#[tokio::test]
async fn test_queue_exhausts() {
    let fx = Fixture::new();
    let app = fx.app();
    let expected: usize = fx.manifest.split(Split::Test).map(|s| s.version_files.len()).sum();
    let mut n = 0;
    loop {
        let (s, v) = call_json(&app, "GET", "/api/test/next", None).await;
        if s == StatusCode::NO_CONTENT {
            break;
        }
        let id = v["id"].as_str().unwrap();
        let (s, _) = call_json(&app, "POST", &format!("/api/test/{id}/label"), Some(json!({ "rs": 0, "pf": false }))).await;
        assert_eq!(s, StatusCode::OK);
        n += 1;
        assert!(n <= expected);
    }
    assert_eq!(n, expected);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_posts_serialize() {
    let fx = Fixture::new();
    let app = fx.app();
    let id = fx.manifest.split(Split::Train).next().unwrap().slice_id.clone();
    let uri = format!("/api/sets/{id}/label");
    let mut tasks = Vec::new();
    for h in 1..=5usize {
        let (app, uri) = (app.clone(), uri.clone());
        tasks.push(tokio::spawn(async move { call_json(&app, "POST", &uri, Some(json!({ "h": h }))).await.0 }));
    }
    for t in tasks {
        assert_eq!(t.await.unwrap(), StatusCode::OK);
    }
    let (_, v) = call_json(&app, "GET", &format!("/api/sets/{id}"), None).await;
    let h = v["h"].as_u64().unwrap();
    assert!((1..=5).contains(&h));

    // the audit log holds every write, whole, and its last entry is the final state
    let log = std::fs::read_to_string(fx.root().join("labels.json.log")).unwrap();
    let entries: Vec<Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(entries.len(), 5);
    let seqs: Vec<u64> = entries.iter().map(|e| e["seq"].as_u64().unwrap()).collect();
    assert_eq!(seqs, vec![1, 2, 3, 4, 5]);
    assert_eq!(entries[4]["h"].as_u64(), Some(h));

    let reopened = fx.app();
    let (_, v) = call_json(&reopened, "GET", &format!("/api/sets/{id}"), None).await;
    assert_eq!(v["h"].as_u64(), Some(h));
}

#[tokio::test]
async fn images_render_losslessly_as_16_bit_png() {
    let fx = Fixture::new();
    let app = fx.app();
    let rec = fx.manifest.split(Split::Train).next().unwrap();
    let (img, _) = read_image(&fx.root().join(&rec.version_files[0])).unwrap();
    let pixels: Vec<f64> = img.pixels.iter().copied().collect();

    let req = Request::get(format!("/api/images/{}-v1", rec.slice_id)).body(Body::empty()).unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    assert_eq!(resp.status(), StatusCode::OK);
    assert_eq!(resp.headers()["content-type"], "image/png");
    let header = |k: &str| resp.headers()[k].to_str().unwrap().parse::<f64>().unwrap();
    let (offset, scale) = (header("x-mriq-offset"), header("x-mriq-scale"));
    assert!(header("x-mriq-window-width") > 0.0);
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();

    let (w, h, got) = decode(&bytes).unwrap();
    assert_eq!((h, w), img.dim());
    let (want, o, s) = codes(&pixels);
    assert_eq!(got, want, "wire codes are exact");
    assert_eq!((o, s), (offset, scale));
    for (&c, &p) in got.iter().zip(&pixels) {
        let back = offset + scale * f64::from(c);
        assert!((back - p).abs() <= scale * 0.5 + 1e-12 * p.abs().max(1.0));
    }
    // rendering the reconstruction reproduces the same codes
    let back: Vec<f64> = got.iter().map(|&c| offset + scale * f64::from(c)).collect();
    assert_eq!(codes(&back).0, got);

    for uri in [format!("/api/images/{}-motion", rec.slice_id), "/api/images/ruler-brain-nfs-v7".to_string()] {
        let (s, b) = call(&app, "GET", &uri, None).await;
        assert_eq!(s, StatusCode::OK, "{uri}");
        assert!(decode(&b).is_ok());
    }
    for uri in [
        format!("/api/images/{}-v0", rec.slice_id),
        format!("/api/images/{}-v6", rec.slice_id),
        "/api/images/ruler-brain-nfs-v8".to_string(),
        "/api/images/ruler-spine-fs-v0".to_string(),
        "/api/images/whatever".to_string(),
    ] {
        let (s, _) = call(&app, "GET", &uri, None).await;
        assert_eq!(s, StatusCode::NOT_FOUND, "{uri}");
    }
}
