use std::collections::BTreeMap;
use std::fs;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use base64::engine::general_purpose::STANDARD;
use base64::Engine as _;
use coral_core::tensor::ParamTensors;
use coral_core::trainer::{TrainConfig, TrainState};
use coral_core::{EditArtifact, EditorKind, ModulatedBackbone, Synthesis, Variant};
use coral_service::{router, scan_artifacts, ApplyResponse, EditSummary, Engine, Health, ServiceState};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

fn artifact(variant: Variant, editor: EditorKind, cutoff: usize, seed: u64) -> EditArtifact {
    let bb = ModulatedBackbone::toy(7);
    let mut cfg = TrainConfig::new(format!("prompt {seed}"), variant, editor);
    cfg.edit_cutoff = cutoff;
    cfg.seed = seed;
    let mut state = TrainState::new(&cfg, bb.config()).unwrap();
    let mut k = 0.0f64;
    for t in state.selector.tensors_mut().into_iter().chain(state.editor.tensors_mut()) {
        for v in &mut t.data {
            k += 1.0;
            *v = 0.3 * (k * 0.77 + seed as f64).sin();
        }
    }
    EditArtifact::from_training(&cfg, &state, &bb).unwrap()
}

/// Artifact directory with two good entries, one corrupt manifest and one
/// artifact for a different backbone.
fn artifact_dir() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    artifact(Variant::Ss, EditorKind::Global, 6, 1).save(&dir.path().join("bright-ul")).unwrap();
    artifact(Variant::Can, EditorKind::Mapper, 4, 2).save(&dir.path().join("smile")).unwrap();
    fs::create_dir(dir.path().join("broken")).unwrap();
    fs::write(dir.path().join("broken/manifest.toml"), "format = [").unwrap();
    let other = ModulatedBackbone::toy(99);
    let mut cfg = TrainConfig::new("x", Variant::Ss, EditorKind::Global);
    cfg.edit_cutoff = 6;
    EditArtifact::from_training(&cfg, &TrainState::new(&cfg, other.config()).unwrap(), &other)
        .unwrap()
        .save(&dir.path().join("foreign"))
        .unwrap();
    dir
}

fn app(dir: &std::path::Path) -> Router {
    router(ServiceState::ready(Engine::from_dir(Box::new(ModulatedBackbone::toy(7)), dir)))
}

async fn call(app: &Router, req: Request<Body>) -> (StatusCode, Vec<u8>) {
    let res = app.clone().oneshot(req).await.unwrap();
    let status = res.status();
    (status, res.into_body().collect().await.unwrap().to_bytes().to_vec())
}

fn get(path: &str) -> Request<Body> {
    Request::get(path).body(Body::empty()).unwrap()
}

fn post(body: Value) -> Request<Body> {
    Request::post("/apply")
        .header("content-type", "application/json")
        .body(Body::from(body.to_string()))
        .unwrap()
}

#[tokio::test]
async fn edits_lists_loadable_artifacts_only() {
    let dir = artifact_dir();
    let app = app(dir.path());
    let (status, body) = call(&app, get("/edits")).await;
    assert_eq!(status, StatusCode::OK);
    let list: Vec<EditSummary> = serde_json::from_slice(&body).unwrap();
    let ids: Vec<&str> = list.iter().map(|e| e.id.as_str()).collect();
    assert_eq!(ids, ["bright-ul", "smile"]);
    assert_eq!(list[1].edit_cutoff, 4);
    assert_eq!(list[1].default_tau, 0.85);
    let raw: Value = serde_json::from_slice(&body).unwrap();
    assert_eq!(raw[1]["variant"], "can");
    assert_eq!(raw[1]["editor_kind"], "mapper");
}

#[tokio::test]
async fn empty_directory_lists_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let (status, body) = call(&app(dir.path()), get("/edits")).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body, b"[]");
}

#[tokio::test]
async fn health_reports_artifact_count() {
    let dir = artifact_dir();
    let app = app(dir.path());
    let (status, body) = call(&app, get("/health")).await;
    assert_eq!(status, StatusCode::OK);
    let h: Health = serde_json::from_slice(&body).unwrap();
    assert_eq!(h.status, "ok");
    assert_eq!(h.artifact_count, 2);
    assert_eq!(h.backbone_fingerprint.as_deref(), Some(ModulatedBackbone::toy(7).fingerprint()));
}

#[tokio::test]
async fn uninitialized_service_answers_503() {
    let state = ServiceState::new();
    let app = router(state.clone());
    assert_eq!(call(&app, get("/health")).await.0, StatusCode::SERVICE_UNAVAILABLE);
    assert_eq!(call(&app, get("/edits")).await.0, StatusCode::SERVICE_UNAVAILABLE);
    let req = json!({"artifact_id": "x", "seed": 0, "alpha": 1.0, "tau": 0.5});
    assert_eq!(call(&app, post(req)).await.0, StatusCode::SERVICE_UNAVAILABLE);
    state.install(Engine::new(Box::new(ModulatedBackbone::toy(7)), BTreeMap::new()));
    assert_eq!(call(&app, get("/health")).await.0, StatusCode::OK);
}

#[tokio::test]
async fn apply_returns_cutoff_masks_and_metrics() {
    let dir = artifact_dir();
    let app = app(dir.path());
    let req = json!({"artifact_id": "smile", "seed": 3, "alpha": 1.5, "tau": 0.0});
    let (status, body) = call(&app, post(req)).await;
    assert_eq!(status, StatusCode::OK, "{}", String::from_utf8_lossy(&body));
    let r: ApplyResponse = serde_json::from_slice(&body).unwrap();
    assert_eq!(r.masks.len(), 4);
    assert_eq!(r.area_fractions.len(), 4);
    assert_ne!(r.edited_image, r.original_image);
    assert!(r.metrics.l2 > 0.0);
    let png = STANDARD.decode(&r.masks[0]).unwrap();
    assert_eq!(&png[1..4], b"PNG");
    let raw: Value = serde_json::from_slice(&body).unwrap();
    for key in ["edited_image", "original_image", "masks", "area_fractions", "metrics"] {
        assert!(raw.get(key).is_some(), "{key}");
    }
}

#[tokio::test]
async fn zero_alpha_gives_identical_pngs() {
    let dir = artifact_dir();
    let app = app(dir.path());
    let req = json!({"artifact_id": "bright-ul", "seed": 11, "alpha": 0.0, "tau": 0.2});
    let (status, body) = call(&app, post(req)).await;
    assert_eq!(status, StatusCode::OK);
    let r: ApplyResponse = serde_json::from_slice(&body).unwrap();
    assert_eq!(r.edited_image, r.original_image);
    assert_eq!(r.metrics.l2, 0.0);
}

#[tokio::test]
async fn identical_requests_give_identical_bodies() {
    let dir = artifact_dir();
    let app = app(dir.path());
    let req = json!({"artifact_id": "smile", "seed": 5, "alpha": -1.2, "tau": 0.85, "layer_toggles": [true, false, true, true]});
    let (s1, a) = call(&app, post(req.clone())).await;
    // An unrelated request in between must not change anything.
    call(&app, post(json!({"artifact_id": "bright-ul", "seed": 1, "alpha": 1.0, "tau": 0.3}))).await;
    let (s2, b) = call(&app, post(req)).await;
    assert_eq!((s1, s2), (StatusCode::OK, StatusCode::OK));
    assert_eq!(a, b);
}

#[tokio::test]
async fn toggles_off_reproduce_the_original() {
    let dir = artifact_dir();
    let app = app(dir.path());
    let req = json!({"artifact_id": "smile", "seed": 2, "alpha": 1.5, "tau": 0.0, "layer_toggles": [false, false, false, false]});
    let (_, body) = call(&app, post(req)).await;
    let r: ApplyResponse = serde_json::from_slice(&body).unwrap();
    assert_eq!(r.edited_image, r.original_image);
    assert!(r.area_fractions.iter().all(|&a| a == 0.0));
}

#[tokio::test]
async fn error_statuses() {
    let dir = artifact_dir();
    let app = app(dir.path());
    let cases = [
        (json!({"artifact_id": "nope", "seed": 0, "alpha": 1.0, "tau": 0.5}), StatusCode::NOT_FOUND),
        (json!({"artifact_id": "foreign", "seed": 0, "alpha": 1.0, "tau": 0.5}), StatusCode::NOT_FOUND),
        (json!({"artifact_id": "smile", "seed": 0, "alpha": 1.0, "tau": 1.5}), StatusCode::UNPROCESSABLE_ENTITY),
        (json!({"artifact_id": "smile", "seed": 0, "alpha": 1.0, "tau": -0.1}), StatusCode::UNPROCESSABLE_ENTITY),
        (json!({"artifact_id": "smile", "seed": 0, "alpha": "big", "tau": 0.5}), StatusCode::UNPROCESSABLE_ENTITY),
        (json!({"artifact_id": "smile", "seed": 0, "alpha": 1.0, "tau": 0.5, "layer_toggles": [true]}), StatusCode::UNPROCESSABLE_ENTITY),
    ];
    for (req, want) in cases {
        let (status, body) = call(&app, post(req.clone())).await;
        assert_eq!(status, want, "{req}");
        let err: Value = serde_json::from_slice(&body).unwrap_or(Value::Null);
        if want != StatusCode::UNPROCESSABLE_ENTITY || req["alpha"].is_number() {
            assert!(err["error"].is_string(), "{req}: {}", String::from_utf8_lossy(&body));
        }
    }
}

#[test]
fn scan_skips_corrupt_and_foreign_artifacts() {
    let dir = artifact_dir();
    let found = scan_artifacts(dir.path(), &ModulatedBackbone::toy(7));
    assert_eq!(found.keys().collect::<Vec<_>>(), ["bright-ul", "smile"]);
    assert!(scan_artifacts(&dir.path().join("missing"), &ModulatedBackbone::toy(7)).is_empty());
}
