//! JSON-over-HTTP access to trained edits.
//!
//! The server holds one backbone and a set of artifacts scanned at startup.
//! Seeds, not latent vectors, cross the wire; `z` is derived with
//! [`LatentZ::from_seed`]. Inference runs on a blocking thread, one request at
//! a time, so responses never depend on arrival order.

use std::collections::BTreeMap;
use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, OnceLock};

use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD;
use base64::Engine as _;
use coral_core::backbone::DEFAULT_TOY_SEED;
use coral_core::desk::PooledIdentityEmbedder;
use coral_core::inference::{edit_metrics, encode_mask_png, encode_png, EditMetrics};
use coral_core::{apply_edit, CoralError, EditArtifact, EditorKind, LatentZ, ModulatedBackbone, Synthesis, Variant};
use serde::{Deserialize, Serialize};
use tokio::sync::Mutex;

pub const DEFAULT_PORT: u16 = 8787;
pub const PORT_VAR: &str = "CORAL_PORT";
pub const ARTIFACT_DIR_VAR: &str = "CORAL_ARTIFACT_DIR";
pub const BACKBONE_DIR_VAR: &str = "CORAL_BACKBONE_DIR";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ServiceConfig {
    pub port: u16,
    pub artifact_dir: PathBuf,
    /// Backbone checkpoint; the default toy backbone when absent.
    pub backbone_dir: Option<PathBuf>,
}

impl ServiceConfig {
    pub fn from_env() -> Result<Self, String> {
        let port = match std::env::var(PORT_VAR) {
            Ok(v) => v.parse().map_err(|_| format!("{PORT_VAR}={v} is not a port number"))?,
            Err(_) => DEFAULT_PORT,
        };
        Ok(ServiceConfig {
            port,
            artifact_dir: std::env::var_os(ARTIFACT_DIR_VAR)
                .map(PathBuf::from)
                .unwrap_or_else(|| PathBuf::from("artifacts")),
            backbone_dir: std::env::var_os(BACKBONE_DIR_VAR).map(PathBuf::from),
        })
    }
}

pub fn load_backbone(dir: Option<&Path>) -> coral_core::Result<ModulatedBackbone> {
    match dir {
        Some(d) => ModulatedBackbone::load(d),
        None => Ok(ModulatedBackbone::toy(DEFAULT_TOY_SEED)),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditSummary {
    pub id: String,
    pub prompt: String,
    pub variant: Variant,
    pub editor_kind: EditorKind,
    pub edit_cutoff: usize,
    pub default_tau: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApplyRequest {
    pub artifact_id: String,
    pub seed: u64,
    pub alpha: f64,
    pub tau: f64,
    /// One entry per layer up to the edit cutoff, or one per backbone layer.
    #[serde(default)]
    pub layer_toggles: Option<Vec<bool>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApplyResponse {
    /// Base64 PNG.
    pub edited_image: String,
    pub original_image: String,
    /// Base64 grayscale PNGs for layers `1..=edit_cutoff`.
    pub masks: Vec<String>,
    pub area_fractions: Vec<f64>,
    pub metrics: EditMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub backbone_fingerprint: Option<String>,
    pub artifact_count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        ApiError {
            status,
            message: message.into(),
        }
    }
}

impl From<CoralError> for ApiError {
    fn from(e: CoralError) -> Self {
        let status = match e {
            CoralError::InvalidArgument(_) | CoralError::DimensionMismatch { .. } => StatusCode::UNPROCESSABLE_ENTITY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError::new(status, e.to_string())
    }
}

#[derive(Serialize)]
struct ErrorBody<'a> {
    error: &'a str,
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(ErrorBody { error: &self.message })).into_response()
    }
}

/// Scans `dir` for artifact subdirectories bound to `backbone`. Ids are the
/// directory names. Unreadable or foreign artifacts are skipped with a
/// warning; a missing directory yields no artifacts.
pub fn scan_artifacts(dir: &Path, backbone: &dyn Synthesis) -> BTreeMap<String, EditArtifact> {
    let mut out = BTreeMap::new();
    let entries = match fs::read_dir(dir) {
        Ok(e) => e,
        Err(e) => {
            log::warn!("artifact directory {}: {e}", dir.display());
            return out;
        }
    };
    for entry in entries.flatten() {
        let path = entry.path();
        if !path.is_dir() {
            continue;
        }
        let Some(id) = path.file_name().and_then(|n| n.to_str()).map(str::to_owned) else {
            continue;
        };
        match EditArtifact::load(&path).and_then(|a| a.check_backbone(backbone).map(|_| a)) {
            Ok(a) => {
                out.insert(id, a);
            }
            Err(e) => log::warn!("skipping artifact {}: {e}", path.display()),
        }
    }
    out
}

/// A loaded backbone with its artifacts. Immutable once built.
pub struct Engine {
    backbone: Box<dyn Synthesis>,
    artifacts: BTreeMap<String, EditArtifact>,
    embedder: PooledIdentityEmbedder,
}

impl Engine {
    pub fn new(backbone: Box<dyn Synthesis>, artifacts: BTreeMap<String, EditArtifact>) -> Self {
        Engine {
            backbone,
            artifacts,
            embedder: PooledIdentityEmbedder::default(),
        }
    }

    pub fn from_dir(backbone: Box<dyn Synthesis>, artifact_dir: &Path) -> Self {
        let artifacts = scan_artifacts(artifact_dir, backbone.as_ref());
        Engine::new(backbone, artifacts)
    }

    pub fn fingerprint(&self) -> &str {
        self.backbone.fingerprint()
    }

    pub fn artifact_count(&self) -> usize {
        self.artifacts.len()
    }

    pub fn edits(&self) -> Vec<EditSummary> {
        self.artifacts
            .iter()
            .map(|(id, a)| EditSummary {
                id: id.clone(),
                prompt: a.info.prompt.clone(),
                variant: a.info.variant,
                editor_kind: a.info.editor_kind,
                edit_cutoff: a.info.edit_cutoff,
                default_tau: a.info.default_tau,
            })
            .collect()
    }

    /// Checks everything that does not need the backbone to run.
    pub fn validate(&self, req: &ApplyRequest) -> Result<(), ApiError> {
        let Some(artifact) = self.artifacts.get(&req.artifact_id) else {
            return Err(ApiError::new(
                StatusCode::NOT_FOUND,
                format!("unknown artifact {:?}", req.artifact_id),
            ));
        };
        let invalid = |m: String| Err(ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, m));
        if !(0.0..=1.0).contains(&req.tau) {
            return invalid(format!("tau {} outside [0, 1]", req.tau));
        }
        if !req.alpha.is_finite() {
            return invalid(format!("alpha {} is not finite", req.alpha));
        }
        if let Some(t) = &req.layer_toggles {
            let layers = self.backbone.config().layer_count;
            if t.len() != artifact.info.edit_cutoff && t.len() != layers {
                return invalid(format!(
                    "layer_toggles has {} entries, expected {} or {layers}",
                    t.len(),
                    artifact.info.edit_cutoff
                ));
            }
        }
        Ok(())
    }

    pub fn apply(&self, req: &ApplyRequest) -> Result<ApplyResponse, ApiError> {
        self.validate(req)?;
        let artifact = &self.artifacts[&req.artifact_id];
        let config = self.backbone.config();
        let toggles = req.layer_toggles.as_ref().map(|t| {
            let mut full = t.clone();
            full.resize(config.layer_count, false);
            full
        });
        let z = LatentZ::from_seed(req.seed, config.latent_dim);
        let result = apply_edit(self.backbone.as_ref(), &z, artifact, req.alpha, req.tau, toggles.as_deref())?;
        let metrics = edit_metrics(&result, &self.embedder)?;
        let cutoff = artifact.info.edit_cutoff;
        let masks = result.masks.layers()[..cutoff]
            .iter()
            .map(|m| encode_mask_png(m).map(|b| STANDARD.encode(b)))
            .collect::<coral_core::Result<Vec<_>>>()?;
        Ok(ApplyResponse {
            edited_image: STANDARD.encode(encode_png(&result.edited)?),
            original_image: STANDARD.encode(encode_png(&result.original)?),
            masks,
            area_fractions: result.area_fractions[..cutoff].to_vec(),
            metrics,
        })
    }
}

/// Shared handler state. The engine is installed once initialization
/// finishes; until then every route but `/health` answers 503.
#[derive(Default)]
pub struct ServiceState {
    engine: OnceLock<Arc<Engine>>,
    worker: Mutex<()>,
}

impl ServiceState {
    pub fn new() -> Arc<Self> {
        Arc::new(ServiceState::default())
    }

    pub fn ready(engine: Engine) -> Arc<Self> {
        let state = ServiceState::new();
        state.install(engine);
        state
    }

    /// Installs the engine. Later calls are ignored.
    pub fn install(&self, engine: Engine) {
        if self.engine.set(Arc::new(engine)).is_err() {
            log::warn!("engine already installed");
        }
    }

    fn engine(&self) -> Result<Arc<Engine>, ApiError> {
        self.engine
            .get()
            .cloned()
            .ok_or_else(|| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "backbone is still loading"))
    }
}

async fn health(State(state): State<Arc<ServiceState>>) -> (StatusCode, Json<Health>) {
    match state.engine.get() {
        Some(e) => (
            StatusCode::OK,
            Json(Health {
                status: "ok".into(),
                backbone_fingerprint: Some(e.fingerprint().to_string()),
                artifact_count: e.artifact_count(),
            }),
        ),
        None => (
            StatusCode::SERVICE_UNAVAILABLE,
            Json(Health {
                status: "initializing".into(),
                backbone_fingerprint: None,
                artifact_count: 0,
            }),
        ),
    }
}

async fn edits(State(state): State<Arc<ServiceState>>) -> Result<Json<Vec<EditSummary>>, ApiError> {
    Ok(Json(state.engine()?.edits()))
}

async fn apply(
    State(state): State<Arc<ServiceState>>,
    Json(req): Json<ApplyRequest>,
) -> Result<Json<ApplyResponse>, ApiError> {
    let engine = state.engine()?;
    engine.validate(&req)?;
    let _turn = state.worker.lock().await;
    let response = tokio::task::spawn_blocking(move || engine.apply(&req))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, format!("inference task failed: {e}")))??;
    Ok(Json(response))
}

pub fn router(state: Arc<ServiceState>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/edits", get(edits))
        .route("/apply", post(apply))
        .with_state(state)
}

/// Binds the port, then loads the backbone and artifacts in the background
/// so `/health` can report 503 while that is in progress.
pub async fn serve(config: ServiceConfig) -> std::io::Result<()> {
    let addr = SocketAddr::from(([0, 0, 0, 0], config.port));
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {addr}");
    let state = ServiceState::new();
    let loader = state.clone();
    tokio::task::spawn_blocking(move || match load_backbone(config.backbone_dir.as_deref()) {
        Ok(bb) => {
            let engine = Engine::from_dir(Box::new(bb), &config.artifact_dir);
            log::info!("loaded {} artifacts", engine.artifact_count());
            loader.install(engine);
        }
        Err(e) => log::error!("backbone failed to load: {e}"),
    });
    axum::serve(listener, router(state)).await
}
