//! HTTP service behind the painting UI.

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::sync::Mutex;

use gd_core::image_io::encode_png;
use gd_core::intervene::{trace_featuremaps, LayerBaseline, VISIBLE_FRACTION};
use gd_core::session::{ConceptCatalog, EditCommand, EditError, EditOp, Session};
use gd_core::segment::ConceptUniverse;
use gd_core::{GdError, NetworkSpec, Tensor};

/// Everything a running service needs; built once at start.
pub struct AppState {
    pub net: NetworkSpec,
    pub universe: ConceptUniverse,
    pub catalog: ConceptCatalog,
    pub baseline: LayerBaseline,
    pub generator: String,
    sessions: Mutex<HashMap<String, Arc<Mutex<Session>>>>,
    next_id: AtomicU64,
}

impl AppState {
    pub fn new(
        net: NetworkSpec,
        universe: ConceptUniverse,
        catalog: ConceptCatalog,
        baseline: LayerBaseline,
        generator: String,
    ) -> Self {
        Self {
            net,
            universe,
            catalog,
            baseline,
            generator,
            sessions: Mutex::new(HashMap::new()),
            next_id: AtomicU64::new(1),
        }
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/meta", get(meta))
        .route("/api/session", post(create_session))
        .route("/api/session/{id}", get(export_session))
        .route("/api/session/{id}/edit", post(edit))
        .route("/api/session/{id}/undo", post(undo))
        .route("/api/session/{id}/trace", get(trace))
        .with_state(state)
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
    field: Option<String>,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            code,
            message: message.into(),
            field: None,
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut body = json!({ "code": self.code, "message": self.message });
        if let Some(f) = self.field {
            body["field"] = json!(f);
        }
        (self.status, Json(body)).into_response()
    }
}

impl From<GdError> for ApiError {
    fn from(e: GdError) -> Self {
        let (status, code) = match e {
            GdError::InvalidArgument(_) | GdError::UnknownConcept(_) | GdError::ZeroBaseRate(_) => {
                (StatusCode::UNPROCESSABLE_ENTITY, "invalid-edit")
            }
            _ => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        };
        Self::new(status, code, e.to_string())
    }
}

impl From<EditError> for ApiError {
    fn from(e: EditError) -> Self {
        match e {
            EditError::Invalid { field, message } => Self {
                status: StatusCode::UNPROCESSABLE_ENTITY,
                code: "invalid-edit",
                message: format!("{field}: {message}"),
                field: Some(field),
            },
            EditError::EmptyStack => Self::new(StatusCode::UNPROCESSABLE_ENTITY, "empty-stack", "nothing to undo"),
            EditError::Core(e) => e.into(),
        }
    }
}

fn parse<T: for<'de> Deserialize<'de>>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError {
        status: StatusCode::UNPROCESSABLE_ENTITY,
        code: "invalid-json",
        message: e.to_string(),
        field: None,
    })
}

pub fn png_base64(image: &Tensor) -> Result<String, GdError> {
    Ok(base64::engine::general_purpose::STANDARD.encode(encode_png(image)?))
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ApiError> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?
}

async fn session(state: &AppState, id: &str) -> Result<Arc<Mutex<Session>>, ApiError> {
    state
        .sessions
        .lock()
        .await
        .get(id)
        .cloned()
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "unknown-session", format!("no session '{id}'")))
}

async fn meta(State(s): State<Arc<AppState>>) -> Result<Json<serde_json::Value>, ApiError> {
    let img = s.net.image_shape()?;
    let fm = s.net.featuremap_shape()?;
    let unit_sets: BTreeMap<&str, &[usize]> = s
        .catalog
        .entries
        .iter()
        .map(|e| {
            let n = e.ranked_units.len().min(gd_core::session::DEFAULT_TOP_N);
            (e.concept.as_str(), &e.ranked_units[..n])
        })
        .collect();
    Ok(Json(json!({
        "generator": s.generator,
        "concepts": s.catalog.entries.iter().map(|e| &e.concept).collect::<Vec<_>>(),
        "unit_sets": unit_sets,
        "image_size": [img[1], img[2]],
        "featuremap_size": [fm[1], fm[2]],
    })))
}

#[derive(Deserialize)]
struct CreateSession {
    seed: u64,
}

#[derive(Serialize)]
struct EditResponse {
    image: String,
    delta_stats: BTreeMap<String, i64>,
    /// Whether the image changed by more than the visibility threshold.
    visible: bool,
    depth: usize,
}

async fn create_session(State(s): State<Arc<AppState>>, body: Bytes) -> Result<Response, ApiError> {
    let req: CreateSession = parse(&body)?;
    let id = format!("s{}", s.next_id.fetch_add(1, Ordering::Relaxed));
    let session = Session::new(id.clone(), s.generator.clone(), req.seed);
    let st = s.clone();
    let sess = session.clone();
    let image = blocking(move || Ok(png_base64(&sess.replay(&st.net)?)?)).await?;
    s.sessions.lock().await.insert(id.clone(), Arc::new(Mutex::new(session)));
    Ok((StatusCode::CREATED, Json(json!({ "session_id": id, "image": image }))).into_response())
}

async fn export_session(State(s): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let sess = session(&s, &id).await?;
    let text = sess.lock().await.to_json()?;
    Ok(([("content-type", "application/json")], text).into_response())
}

async fn run_edit(s: Arc<AppState>, id: String, cmd: EditCommand) -> Result<Json<EditResponse>, ApiError> {
    let sess = session(&s, &id).await?;
    // one writer per session: the lock is held for the whole edit
    let mut guard = sess.lock().await;
    let mut working = guard.clone();
    let st = s.clone();
    let (working, resp) = blocking(move || {
        let out = working.apply(&st.net, &st.catalog, &st.universe, &cmd)?;
        let change: f64 = out
            .before
            .data()
            .iter()
            .zip(out.image.data())
            .map(|(a, b)| (a - b).abs() as f64)
            .sum();
        let resp = EditResponse {
            image: png_base64(&out.image)?,
            delta_stats: out.delta_stats,
            visible: change > VISIBLE_FRACTION * st.baseline.image_l1,
            depth: working.edits.len(),
        };
        Ok((working, resp))
    })
    .await?;
    *guard = working;
    Ok(Json(resp))
}

async fn edit(State(s): State<Arc<AppState>>, Path(id): Path<String>, body: Bytes) -> Result<Json<EditResponse>, ApiError> {
    session(&s, &id).await?;
    let cmd: EditCommand = parse(&body)?;
    run_edit(s, id, cmd).await
}

async fn undo(State(s): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Json<EditResponse>, ApiError> {
    let cmd = EditCommand {
        op: EditOp::Undo,
        concept: None,
        brush: None,
        units: None,
    };
    run_edit(s, id, cmd).await
}

async fn trace(State(s): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let sess = session(&s, &id).await?;
    let snapshot = sess.lock().await.clone();
    let st = s.clone();
    let profile = blocking(move || {
        let (before, after) = snapshot
            .last_edit(&st.net)
            .ok_or_else(|| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "no-edit", "session has no edits"))??;
        Ok(trace_featuremaps(&st.net, &before, &after, &st.baseline)?)
    })
    .await?;
    Ok(Json(profile).into_response())
}
