//! HTTP session service. Every response is JSON; failures carry
//! `{"error": message, "status": code}` with the matching HTTP status.

use activemn::session::{CreateRequest, LabelRequest, SessionError, SessionStore};
use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::json;
use std::sync::Arc;

/// Port used when neither `--port` nor `MAL_PORT` is set.
pub const DEFAULT_PORT: u16 = 8080;
pub const PORT_VAR: &str = "MAL_PORT";

struct ApiError(SessionError);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let code = self.0.status();
        let status = StatusCode::from_u16(code).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, Json(json!({ "error": self.0.message(), "status": code }))).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

/// Parses a JSON body; an empty body reads as `{}`. Malformed input is a
/// validation error rather than axum's plain-text rejection.
fn body<T: DeserializeOwned>(bytes: &Bytes) -> Result<T, ApiError> {
    let raw: &[u8] = if bytes.iter().all(u8::is_ascii_whitespace) {
        b"{}"
    } else {
        bytes
    };
    serde_json::from_slice(raw).map_err(|e| ApiError(SessionError::Invalid(format!("bad request body: {e}"))))
}

/// Model work runs off the async workers.
async fn blocking<T, F>(store: Arc<SessionStore>, f: F) -> ApiResult<T>
where
    T: Serialize + Send + 'static,
    F: FnOnce(&SessionStore) -> Result<T, SessionError> + Send + 'static,
{
    tokio::task::spawn_blocking(move || f(&store))
        .await
        .map_err(|e| ApiError(SessionError::Internal(e.to_string())))?
        .map(Json)
        .map_err(ApiError)
}

async fn create(State(store): State<Arc<SessionStore>>, bytes: Bytes) -> Result<Response, ApiError> {
    let req: CreateRequest = body(&bytes)?;
    let resp = blocking(store, move |s| s.create(&req)).await?;
    Ok((StatusCode::CREATED, resp).into_response())
}

async fn query(State(store): State<Arc<SessionStore>>, Path(id): Path<String>) -> ApiResult<impl Serialize> {
    blocking(store, move |s| s.query(&id)).await
}

async fn label(
    State(store): State<Arc<SessionStore>>,
    Path(id): Path<String>,
    bytes: Bytes,
) -> ApiResult<impl Serialize> {
    let req: LabelRequest = body(&bytes)?;
    blocking(store, move |s| s.label(&id, &req)).await
}

async fn predictions(State(store): State<Arc<SessionStore>>, Path(id): Path<String>) -> ApiResult<impl Serialize> {
    blocking(store, move |s| s.predictions(&id)).await
}

async fn delete(State(store): State<Arc<SessionStore>>, Path(id): Path<String>) -> Result<StatusCode, ApiError> {
    store.delete(&id).map_err(ApiError)?;
    Ok(StatusCode::NO_CONTENT)
}

async fn not_found() -> ApiError {
    ApiError(SessionError::NotFound("no such endpoint".into()))
}

pub fn router(store: Arc<SessionStore>) -> Router {
    Router::new()
        .route("/sessions", post(create))
        .route("/sessions/{id}", axum::routing::delete(delete))
        .route("/sessions/{id}/query", get(query))
        .route("/sessions/{id}/label", post(label))
        .route("/sessions/{id}/predictions", get(predictions))
        .fallback(not_found)
        .with_state(store)
}

/// `--port` wins, then `MAL_PORT`, then the default.
pub fn resolve_port(flag: Option<u16>) -> Result<u16, String> {
    if let Some(p) = flag {
        return Ok(p);
    }
    match std::env::var(PORT_VAR) {
        Ok(v) if !v.trim().is_empty() => v
            .trim()
            .parse()
            .map_err(|_| format!("{PORT_VAR}=`{v}` is not a port number")),
        _ => Ok(DEFAULT_PORT),
    }
}

pub async fn serve(store: Arc<SessionStore>, port: u16) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(("0.0.0.0", port)).await?;
    eprintln!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(store))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
