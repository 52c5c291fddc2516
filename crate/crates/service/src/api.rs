//! HTTP routes over a [`Store`].

use std::net::SocketAddr;
use std::sync::Arc;

use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use stenosis_core::BBox;

use crate::store::{Store, StoreError};

#[derive(Debug)]
pub struct ApiError(StoreError);

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        ApiError(e)
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = match &self.0 {
            StoreError::UnknownSequence(_) | StoreError::UnknownFrame { .. } => StatusCode::NOT_FOUND,
            StoreError::Validation(_) => StatusCode::UNPROCESSABLE_ENTITY,
            StoreError::Core(stenosis_core::Error::InvalidBox(_) | stenosis_core::Error::OutsideImage { .. }) => {
                StatusCode::UNPROCESSABLE_ENTITY
            }
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        (status, Json(ErrorBody { error: self.0.to_string() })).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoxesBody {
    pub boxes: Vec<BBox>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RepropagateBody {
    pub from: usize,
    pub boxes: Vec<BBox>,
    #[serde(default)]
    pub unpin: Vec<usize>,
}

/// Runs store work off the async executor; tracker runs can take a while.
async fn blocking<T: Send + 'static>(
    store: &Arc<Store>,
    f: impl FnOnce(&Store) -> Result<T, StoreError> + Send + 'static,
) -> ApiResult<T> {
    let store = store.clone();
    tokio::task::spawn_blocking(move || f(&store))
        .await
        .map_err(|e| ApiError(StoreError::Validation(format!("worker failed: {e}"))))?
        .map_err(ApiError)
}

async fn list_sequences(State(store): State<Arc<Store>>) -> impl IntoResponse {
    Json(store.list())
}

async fn get_frame(State(store): State<Arc<Store>>, Path((id, k)): Path<(String, usize)>) -> ApiResult<Response> {
    let png = blocking(&store, move |s| s.frame_png(&id, k)).await?;
    Ok(([(header::CONTENT_TYPE, "image/png")], png).into_response())
}

async fn get_boxes(State(store): State<Arc<Store>>, Path((id, k)): Path<(String, usize)>) -> ApiResult<Response> {
    Ok(Json(store.frame(&id, k)?).into_response())
}

async fn put_boxes(
    State(store): State<Arc<Store>>,
    Path((id, k)): Path<(String, usize)>,
    Json(body): Json<BoxesBody>,
) -> ApiResult<Response> {
    let frame = blocking(&store, move |s| s.put_boxes(&id, k, body.boxes)).await?;
    Ok(Json(frame).into_response())
}

async fn delete_box(
    State(store): State<Arc<Store>>,
    Path((id, k, index)): Path<(String, usize, usize)>,
) -> ApiResult<Response> {
    let frame = blocking(&store, move |s| s.delete_box(&id, k, index)).await?;
    Ok(Json(frame).into_response())
}

async fn repropagate(
    State(store): State<Arc<Store>>,
    Path(id): Path<String>,
    Json(body): Json<RepropagateBody>,
) -> ApiResult<Response> {
    let out = blocking(&store, move |s| s.repropagate(&id, body.from, body.boxes, body.unpin)).await?;
    Ok(Json(out).into_response())
}

async fn detections(State(store): State<Arc<Store>>, Path(id): Path<String>) -> ApiResult<Response> {
    Ok(Json(store.detections(&id)?).into_response())
}

pub fn router(store: Arc<Store>) -> Router {
    Router::new()
        .route("/api/sequences", get(list_sequences))
        .route("/api/sequences/{id}/frames/{k}", get(get_frame))
        .route("/api/sequences/{id}/frames/{k}/boxes", get(get_boxes).put(put_boxes))
        .route(
            "/api/sequences/{id}/frames/{k}/boxes/{index}",
            axum::routing::delete(delete_box),
        )
        .route("/api/sequences/{id}/repropagate", post(repropagate))
        .route("/api/sequences/{id}/detections", get(detections))
        .with_state(store)
}

/// Binds `addr` and serves until the process is stopped.
pub async fn serve(addr: SocketAddr, store: Arc<Store>) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    axum::serve(listener, router(store)).await
}
