//! HTTP API consumed by the browsing UI.

use std::io::Cursor;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, FromRequest, Multipart, Path, Query, Request, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use qbe_core::corpus::{Namespace, NoteMetadata};
use qbe_core::index::QueryResult;
use qbe_core::scattering::{build_filterbank, ScatteringConfig};
use qbe_core::signal::{decode_wav, load_wav, wav_info};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tower_http::cors::{Any, CorsLayer};

use crate::render::scalogram_png;
use crate::state::ServiceState;

pub type AppState = Arc<ServiceState>;

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    pub fn new(status: StatusCode, message: impl Into<String>) -> Self {
        ApiError {
            status,
            message: message.into(),
        }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, message)
    }

    fn not_found(id: usize) -> Self {
        Self::new(StatusCode::NOT_FOUND, format!("no item with id {id}"))
    }

    fn internal(e: impl std::fmt::Display) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message }))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

pub fn router(state: AppState) -> Router {
    let cors = if state.config.cors_origin == "*" {
        CorsLayer::new().allow_origin(Any)
    } else {
        match HeaderValue::from_str(&state.config.cors_origin) {
            Ok(origin) => CorsLayer::new().allow_origin(origin),
            Err(_) => CorsLayer::new(),
        }
    }
    .allow_methods(Any)
    .allow_headers(Any);
    let limit = state.config.max_body_bytes();
    Router::new()
        .route("/health", get(health))
        .route("/config", get(config))
        .route("/query", post(query))
        .route("/items/{id}", get(item))
        .route("/items/{id}/audio", get(item_audio))
        .route("/items/{id}/scalogram.png", get(item_scalogram))
        .route("/embedding", get(embedding))
        .layer(DefaultBodyLimit::max(limit))
        .layer(cors)
        .with_state(state)
}

async fn health(State(state): State<AppState>) -> Json<serde_json::Value> {
    Json(json!({ "status": "ok", "items": state.index.len() }))
}

async fn config(State(state): State<AppState>) -> Json<crate::state::PublicConfig> {
    Json(state.public_config())
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ItemView {
    pub id: usize,
    pub path: String,
    pub metadata: NoteMetadata,
    pub audio_url: String,
    pub scalogram_url: String,
}

fn item_view(state: &ServiceState, id: usize) -> ApiResult<ItemView> {
    let it = state.item(id).ok_or_else(|| ApiError::not_found(id))?;
    Ok(ItemView {
        id,
        path: it.path.to_string_lossy().replace('\\', "/"),
        metadata: it.metadata.clone(),
        audio_url: format!("/items/{id}/audio"),
        scalogram_url: format!("/items/{id}/scalogram.png"),
    })
}

async fn item(State(state): State<AppState>, Path(id): Path<usize>) -> ApiResult<Json<ItemView>> {
    item_view(&state, id).map(Json)
}

async fn item_audio(State(state): State<AppState>, Path(id): Path<usize>) -> ApiResult<Response> {
    let path = state.audio_path(id).ok_or_else(|| ApiError::not_found(id))?;
    let bytes = tokio::fs::read(&path)
        .await
        .map_err(|e| ApiError::internal(format!("reading {}: {e}", path.display())))?;
    Ok(([(header::CONTENT_TYPE, "audio/wav")], bytes).into_response())
}

async fn item_scalogram(State(state): State<AppState>, Path(id): Path<usize>) -> ApiResult<Response> {
    let path = state.audio_path(id).ok_or_else(|| ApiError::not_found(id))?;
    let _permit = state.workers.acquire().await.map_err(ApiError::internal)?;
    let png = tokio::task::spawn_blocking(move || -> anyhow::Result<Vec<u8>> {
        let cfg = ScatteringConfig::with_scale(1.0);
        let fb = build_filterbank(&cfg.first)?;
        let w = load_wav(&path)?;
        scalogram_png(&w, &fb, cfg.hop)
    })
    .await
    .map_err(ApiError::internal)?
    .map_err(ApiError::internal)?;
    Ok((
        [
            (header::CONTENT_TYPE, "image/png"),
            (header::CACHE_CONTROL, "public, max-age=86400"),
        ],
        png,
    )
        .into_response())
}

#[derive(Debug, Deserialize)]
pub struct EmbeddingParams {
    pub namespace: Option<String>,
    pub filter: Option<String>,
}

async fn embedding(
    State(state): State<AppState>,
    Query(params): Query<EmbeddingParams>,
) -> ApiResult<Json<serde_json::Value>> {
    let namespace: Namespace = params
        .namespace
        .as_deref()
        .unwrap_or("instrument")
        .parse()
        .map_err(|e: qbe_core::Error| ApiError::bad_request(e.to_string()))?;
    let filter = params.filter.unwrap_or_default();
    filter
        .parse::<qbe_core::embedding::SubsetFilter>()
        .map_err(|e| ApiError::bad_request(e.to_string()))?;
    let _permit = state.workers.acquire().await.map_err(ApiError::internal)?;
    let st = state.clone();
    let f = filter.clone();
    let points = tokio::task::spawn_blocking(move || st.embedding(namespace, &f))
        .await
        .map_err(ApiError::internal)?
        .map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, e.to_string()))?;
    Ok(Json(json!({
        "namespace": namespace,
        "filter": filter,
        "points": *points,
    })))
}

/// JSON form of a query by indexed item.
#[derive(Debug, Default, Deserialize)]
pub struct ItemQuery {
    pub item: Option<usize>,
    pub k: Option<usize>,
    pub exclude_self: Option<bool>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ResultView {
    pub rank: usize,
    pub distance: f64,
    #[serde(flatten)]
    pub item: ItemView,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct QueryResponse {
    /// Indexed item used as the query, or excluded as the upload's source.
    pub query_item: Option<usize>,
    pub k: usize,
    pub descriptor: String,
    pub truncated: bool,
    pub results: Vec<ResultView>,
}

enum QueryInput {
    Item { id: usize, exclude_self: bool },
    /// Uploaded audio, optionally known to be a copy of an indexed item.
    Audio { bytes: Bytes, exclude: Option<usize> },
}

async fn query(State(state): State<AppState>, req: Request) -> ApiResult<Json<QueryResponse>> {
    let content_type = req
        .headers()
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .unwrap_or("")
        .to_ascii_lowercase();
    let (input, k) = if content_type.starts_with("multipart/form-data") {
        let multipart = Multipart::from_request(req, &state)
            .await
            .map_err(|e| ApiError::new(e.status(), e.body_text()))?;
        read_multipart(multipart).await?
    } else if content_type.starts_with("application/json") {
        let Json(body) = Json::<ItemQuery>::from_request(req, &state)
            .await
            .map_err(|e| ApiError::new(e.status(), e.body_text()))?;
        let id = body
            .item
            .ok_or_else(|| ApiError::bad_request("JSON query needs an \"item\" id"))?;
        (
            QueryInput::Item {
                id,
                exclude_self: body.exclude_self.unwrap_or(true),
            },
            body.k,
        )
    } else if content_type.starts_with("audio/") || content_type == "application/octet-stream" {
        let bytes = Bytes::from_request(req, &state)
            .await
            .map_err(|e| ApiError::new(e.status(), e.body_text()))?;
        (QueryInput::Audio { bytes, exclude: None }, None)
    } else {
        return Err(ApiError::new(
            StatusCode::UNSUPPORTED_MEDIA_TYPE,
            "send multipart/form-data, application/json or audio/wav",
        ));
    };
    let k = k.unwrap_or(state.config.default_k);
    if k == 0 {
        return Err(ApiError::bad_request("k must be at least 1"));
    }
    let (result, query_item) = match input {
        QueryInput::Item { id, exclude_self } => {
            let q = state.index.vector(id).ok_or_else(|| ApiError::not_found(id))?;
            let exclude: &[usize] = if exclude_self { &[id] } else { &[] };
            (state.query_vector(&q, k, exclude).map_err(ApiError::internal)?, Some(id))
        }
        QueryInput::Audio { bytes, exclude } => {
            if let Some(id) = exclude {
                state.item(id).ok_or_else(|| ApiError::not_found(id))?;
            }
            (query_audio(&state, bytes, k, exclude).await?, exclude)
        }
    };
    Ok(Json(respond(&state, result, k, query_item)?))
}

async fn read_multipart(mut multipart: Multipart) -> ApiResult<(QueryInput, Option<usize>)> {
    let mut audio = None;
    let mut item = None;
    let mut k = None;
    let mut exclude_self = true;
    let field_err = |e: axum::extract::multipart::MultipartError| ApiError::new(e.status(), e.body_text());
    while let Some(field) = multipart.next_field().await.map_err(field_err)? {
        let name = field.name().unwrap_or("").to_string();
        match name.as_str() {
            "audio" | "file" => audio = Some(field.bytes().await.map_err(field_err)?),
            "item" | "k" | "exclude_self" => {
                let text = field.text().await.map_err(field_err)?;
                let text = text.trim();
                match name.as_str() {
                    "item" => {
                        item = Some(text.parse().map_err(|_| ApiError::bad_request(format!("bad item id {text:?}")))?)
                    }
                    "k" => k = Some(text.parse().map_err(|_| ApiError::bad_request(format!("bad k {text:?}")))?),
                    _ => {
                        exclude_self = matches!(text, "1" | "true" | "on" | "yes");
                    }
                }
            }
            _ => {}
        }
    }
    let input = match (audio, item) {
        (Some(bytes), item) => QueryInput::Audio {
            bytes,
            exclude: item.filter(|_| exclude_self),
        },
        (None, Some(id)) => QueryInput::Item { id, exclude_self },
        (None, None) => return Err(ApiError::bad_request("expected an \"audio\" file or an \"item\" id")),
    };
    Ok((input, k))
}

/// Checks the declared duration before decoding, then extracts in a worker.
async fn query_audio(state: &AppState, bytes: Bytes, k: usize, exclude: Option<usize>) -> ApiResult<QueryResult> {
    let info = wav_info(Cursor::new(&bytes[..]))
        .map_err(|e| ApiError::bad_request(format!("undecodable audio: {e}")))?;
    let limit = state.config.max_audio_seconds;
    if info.duration() > limit {
        return Err(ApiError::new(
            StatusCode::PAYLOAD_TOO_LARGE,
            format!("audio lasts {:.1} s; the limit is {limit} s", info.duration()),
        ));
    }
    let _permit = state.workers.acquire().await.map_err(ApiError::internal)?;
    let st = state.clone();
    tokio::task::spawn_blocking(move || -> ApiResult<QueryResult> {
        let w = decode_wav(Cursor::new(&bytes[..]))
            .map_err(|e| ApiError::bad_request(format!("undecodable audio: {e}")))?;
        let q = st
            .features_for(&w)
            .map_err(|e| ApiError::bad_request(format!("cannot analyze audio: {e}")))?;
        st.query_vector(&q, k, exclude.as_slice()).map_err(ApiError::internal)
    })
    .await
    .map_err(ApiError::internal)?
}

fn respond(state: &ServiceState, result: QueryResult, k: usize, query_item: Option<usize>) -> ApiResult<QueryResponse> {
    let results = result
        .ranked
        .iter()
        .enumerate()
        .map(|(rank, &(id, distance))| {
            Ok(ResultView {
                rank: rank + 1,
                distance,
                item: item_view(state, id)?,
            })
        })
        .collect::<ApiResult<_>>()?;
    Ok(QueryResponse {
        query_item,
        k,
        descriptor: state.index.descriptor().to_string(),
        truncated: result.truncated,
        results,
    })
}
