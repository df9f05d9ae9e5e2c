//! HTTP endpoints against an index built from the synthetic corpus.

use std::path::PathBuf;
use std::sync::{Arc, OnceLock};

use axum::body::Body;
use axum::http::{header, Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use qbe_core::corpus::{write_corpus, Namespace};
use qbe_core::features::FeatureSpec;
use qbe_core::metric::LmnnConfig;
use qbe_core::pipeline::{build_index, compress_archive, extract_archive, save_index, train_metric};
use qbe_core::signal::{encode_wav, synth_corpus, Waveform, SynthCorpusConfig, CANONICAL_RATE};
use qbe_service::http::QueryResponse;
use qbe_service::{router, ServiceConfig, ServiceState};
use serde_json::Value;
use tower::ServiceExt;

struct Fixture {
    _dir: tempfile::TempDir,
    state: Arc<ServiceState>,
    corpus_root: PathBuf,
}

/// Synthetic corpus on disk, T = 1 s scattering, LMNN trained on instruments.
fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let corpus_root = dir.path().join("corpus");
        let notes = synth_corpus(&SynthCorpusConfig::default(), CANONICAL_RATE, 7).unwrap();
        let manifest = write_corpus(&corpus_root, &notes, &Namespace::ALL).unwrap();
        let raw = extract_archive(&manifest, &FeatureSpec::scattering(1.0)).unwrap();
        let archive = compress_archive(&raw).unwrap();
        let metric = train_metric(&archive, &manifest, Namespace::Instrument, &LmnnConfig::default())
            .unwrap()
            .metric;
        let index = build_index(&archive, &manifest, Some(metric)).unwrap();
        let index_dir = dir.path().join("index");
        save_index(&index_dir, &index, &archive, &manifest).unwrap();
        let config = ServiceConfig {
            index_dir,
            ..ServiceConfig::default()
        };
        Fixture {
            state: Arc::new(ServiceState::load(config).unwrap()),
            corpus_root,
            _dir: dir,
        }
    })
}

fn app() -> Router {
    router(fixture().state.clone())
}

async fn send(req: Request<Body>) -> (StatusCode, Vec<u8>, Option<String>) {
    let resp = app().oneshot(req).await.unwrap();
    let status = resp.status();
    let ctype = resp
        .headers()
        .get(header::CONTENT_TYPE)
        .map(|v| v.to_str().unwrap().to_string());
    let body = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, body, ctype)
}

async fn get(uri: &str) -> (StatusCode, Vec<u8>, Option<String>) {
    send(Request::get(uri).body(Body::empty()).unwrap()).await
}

const BOUNDARY: &str = "qbe-test-boundary";

/// Multipart body with an optional WAV part and text fields.
fn multipart(audio: Option<&[u8]>, fields: &[(&str, String)]) -> Request<Body> {
    let mut body = Vec::new();
    for (name, value) in fields {
        body.extend_from_slice(
            format!("--{BOUNDARY}\r\nContent-Disposition: form-data; name=\"{name}\"\r\n\r\n{value}\r\n").as_bytes(),
        );
    }
    if let Some(bytes) = audio {
        body.extend_from_slice(
            format!(
                "--{BOUNDARY}\r\nContent-Disposition: form-data; name=\"audio\"; filename=\"q.wav\"\r\nContent-Type: audio/wav\r\n\r\n"
            )
            .as_bytes(),
        );
        body.extend_from_slice(bytes);
        body.extend_from_slice(b"\r\n");
    }
    body.extend_from_slice(format!("--{BOUNDARY}--\r\n").as_bytes());
    Request::post("/query")
        .header(header::CONTENT_TYPE, format!("multipart/form-data; boundary={BOUNDARY}"))
        .body(Body::from(body))
        .unwrap()
}

fn json_query(body: Value) -> Request<Body> {
    Request::post("/query")
        .header(header::CONTENT_TYPE, "application/json")
        .body(Body::from(body.to_string()))
        .unwrap()
}

/// A 16-bit mono header declaring `seconds` of audio followed by only a few samples.
fn header_only_wav(seconds: u32) -> Vec<u8> {
    let rate = 22_050u32;
    let data_len = seconds * rate * 2;
    let mut b = Vec::new();
    b.extend_from_slice(b"RIFF");
    b.extend_from_slice(&(36 + data_len).to_le_bytes());
    b.extend_from_slice(b"WAVEfmt ");
    b.extend_from_slice(&16u32.to_le_bytes());
    b.extend_from_slice(&1u16.to_le_bytes());
    b.extend_from_slice(&1u16.to_le_bytes());
    b.extend_from_slice(&rate.to_le_bytes());
    b.extend_from_slice(&(rate * 2).to_le_bytes());
    b.extend_from_slice(&2u16.to_le_bytes());
    b.extend_from_slice(&16u16.to_le_bytes());
    b.extend_from_slice(b"data");
    b.extend_from_slice(&data_len.to_le_bytes());
    b.extend_from_slice(&[0u8; 64]);
    b
}

#[tokio::test]
async fn health_and_config() {
    let (status, body, _) = get("/health").await;
    assert_eq!(status, StatusCode::OK);
    let v: Value = serde_json::from_slice(&body).unwrap();
    assert_eq!(v["items"], 400);
    let (status, body, _) = get("/config").await;
    assert_eq!(status, StatusCode::OK);
    let v: Value = serde_json::from_slice(&body).unwrap();
    assert_eq!(v["metric"], "lmnn");
    assert_eq!(v["averaging_scale"], 1.0);
    assert_eq!(v["max_audio_seconds"], 30.0);
}

#[tokio::test]
async fn unknown_ids_are_404() {
    for uri in ["/items/400", "/items/123456/audio", "/items/999/scalogram.png"] {
        assert_eq!(get(uri).await.0, StatusCode::NOT_FOUND, "{uri}");
    }
    let (status, _, _) = send(json_query(serde_json::json!({ "item": 400, "k": 5 }))).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn item_metadata_and_audio() {
    let (status, body, _) = get("/items/3").await;
    assert_eq!(status, StatusCode::OK);
    let v: Value = serde_json::from_slice(&body).unwrap();
    assert_eq!(v["id"], 3);
    assert_eq!(v["audio_url"], "/items/3/audio");
    let path = v["path"].as_str().unwrap().to_string();
    let (status, audio, ctype) = get("/items/3/audio").await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(ctype.as_deref(), Some("audio/wav"));
    assert_eq!(audio, std::fs::read(fixture().corpus_root.join(path)).unwrap());
}

#[tokio::test]
async fn hour_long_header_is_413() {
    let (status, _, _) = send(multipart(Some(&header_only_wav(3600)), &[])).await;
    assert_eq!(status, StatusCode::PAYLOAD_TOO_LARGE);
}

#[tokio::test]
async fn real_overlong_file_is_413() {
    let w = Waveform::new(vec![0.01; 31 * CANONICAL_RATE as usize], CANONICAL_RATE).unwrap();
    let (status, _, _) = send(multipart(Some(&encode_wav(&w)), &[])).await;
    assert_eq!(status, StatusCode::PAYLOAD_TOO_LARGE);
}

#[tokio::test]
async fn body_over_the_byte_cap_is_413() {
    let cap = fixture().state.config.max_body_bytes();
    let junk = vec![0u8; cap + 1024];
    let req = Request::post("/query")
        .header(header::CONTENT_TYPE, "audio/wav")
        .body(Body::from(junk))
        .unwrap();
    assert_eq!(send(req).await.0, StatusCode::PAYLOAD_TOO_LARGE);
}

#[tokio::test]
async fn undecodable_audio_is_400() {
    let (status, body, _) = send(multipart(Some(b"definitely not a riff file"), &[])).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let v: Value = serde_json::from_slice(&body).unwrap();
    assert!(v["error"].as_str().unwrap().contains("undecodable"));
    let (status, _, _) = send(multipart(None, &[])).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _, _) = send(json_query(serde_json::json!({ "item": 1, "k": 0 }))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn item_query_excludes_self_and_is_sorted() {
    let (status, body, _) = send(json_query(serde_json::json!({ "item": 10, "k": 5 }))).await;
    assert_eq!(status, StatusCode::OK);
    let r: QueryResponse = serde_json::from_slice(&body).unwrap();
    assert_eq!(r.results.len(), 5);
    assert!(r.results.iter().all(|x| x.item.id != 10));
    assert!(r.results.windows(2).all(|w| w[0].distance <= w[1].distance));
    assert_eq!(r.results[0].item.scalogram_url, format!("/items/{}/scalogram.png", r.results[0].item.id));
    // multipart form of the same query gives the same answer
    let (_, body2, _) = send(multipart(None, &[("item", "10".into()), ("k", "5".into())])).await;
    assert_eq!(body, body2);
    // without exclusion the item finds itself at distance zero
    let (_, body3, _) = send(json_query(serde_json::json!({ "item": 10, "k": 1, "exclude_self": false }))).await;
    let r3: QueryResponse = serde_json::from_slice(&body3).unwrap();
    assert_eq!(r3.results[0].item.id, 10);
    assert_eq!(r3.results[0].distance, 0.0);
}

#[tokio::test]
async fn repeated_queries_are_identical() {
    let audio = std::fs::read(fixture().state.audio_path(42).unwrap()).unwrap();
    let (s1, a, _) = send(multipart(Some(&audio), &[("k", "5".into())])).await;
    let (s2, b, _) = send(multipart(Some(&audio), &[("k", "5".into())])).await;
    assert_eq!((s1, s2), (StatusCode::OK, StatusCode::OK));
    assert_eq!(a, b);
    // the stored file queries back to its own row
    let r: QueryResponse = serde_json::from_slice(&a).unwrap();
    assert_eq!(r.results[0].item.id, 42);
    assert!(r.results[0].distance < 1e-3, "self distance {}", r.results[0].distance);
}

#[tokio::test]
async fn self_audio_queries_find_same_instrument() {
    let state = &fixture().state;
    let n = state.index.len();
    let mut agree = 0;
    for id in 0..n {
        let audio = std::fs::read(state.audio_path(id).unwrap()).unwrap();
        let fields = [("item", id.to_string()), ("k", "5".into()), ("exclude_self", "true".into())];
        let (status, body, _) = send(multipart(Some(&audio), &fields)).await;
        assert_eq!(status, StatusCode::OK);
        let r: QueryResponse = serde_json::from_slice(&body).unwrap();
        assert_eq!(r.results.len(), 5);
        assert!(r.results.iter().all(|x| x.item.id != id));
        let own = state.item(id).unwrap().metadata.label(Namespace::Instrument);
        if r.results[0].item.metadata.label(Namespace::Instrument) == own {
            agree += 1;
        }
    }
    let rate = agree as f64 / n as f64;
    assert!(rate >= 0.95, "top result shares the instrument for {agree}/{n}");
}

#[tokio::test]
async fn scalogram_png_is_deterministic() {
    let (status, a, ctype) = get("/items/5/scalogram.png").await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(ctype.as_deref(), Some("image/png"));
    let (_, b, _) = get("/items/5/scalogram.png").await;
    assert_eq!(a, b);
    assert_eq!(&a[1..4], b"PNG");
}

#[tokio::test]
async fn embedding_of_a_subset() {
    let (status, body, _) = get("/embedding?namespace=technique&filter=technique=tremolo|vibrato").await;
    assert_eq!(status, StatusCode::OK);
    let v: Value = serde_json::from_slice(&body).unwrap();
    let points = v["points"].as_array().unwrap();
    assert_eq!(points.len(), 200);
    assert!(points
        .iter()
        .all(|p| p["label"] == "tremolo" || p["label"] == "vibrato"));
    let (_, again, _) = get("/embedding?namespace=technique&filter=technique=tremolo|vibrato").await;
    assert_eq!(body, again);
    assert_eq!(get("/embedding?namespace=colour").await.0, StatusCode::BAD_REQUEST);
    assert_eq!(get("/embedding?filter=nonsense").await.0, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn cors_headers_present() {
    let req = Request::get("/health")
        .header(header::ORIGIN, "http://localhost:5173")
        .body(Body::empty())
        .unwrap();
    let resp = app().oneshot(req).await.unwrap();
    assert_eq!(
        resp.headers().get(header::ACCESS_CONTROL_ALLOW_ORIGIN).unwrap(),
        "*"
    );
}
