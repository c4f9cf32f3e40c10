use std::collections::BTreeSet;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use asmon::cli::load_db;
use asmon::server::{router, AppState, Counters};
use asmon_core::service::DbHandle;
use axum::body::Body;
use axum::extract::ConnectInfo;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use serde_json::Value;
use tower::ServiceExt;

fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn loaded() -> Arc<DbHandle> {
    let db = load_db(&fixtures().join("world/fx_db.pathdb")).unwrap();
    Arc::new(DbHandle::with_database(db).unwrap())
}

async fn send(state: &AppState, method: &str, uri: &str, body: &str, peer: u16) -> (StatusCode, Value) {
    let mut req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(Body::from(body.to_string()))
        .unwrap();
    let addr: SocketAddr = format!("127.0.0.1:{peer}").parse().unwrap();
    req.extensions_mut().insert(ConnectInfo(addr));
    let resp = router(state.clone()).oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (status, serde_json::from_slice(&bytes).unwrap())
}

const QUERY: &str = r#"{"suspect_asns":["AS1103"],"destination":"141.0.174.41"}"#;

#[tokio::test]
async fn query_matches_cli_golden() {
    let state = AppState::new(loaded(), 1000);
    let (status, body) = send(&state, "POST", "/v1/unsafe-exits", QUERY, 1).await;
    assert_eq!(status, StatusCode::OK);
    let golden: Value =
        serde_json::from_str(&std::fs::read_to_string(fixtures().join("golden/query_1103.json")).unwrap()).unwrap();
    assert_eq!(body, golden);
}

#[tokio::test]
async fn suspect_order_does_not_matter() {
    let state = AppState::new(loaded(), 1000);
    let a = r#"{"suspect_asns":[1103, "AS3356", "as174"],"destination":"adult"}"#;
    let b = r#"{"suspect_asns":["174", 3356, 1103, 1103],"destination":"141.0.174.41"}"#;
    let (sa, ba) = send(&state, "POST", "/v1/unsafe-exits", a, 1).await;
    let (sb, bb) = send(&state, "POST", "/v1/unsafe-exits", b, 1).await;
    assert_eq!((sa, sb), (StatusCode::OK, StatusCode::OK));
    assert_eq!(ba, bb);
}

#[tokio::test]
async fn client_errors_are_400() {
    let state = AppState::new(loaded(), 1000);
    let cases = [
        (r#"{"suspect_asns":[],"destination":"adult"}"#, "EmptySuspectSet"),
        (r#"{"suspect_asns":["ASx"],"destination":"adult"}"#, "MalformedAsNumber"),
        (r#"{"suspect_asns":[1103],"destination":"10.1.1.1"}"#, "UnknownDestination"),
        (r#"{"suspect_asns":"#, "MalformedRequest"),
    ];
    for (body, kind) in cases {
        let (status, resp) = send(&state, "POST", "/v1/unsafe-exits", body, 2).await;
        assert_eq!(status, StatusCode::BAD_REQUEST, "{body}");
        assert_eq!(resp["error"], kind);
    }
}

#[tokio::test]
async fn no_database_is_503() {
    let state = AppState::new(Arc::new(DbHandle::new()), 1000);
    let (status, body) = send(&state, "POST", "/v1/unsafe-exits", QUERY, 3).await;
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);
    assert_eq!(body["error"], "NoDatabaseLoaded");
    let (status, _) = send(&state, "GET", "/v1/db-info", "", 3).await;
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);
    let (status, health) = send(&state, "GET", "/v1/health", "", 3).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(health["db_loaded"], false);
}

#[tokio::test]
async fn health_and_info() {
    let mut state = AppState::new(loaded(), 1000);
    state.counters = Some(Arc::new(Counters::default()));
    send(&state, "POST", "/v1/unsafe-exits", QUERY, 4).await;
    send(&state, "POST", "/v1/unsafe-exits", "{}", 4).await;
    let (_, health) = send(&state, "GET", "/v1/health", "", 4).await;
    assert_eq!(health["status"], "ok");
    assert_eq!(health["db_loaded"], true);
    assert_eq!((health["queries"].as_u64(), health["errors"].as_u64()), (Some(2), Some(1)));
    let (status, info) = send(&state, "GET", "/v1/db-info", "", 4).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(info["exits"], 6);
    assert_eq!(info["destinations"], 3);
    assert_eq!(info["entries"], 18);
}

#[tokio::test]
async fn each_connection_gets_its_own_budget() {
    let state = AppState::new(loaded(), 3);
    let mut codes = Vec::new();
    for _ in 0..5 {
        codes.push(send(&state, "GET", "/v1/health", "", 5).await.0);
    }
    assert_eq!(&codes[..3], &[StatusCode::OK; 3]);
    assert_eq!(codes[4], StatusCode::TOO_MANY_REQUESTS);
    assert_eq!(send(&state, "GET", "/v1/health", "", 6).await.0, StatusCode::OK);
}

fn listing(dir: &std::path::Path) -> BTreeSet<(PathBuf, u64)> {
    walk(dir).into_iter().collect()
}

fn walk(dir: &std::path::Path) -> Vec<(PathBuf, u64)> {
    let mut out = Vec::new();
    if let Ok(entries) = std::fs::read_dir(dir) {
        for e in entries.flatten() {
            let meta = e.metadata().unwrap();
            if meta.is_dir() {
                out.extend(walk(&e.path()));
            } else {
                out.push((e.path(), meta.len()));
            }
        }
    }
    out
}

#[tokio::test]
async fn queries_leave_no_trace_on_disk() {
    let watched = [fixtures(), std::env::temp_dir()];
    let before: Vec<_> = watched.iter().map(|d| listing(d)).collect();
    let state = AppState::new(loaded(), 1000);
    for i in 0..50 {
        let body = format!(r#"{{"suspect_asns":[{}],"destination":"adult"}}"#, 1000 + i);
        send(&state, "POST", "/v1/unsafe-exits", &body, 7).await;
    }
    let after: Vec<_> = watched.iter().map(|d| listing(d)).collect();
    assert_eq!(before[0], after[0]);
    // other tests may write temp files concurrently; none may mention a query
    for (path, _) in after[1].difference(&before[1]) {
        let text = std::fs::read_to_string(path).unwrap_or_default();
        assert!(!text.contains("1003"), "{}", path.display());
    }
}
