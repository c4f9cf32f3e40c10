use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant, SystemTime};

use asmon_core::service::{DbHandle, QueryRequest, ServiceError};
use axum::body::Bytes;
use axum::extract::{ConnectInfo, Request, State};
use axum::http::{header, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use serde_json::json;

/// Token bucket per client connection.
#[derive(Debug)]
pub struct RateLimiter {
    rate: f64,
    buckets: Mutex<HashMap<Option<SocketAddr>, Bucket>>,
}

#[derive(Debug, Clone, Copy)]
struct Bucket {
    tokens: f64,
    last: Instant,
}

impl RateLimiter {
    pub fn new(per_second: u32) -> Self {
        RateLimiter {
            rate: f64::from(per_second.max(1)),
            buckets: Mutex::new(HashMap::new()),
        }
    }

    pub fn try_acquire(&self, peer: Option<SocketAddr>, now: Instant) -> bool {
        let mut buckets = self.buckets.lock().unwrap_or_else(|e| e.into_inner());
        if buckets.len() > 10_000 {
            let stale = Duration::from_secs(60);
            buckets.retain(|_, b| now.duration_since(b.last) < stale);
        }
        let b = buckets.entry(peer).or_insert(Bucket {
            tokens: self.rate,
            last: now,
        });
        let elapsed = now.saturating_duration_since(b.last).as_secs_f64();
        b.tokens = (b.tokens + elapsed * self.rate).min(self.rate);
        b.last = now;
        if b.tokens >= 1.0 {
            b.tokens -= 1.0;
            true
        } else {
            false
        }
    }
}

/// Aggregate counts only; nothing about individual requests is kept.
#[derive(Debug, Default)]
pub struct Counters {
    pub queries: AtomicU64,
    pub errors: AtomicU64,
}

#[derive(Clone)]
pub struct AppState {
    pub db: Arc<DbHandle>,
    pub limiter: Arc<RateLimiter>,
    pub counters: Option<Arc<Counters>>,
}

impl AppState {
    pub fn new(db: Arc<DbHandle>, rate: u32) -> Self {
        AppState {
            db,
            limiter: Arc::new(RateLimiter::new(rate)),
            counters: None,
        }
    }
}

fn json_response(status: StatusCode, body: String) -> Response {
    (status, [(header::CONTENT_TYPE, "application/json")], body).into_response()
}

fn error_response(err: &ServiceError) -> Response {
    let kind = match err {
        ServiceError::EmptySuspectSet => "EmptySuspectSet",
        ServiceError::UnknownDestination(_) => "UnknownDestination",
        ServiceError::MalformedAsNumber(_) => "MalformedAsNumber",
        ServiceError::NoDatabaseLoaded => "NoDatabaseLoaded",
        ServiceError::ValidationFailed(_) => "ValidationFailed",
    };
    let status = StatusCode::from_u16(err.status_code()).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
    json_response(status, json!({"error": kind, "message": err.to_string()}).to_string())
}

async fn unsafe_exits(State(state): State<AppState>, body: Bytes) -> Response {
    if let Some(c) = &state.counters {
        c.queries.fetch_add(1, Ordering::Relaxed);
    }
    let response = match serde_json::from_slice::<QueryRequest>(&body) {
        Ok(req) => match state.db.query(&req) {
            Ok(resp) => return json_response(StatusCode::OK, resp.to_json()),
            Err(e) => error_response(&e),
        },
        Err(e) => json_response(
            StatusCode::BAD_REQUEST,
            json!({"error": "MalformedRequest", "message": e.to_string()}).to_string(),
        ),
    };
    if let Some(c) = &state.counters {
        c.errors.fetch_add(1, Ordering::Relaxed);
    }
    response
}

async fn health(State(state): State<AppState>) -> Response {
    let mut body = json!({"status": "ok", "db_loaded": state.db.current().is_some()});
    if let Some(c) = &state.counters {
        body["queries"] = c.queries.load(Ordering::Relaxed).into();
        body["errors"] = c.errors.load(Ordering::Relaxed).into();
    }
    json_response(StatusCode::OK, body.to_string())
}

async fn db_info(State(state): State<AppState>) -> Response {
    match state.db.info() {
        Ok(info) => json_response(StatusCode::OK, serde_json::to_string(&info).expect("info serializes")),
        Err(e) => error_response(&e),
    }
}

async fn rate_limit(State(state): State<AppState>, req: Request, next: Next) -> Response {
    let peer = req.extensions().get::<ConnectInfo<SocketAddr>>().map(|c| c.0);
    if !state.limiter.try_acquire(peer, Instant::now()) {
        return json_response(
            StatusCode::TOO_MANY_REQUESTS,
            json!({"error": "RateLimited", "message": "slow down"}).to_string(),
        );
    }
    next.run(req).await
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/v1/unsafe-exits", post(unsafe_exits))
        .route("/v1/health", get(health))
        .route("/v1/db-info", get(db_info))
        .layer(middleware::from_fn_with_state(state.clone(), rate_limit))
        .with_state(state)
}

/// Polls `path` and swaps in the database whenever the file's mtime changes.
/// A file that fails to load or validate leaves the current database serving.
pub async fn watch_database(db: Arc<DbHandle>, path: PathBuf, every: Duration) {
    let mtime = |p: &PathBuf| std::fs::metadata(p).and_then(|m| m.modified()).ok();
    let mut seen: Option<SystemTime> = mtime(&path);
    let mut ticker = tokio::time::interval(every);
    loop {
        ticker.tick().await;
        let now = mtime(&path);
        if now.is_none() || now == seen {
            continue;
        }
        seen = now;
        let loaded = {
            let path = path.clone();
            tokio::task::spawn_blocking(move || crate::cli::load_db(&path)).await
        };
        match loaded {
            Ok(Ok(next)) => match db.swap_database(next) {
                Ok(at) => eprintln!("swapped in database built {at}"),
                Err(e) => eprintln!("keeping current database: {e}"),
            },
            Ok(Err(e)) => eprintln!("keeping current database: {e:#}"),
            Err(e) => eprintln!("reload task failed: {e}"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bucket_refills() {
        let limiter = RateLimiter::new(2);
        let t0 = Instant::now();
        assert!(limiter.try_acquire(None, t0));
        assert!(limiter.try_acquire(None, t0));
        assert!(!limiter.try_acquire(None, t0));
        assert!(limiter.try_acquire(None, t0 + Duration::from_millis(600)));
        let other: SocketAddr = "10.0.0.1:5000".parse().unwrap();
        assert!(limiter.try_acquire(Some(other), t0));
    }
}
