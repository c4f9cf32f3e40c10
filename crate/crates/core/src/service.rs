//! Query handling shared by the CLI and the HTTP server: request parsing,
//! torrc emission and atomic database replacement.

use std::net::Ipv4Addr;
use std::sync::Arc;

use arc_swap::ArcSwapOption;
use chrono::{DateTime, SecondsFormat, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::anti_raptor::{unsafe_exits, PathDb, QueryError, SuspectSet};
use crate::asdb::Asn;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ServiceError {
    #[error("suspect AS set is empty")]
    EmptySuspectSet,
    #[error("unknown destination `{0}`")]
    UnknownDestination(String),
    #[error("`{0}` is not an AS number")]
    MalformedAsNumber(String),
    #[error("no path database is loaded")]
    NoDatabaseLoaded,
    #[error("database rejected: {0}")]
    ValidationFailed(String),
}

impl ServiceError {
    /// HTTP status class for the error.
    pub fn status_code(&self) -> u16 {
        match self {
            ServiceError::EmptySuspectSet
            | ServiceError::UnknownDestination(_)
            | ServiceError::MalformedAsNumber(_)
            | ServiceError::ValidationFailed(_) => 400,
            ServiceError::NoDatabaseLoaded => 503,
        }
    }
}

impl From<QueryError> for ServiceError {
    fn from(e: QueryError) -> Self {
        match e {
            QueryError::EmptySuspectSet => ServiceError::EmptySuspectSet,
            QueryError::UnknownDestination(d) => ServiceError::UnknownDestination(d),
            QueryError::InvalidDatabase(m) => ServiceError::ValidationFailed(m),
        }
    }
}

/// An AS number as a user may type it: `1103`, `"1103"` or `"AS1103"`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AsnInput {
    Number(u64),
    Text(String),
}

impl AsnInput {
    pub fn parse(&self) -> Result<Asn, ServiceError> {
        let malformed = || ServiceError::MalformedAsNumber(self.to_string());
        match self {
            AsnInput::Number(n) => Asn::try_from(*n).map_err(|_| malformed()),
            AsnInput::Text(t) => {
                let t = t.trim();
                let digits = t
                    .strip_prefix("AS")
                    .or_else(|| t.strip_prefix("as"))
                    .unwrap_or(t);
                if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
                    return Err(malformed());
                }
                digits.parse().map_err(|_| malformed())
            }
        }
    }
}

impl std::fmt::Display for AsnInput {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AsnInput::Number(n) => write!(f, "{n}"),
            AsnInput::Text(t) => f.write_str(t),
        }
    }
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryRequest {
    pub suspect_asns: Vec<AsnInput>,
    /// IPv4 address, catalog host or label.
    pub destination: String,
    #[serde(default = "default_true")]
    pub include_inconclusive: bool,
    #[serde(default)]
    pub strict: bool,
}

impl QueryRequest {
    pub fn new(suspects: impl IntoIterator<Item = Asn>, destination: impl Into<String>) -> Self {
        QueryRequest {
            suspect_asns: suspects.into_iter().map(|a| AsnInput::Number(u64::from(a))).collect(),
            destination: destination.into(),
            include_inconclusive: true,
            strict: false,
        }
    }

    pub fn suspects(&self) -> Result<SuspectSet, ServiceError> {
        let asns = self
            .suspect_asns
            .iter()
            .map(AsnInput::parse)
            .collect::<Result<Vec<_>, _>>()?;
        Ok(SuspectSet::new(asns)?)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TorrcSnippet {
    pub lines: Vec<String>,
    pub exit_count: usize,
}

impl TorrcSnippet {
    pub fn render(&self) -> String {
        let mut out = self.lines.join("\n");
        out.push('\n');
        out
    }
}

/// Builds the torrc lines excluding `exits`. Input is sorted and deduplicated
/// here, so callers may pass any order.
pub fn emit_torrc(exits: &[Ipv4Addr], strict: bool) -> TorrcSnippet {
    let mut ips = exits.to_vec();
    ips.sort();
    ips.dedup();
    if ips.is_empty() {
        return TorrcSnippet {
            lines: vec!["# no exits to exclude".to_string()],
            exit_count: 0,
        };
    }
    let list: Vec<String> = ips.iter().map(Ipv4Addr::to_string).collect();
    let mut lines = vec![format!("ExcludeExitNodes {}", list.join(","))];
    if strict {
        lines.push("StrictNodes 1".to_string());
    }
    TorrcSnippet {
        lines,
        exit_count: ips.len(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryResponse {
    pub suspects: Vec<Asn>,
    pub destination: Ipv4Addr,
    pub unsafe_exits: Vec<Ipv4Addr>,
    pub inconclusive_exits: Vec<Ipv4Addr>,
    pub safe_count: usize,
    pub torrc: String,
    pub db_built_at: String,
}

impl QueryResponse {
    /// Canonical JSON body.
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("response serializes")
    }
}

fn timestamp(t: DateTime<Utc>) -> String {
    t.to_rfc3339_opts(SecondsFormat::Secs, true)
}

/// Answers one request against one database. Pure in (request, db).
pub fn handle_query(request: &QueryRequest, db: &PathDb) -> Result<QueryResponse, ServiceError> {
    let suspects = request.suspects()?;
    let destination = db.resolve_destination(&request.destination)?.ip;
    let report = unsafe_exits(&suspects, destination, db)?;
    let mut excluded = report.unsafe_exits.clone();
    if request.include_inconclusive {
        excluded.extend(&report.inconclusive_exits);
    }
    let torrc = emit_torrc(&excluded, request.strict);
    Ok(QueryResponse {
        suspects: suspects.asns().iter().copied().collect(),
        destination,
        unsafe_exits: report.unsafe_exits,
        inconclusive_exits: report.inconclusive_exits,
        safe_count: report.safe_count,
        torrc: torrc.render(),
        db_built_at: timestamp(report.snapshot_id),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DbInfo {
    pub built_at: String,
    pub topology_version: String,
    pub k: usize,
    pub exits: usize,
    pub destinations: usize,
    pub entries: usize,
}

impl DbInfo {
    pub fn of(db: &PathDb) -> Self {
        DbInfo {
            built_at: timestamp(db.built_at),
            topology_version: db.topology_version.clone(),
            k: db.k,
            exits: db.exits.len(),
            destinations: db.destinations.len(),
            entries: db.entries.len(),
        }
    }
}

/// The currently served database. Readers load an `Arc` without locking, so
/// a swap never waits on queries and a query always finishes on the db it
/// started with.
#[derive(Debug, Default)]
pub struct DbHandle {
    current: ArcSwapOption<PathDb>,
}

impl DbHandle {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_database(db: PathDb) -> Result<Self, ServiceError> {
        let handle = Self::new();
        handle.swap_database(db)?;
        Ok(handle)
    }

    pub fn current(&self) -> Option<Arc<PathDb>> {
        self.current.load_full()
    }

    /// Validates and installs `db`. On failure the previous db keeps serving.
    pub fn swap_database(&self, db: PathDb) -> Result<DateTime<Utc>, ServiceError> {
        db.validate().map_err(|e| ServiceError::ValidationFailed(e.to_string()))?;
        let built_at = db.built_at;
        self.current.store(Some(Arc::new(db)));
        Ok(built_at)
    }

    pub fn query(&self, request: &QueryRequest) -> Result<QueryResponse, ServiceError> {
        let db = self.current().ok_or(ServiceError::NoDatabaseLoaded)?;
        handle_query(request, &db)
    }

    pub fn info(&self) -> Result<DbInfo, ServiceError> {
        self.current().map(|db| DbInfo::of(&db)).ok_or(ServiceError::NoDatabaseLoaded)
    }
}
