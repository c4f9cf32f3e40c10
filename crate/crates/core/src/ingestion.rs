//! Inputs to the query database: user traceroutes, destination catalogs, and
//! building, refreshing and persisting the [`PathDb`].

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::net::Ipv4Addr;

use chrono::{DateTime, NaiveDateTime, SubsecRound, Utc};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::anti_raptor::{Destination, ExitInfo, PathDb};
use crate::asdb::{ip_to_asn, AsTopology, Asn, PrefixTable};
use crate::consensus::{ConsensusSnapshot, Fingerprint};
use crate::path_inference::{infer_paths_with, DistanceMap};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum IngestError {
    #[error("traceroute line {line} is not in the `-a` (bracketed AS) dialect")]
    UnrecognizedDialect { line: usize },
    #[error("traceroute contains no hops")]
    NoHops,
    #[error("catalog row {row}: {reason}")]
    MalformedCatalog { row: usize, reason: String },
    #[error("path database line {line}: {reason}")]
    MalformedPathDb { line: usize, reason: String },
}

/// One responding (or silent) probe line of a traceroute.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TracerouteHop {
    pub index: u32,
    pub asn: Option<Asn>,
    pub name: Option<String>,
    pub address: Option<Ipv4Addr>,
    pub rtts_ms: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TracerouteReport {
    pub hops: Vec<TracerouteHop>,
    /// Annotated ASes in first-seen order.
    pub as_sequence: Vec<Asn>,
    /// Hops on private address space or without an AS annotation.
    pub private_hops: usize,
}

impl TracerouteReport {
    pub fn as_set(&self) -> BTreeSet<Asn> {
        self.as_sequence.iter().copied().collect()
    }
}

fn parse_as_token(token: &str) -> Option<Option<Asn>> {
    let inner = token.strip_prefix('[')?.strip_suffix(']')?;
    let digits = inner.strip_prefix("AS").or_else(|| inner.strip_prefix("as"))?;
    // `[AS0]` is how traceroute marks an address without a known origin
    match digits.parse::<Asn>().ok()? {
        0 => Some(None),
        asn => Some(Some(asn)),
    }
}

/// Parses the responder part of a hop: `[ASn] name (ip) rtt ms ...`.
fn parse_responder(index: u32, tokens: &[&str]) -> Option<TracerouteHop> {
    let (first, rest) = tokens.split_first()?;
    if *first == "*" {
        return Some(TracerouteHop {
            index,
            asn: None,
            name: None,
            address: None,
            rtts_ms: Vec::new(),
        });
    }
    let asn = parse_as_token(first)?;
    let (name, rest) = rest.split_first()?;
    let (addr_tok, rest) = match rest.split_first() {
        Some((tok, r)) if tok.starts_with('(') => (Some(*tok), r),
        _ => (None, rest),
    };
    let address = match addr_tok {
        Some(tok) => Some(tok.trim_start_matches('(').trim_end_matches(')').parse().ok()?),
        None => name.parse().ok(),
    };
    let rtts_ms = rest
        .windows(2)
        .filter(|w| w[1] == "ms")
        .filter_map(|w| w[0].parse::<f64>().ok())
        .collect();
    Some(TracerouteHop {
        index,
        asn,
        name: Some(name.to_string()),
        address,
        rtts_ms,
    })
}

fn is_private(address: Ipv4Addr) -> bool {
    address.is_private() || address.is_loopback() || address.is_link_local() || (address.octets()[0] == 100 && address.octets()[1] & 0xc0 == 64)
}

/// Parses `traceroute -a` output. Lines before the first hop (shell prompt,
/// the `traceroute to` banner) are skipped; a trailing `\` on a line is
/// ignored. Continuation lines (a further responder for the same hop) start
/// with the AS bracket.
pub fn parse_traceroute(text: &[u8]) -> Result<TracerouteReport, IngestError> {
    let text = String::from_utf8_lossy(text);
    let mut hops: Vec<TracerouteHop> = Vec::new();
    let mut annotated = false;

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim().trim_end_matches('\\').trim();
        if line.is_empty() {
            continue;
        }
        let tokens: Vec<&str> = line.split_ascii_whitespace().collect();
        let hop = if let Ok(index) = tokens[0].parse::<u32>() {
            parse_responder(index, &tokens[1..]).ok_or(IngestError::UnrecognizedDialect { line: line_no })?
        } else if tokens[0].starts_with('[') && !hops.is_empty() {
            let index = hops.last().map(|h| h.index).unwrap_or_default();
            parse_responder(index, &tokens).ok_or(IngestError::UnrecognizedDialect { line: line_no })?
        } else if hops.is_empty() {
            continue;
        } else {
            return Err(IngestError::UnrecognizedDialect { line: line_no });
        };
        annotated |= tokens.iter().any(|t| parse_as_token(t).is_some());
        hops.push(hop);
    }
    if hops.is_empty() {
        return Err(IngestError::NoHops);
    }
    if !annotated {
        return Err(IngestError::UnrecognizedDialect { line: 1 });
    }

    let mut as_sequence = Vec::new();
    let mut private_hops = 0;
    for hop in &hops {
        if let Some(asn) = hop.asn {
            if !as_sequence.contains(&asn) {
                as_sequence.push(asn);
            }
        }
        if hop.asn.is_none() || hop.address.is_some_and(is_private) {
            private_hops += 1;
        }
    }
    Ok(TracerouteReport {
        hops,
        as_sequence,
        private_hops,
    })
}

/// Host name resolution, injected so tests and offline builds need no DNS.
pub trait Resolver {
    fn resolve(&self, host: &str) -> Option<Ipv4Addr>;
}

/// Resolver backed by a fixed table.
#[derive(Debug, Clone, Default)]
pub struct FixtureResolver(pub HashMap<String, Ipv4Addr>);

#[derive(Debug, Deserialize)]
struct HostRow {
    host: String,
    ipv4: Ipv4Addr,
}

impl FixtureResolver {
    /// Loads a `host,ipv4` CSV (header first).
    pub fn from_csv(document: &[u8]) -> Result<Self, IngestError> {
        let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(document);
        let mut map = HashMap::new();
        for (idx, record) in reader.deserialize::<HostRow>().enumerate() {
            let row = record.map_err(|e| IngestError::MalformedCatalog {
                row: idx + 2,
                reason: e.to_string(),
            })?;
            map.insert(row.host, row.ipv4);
        }
        Ok(FixtureResolver(map))
    }
}

impl Resolver for FixtureResolver {
    fn resolve(&self, host: &str) -> Option<Ipv4Addr> {
        self.0.get(host).copied()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CatalogEntry {
    pub label: String,
    pub host: String,
    pub resolved_ip: Ipv4Addr,
    /// Origins of `resolved_ip`; empty when no prefix covers it.
    pub resolved_asns: BTreeSet<Asn>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DestinationCatalog {
    pub entries: Vec<CatalogEntry>,
    pub fetched_at: DateTime<Utc>,
}

#[derive(Debug, Deserialize)]
struct CatalogRow {
    category: String,
    host: String,
    #[serde(default)]
    ipv4: String,
}

fn check_field(row: usize, what: &str, value: &str) -> Result<(), IngestError> {
    if value.is_empty() || value.contains(['|', '\n', '\r']) {
        return Err(IngestError::MalformedCatalog {
            row,
            reason: format!("{what} `{value}` is empty or contains `|` or a line break"),
        });
    }
    Ok(())
}

impl DestinationCatalog {
    /// Loads a `category,host,ipv4` CSV (header first). Rows with an empty
    /// `ipv4` column are resolved through `resolver`.
    pub fn from_csv(
        document: &[u8],
        resolver: &dyn Resolver,
        table: &PrefixTable,
        fetched_at: DateTime<Utc>,
    ) -> Result<Self, IngestError> {
        let mut reader = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(document);
        let mut entries = Vec::new();
        for (idx, record) in reader.deserialize::<CatalogRow>().enumerate() {
            let row = idx + 2;
            let record = record.map_err(|e| IngestError::MalformedCatalog {
                row,
                reason: e.to_string(),
            })?;
            check_field(row, "category", &record.category)?;
            check_field(row, "host", &record.host)?;
            let resolved_ip = if record.ipv4.is_empty() {
                resolver.resolve(&record.host).ok_or_else(|| IngestError::MalformedCatalog {
                    row,
                    reason: format!("cannot resolve `{}`", record.host),
                })?
            } else {
                record.ipv4.parse().map_err(|_| IngestError::MalformedCatalog {
                    row,
                    reason: format!("bad IPv4 `{}`", record.ipv4),
                })?
            };
            entries.push(CatalogEntry {
                label: record.category,
                host: record.host,
                resolved_ip,
                resolved_asns: ip_to_asn(resolved_ip, table).unwrap_or_default(),
            });
        }
        Ok(DestinationCatalog { entries, fetched_at })
    }

    /// Entries whose stored origins disagree with `table`.
    pub fn inconsistent_entries(&self, table: &PrefixTable) -> Vec<&CatalogEntry> {
        self.entries
            .iter()
            .filter(|e| ip_to_asn(e.resolved_ip, table).unwrap_or_default() != e.resolved_asns)
            .collect()
    }
}

fn exit_table(snapshot: &ConsensusSnapshot, table: &PrefixTable) -> BTreeMap<Fingerprint, ExitInfo> {
    snapshot
        .exits()
        .map(|r| {
            let info = ExitInfo {
                fingerprint: r.fingerprint.clone(),
                address: r.address,
                asns: ip_to_asn(r.address, table).unwrap_or_default(),
            };
            (r.fingerprint.clone(), info)
        })
        .collect()
}

fn destination_table(catalog: &DestinationCatalog) -> BTreeMap<Ipv4Addr, Destination> {
    let mut out = BTreeMap::new();
    for e in &catalog.entries {
        out.entry(e.resolved_ip).or_insert_with(|| Destination {
            ip: e.resolved_ip,
            asns: e.resolved_asns.clone(),
            label: Some(e.label.clone()),
            host: Some(e.host.clone()),
        });
    }
    out
}

/// Computes exit-side AS sets for (exit origins, destination origins) pairs,
/// caching per AS pair.
struct EntryComputer<'a> {
    topology: &'a AsTopology,
    k: usize,
    distances: HashMap<Asn, DistanceMap>,
    pairs: HashMap<(Asn, Asn), Option<BTreeSet<Asn>>>,
}

impl<'a> EntryComputer<'a> {
    fn new<'b>(topology: &'a AsTopology, k: usize, work: impl IntoIterator<Item = (&'b BTreeSet<Asn>, &'b BTreeSet<Asn>)>) -> Self {
        let mut pair_keys = BTreeSet::new();
        for (exits, dests) in work {
            for e in exits {
                for d in dests {
                    pair_keys.insert((*e, *d));
                }
            }
        }
        let endpoints: BTreeSet<Asn> = pair_keys
            .iter()
            .flat_map(|(e, d)| [*e, *d])
            .filter(|a| topology.contains(*a))
            .collect();
        let distances: HashMap<Asn, DistanceMap> = endpoints
            .par_iter()
            .map(|a| (*a, DistanceMap::towards(*a, topology).expect("endpoint is in topology")))
            .collect();
        let mut computer = EntryComputer {
            topology,
            k,
            distances,
            pairs: HashMap::new(),
        };
        let pair_keys: Vec<(Asn, Asn)> = pair_keys.into_iter().collect();
        let results: Vec<_> = pair_keys
            .par_iter()
            .map(|&(e, d)| ((e, d), computer.pair_set(e, d)))
            .collect();
        computer.pairs.extend(results);
        computer
    }

    /// Forward and reverse path sets plus both endpoints; `None` when
    /// neither direction has a path.
    fn pair_set(&self, exit: Asn, dest: Asn) -> Option<BTreeSet<Asn>> {
        let (Some(to_dest), Some(to_exit)) = (self.distances.get(&dest), self.distances.get(&exit)) else {
            return None;
        };
        let forward = infer_paths_with(exit, to_dest, self.topology, self.k);
        let reverse = infer_paths_with(dest, to_exit, self.topology, self.k);
        if forward.is_empty() && reverse.is_empty() {
            return None;
        }
        let mut set: BTreeSet<Asn> = forward.into_iter().chain(reverse).flat_map(|p| p.hops).collect();
        set.insert(exit);
        set.insert(dest);
        Some(set)
    }

    fn entry(&self, exits: &BTreeSet<Asn>, dests: &BTreeSet<Asn>) -> BTreeSet<Asn> {
        let mut out = BTreeSet::new();
        for e in exits {
            for d in dests {
                if let Some(Some(set)) = self.pairs.get(&(*e, *d)) {
                    out.extend(set.iter().copied());
                }
            }
        }
        // every origin of either endpoint sits on the path, reachable or not
        if !out.is_empty() {
            out.extend(exits.iter().chain(dests).copied());
        }
        out
    }
}

/// Builds the exit-side AS set for every (exit relay, catalog destination)
/// pair. A pair whose inference fails in both directions gets an empty set.
pub fn build_path_db(
    snapshot: &ConsensusSnapshot,
    catalog: &DestinationCatalog,
    topology: &AsTopology,
    table: &PrefixTable,
    k: usize,
    built_at: DateTime<Utc>,
) -> PathDb {
    refresh_inner(None, snapshot, catalog, topology, table, k, built_at).0
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RefreshStats {
    pub reused: usize,
    pub recomputed: usize,
}

/// Rebuilds `previous` for new inputs, recomputing only entries whose exit or
/// destination is new or whose origin ASes, topology or `k` changed. The result
/// equals a from-scratch [`build_path_db`] on the same inputs.
pub fn refresh(
    previous: &PathDb,
    snapshot: &ConsensusSnapshot,
    catalog: &DestinationCatalog,
    topology: &AsTopology,
    table: &PrefixTable,
    built_at: DateTime<Utc>,
) -> (PathDb, RefreshStats) {
    refresh_inner(Some(previous), snapshot, catalog, topology, table, previous.k, built_at)
}

fn refresh_inner(
    previous: Option<&PathDb>,
    snapshot: &ConsensusSnapshot,
    catalog: &DestinationCatalog,
    topology: &AsTopology,
    table: &PrefixTable,
    k: usize,
    built_at: DateTime<Utc>,
) -> (PathDb, RefreshStats) {
    let version = topology.version();
    let exits = exit_table(snapshot, table);
    let destinations = destination_table(catalog);
    let previous = previous.filter(|p| p.topology_version == version && p.k == k);

    let mut entries = BTreeMap::new();
    let mut todo: Vec<(&ExitInfo, &Destination)> = Vec::new();
    let mut stats = RefreshStats::default();
    for exit in exits.values() {
        for dest in destinations.values() {
            let key = (exit.fingerprint.clone(), dest.ip);
            let carried = previous.and_then(|p| {
                let same_exit = p.exits.get(&exit.fingerprint).is_some_and(|e| e.asns == exit.asns);
                let same_dest = p.destinations.get(&dest.ip).is_some_and(|d| d.asns == dest.asns);
                (same_exit && same_dest).then(|| p.entries.get(&key)).flatten()
            });
            match carried {
                Some(set) => {
                    stats.reused += 1;
                    entries.insert(key, set.clone());
                }
                None => todo.push((exit, dest)),
            }
        }
    }
    stats.recomputed = todo.len();
    if !todo.is_empty() {
        let computer = EntryComputer::new(topology, k, todo.iter().map(|(e, d)| (&e.asns, &d.asns)));
        for (exit, dest) in todo {
            entries.insert((exit.fingerprint.clone(), dest.ip), computer.entry(&exit.asns, &dest.asns));
        }
    }

    let db = PathDb {
        built_at: built_at.trunc_subsecs(0),
        topology_version: version,
        exits,
        destinations,
        entries,
        k,
    };
    (db, stats)
}

const DB_MAGIC: &str = "pathdb-v1";
const DB_TIME_FORMAT: &str = "%Y-%m-%dT%H:%M:%SZ";

fn join_asns(asns: &BTreeSet<Asn>) -> String {
    asns.iter().map(|a| a.to_string()).collect::<Vec<_>>().join(",")
}

/// Writes the database as a flat text file:
///
/// ```text
/// pathdb-v1 built_at=<iso8601>
/// topology|<hash>|<k>
/// exit|<fingerprint>|<ipv4>|<asns>
/// dest|<ipv4>|<asns>|<label>|<host>
/// <exit-fingerprint>|<dest-ip>|<comma-joined-asns-or-empty>
/// ```
pub fn write_path_db(db: &PathDb) -> String {
    let mut out = format!("{DB_MAGIC} built_at={}\n", db.built_at.format(DB_TIME_FORMAT));
    out.push_str(&format!("topology|{}|{}\n", db.topology_version, db.k));
    for exit in db.exits.values() {
        out.push_str(&format!("exit|{}|{}|{}\n", exit.fingerprint, exit.address, join_asns(&exit.asns)));
    }
    for dest in db.destinations.values() {
        out.push_str(&format!(
            "dest|{}|{}|{}|{}\n",
            dest.ip,
            join_asns(&dest.asns),
            dest.label.as_deref().unwrap_or(""),
            dest.host.as_deref().unwrap_or("")
        ));
    }
    for ((fp, ip), asns) in &db.entries {
        out.push_str(&format!("{fp}|{ip}|{}\n", join_asns(asns)));
    }
    out
}

/// Reads a file produced by [`write_path_db`] and validates it.
pub fn read_path_db(text: &str) -> Result<PathDb, IngestError> {
    let mut lines = text.lines().enumerate();
    let bad = |line: usize, reason: &str| IngestError::MalformedPathDb {
        line,
        reason: reason.to_string(),
    };
    let (_, header) = lines.next().ok_or_else(|| bad(1, "empty file"))?;
    let stamp = header
        .strip_prefix(DB_MAGIC)
        .and_then(|r| r.strip_prefix(" built_at="))
        .ok_or_else(|| bad(1, "expected `pathdb-v1 built_at=<time>`"))?;
    let built_at = NaiveDateTime::parse_from_str(stamp, DB_TIME_FORMAT)
        .map_err(|_| bad(1, "bad built_at timestamp"))?
        .and_utc();

    let parse_asns = |line: usize, field: &str| -> Result<BTreeSet<Asn>, IngestError> {
        if field.is_empty() {
            return Ok(BTreeSet::new());
        }
        field
            .split(',')
            .map(|a| a.parse::<Asn>().map_err(|_| bad(line, "bad AS list")))
            .collect()
    };
    let opt = |s: &str| (!s.is_empty()).then(|| s.to_string());

    let mut db = PathDb::empty(built_at, String::new(), 0);
    let mut saw_topology = false;
    for (idx, line) in lines {
        let n = idx + 1;
        let fields: Vec<&str> = line.split('|').collect();
        match fields.as_slice() {
            ["topology", hash, k] => {
                db.topology_version = hash.to_string();
                db.k = k.parse().map_err(|_| bad(n, "bad k"))?;
                saw_topology = true;
            }
            ["exit", fp, ip, asns] => {
                let fingerprint: Fingerprint = fp.parse().map_err(|_| bad(n, "bad fingerprint"))?;
                let info = ExitInfo {
                    fingerprint: fingerprint.clone(),
                    address: ip.parse().map_err(|_| bad(n, "bad exit address"))?,
                    asns: parse_asns(n, asns)?,
                };
                if db.exits.insert(fingerprint, info).is_some() {
                    return Err(bad(n, "duplicate exit"));
                }
            }
            ["dest", ip, asns, label, host] => {
                let ip: Ipv4Addr = ip.parse().map_err(|_| bad(n, "bad destination address"))?;
                let dest = Destination {
                    ip,
                    asns: parse_asns(n, asns)?,
                    label: opt(label),
                    host: opt(host),
                };
                if db.destinations.insert(ip, dest).is_some() {
                    return Err(bad(n, "duplicate destination"));
                }
            }
            [fp, ip, asns] => {
                let fp: Fingerprint = fp.parse().map_err(|_| bad(n, "bad fingerprint"))?;
                let ip: Ipv4Addr = ip.parse().map_err(|_| bad(n, "bad destination address"))?;
                if db.entries.insert((fp, ip), parse_asns(n, asns)?).is_some() {
                    return Err(bad(n, "duplicate entry"));
                }
            }
            _ => return Err(bad(n, "unrecognised record")),
        }
    }
    if !saw_topology {
        return Err(bad(2, "missing topology record"));
    }
    db.validate().map_err(|e| bad(0, &e.to_string()))?;
    Ok(db)
}
