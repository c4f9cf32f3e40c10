//! Slow, obviously-correct reference implementations and random input
//! generators. Test-only.

use std::collections::{BTreeMap, BTreeSet};
use std::net::Ipv4Addr;

use asmon_core::anti_raptor::PathDb;
use asmon_core::asdb::{ip_to_asn, AsTopology, Asn, PrefixTable};
use asmon_core::circuit::relays_conflict;
use asmon_core::consensus::{ConsensusSnapshot, Fingerprint, Flag, RelayFlags, RelayRecord};
use asmon_core::ingestion::{CatalogEntry, DestinationCatalog};
use asmon_core::path_inference::RouteClass;
use chrono::{DateTime, Duration, TimeZone, Utc};
use rand::seq::SliceRandom;
use rand::Rng;

// ---------------------------------------------------------------- paths

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Step {
    Up,
    Across,
    Down,
}

fn step(topology: &AsTopology, a: Asn, b: Asn) -> Option<Step> {
    if topology.providers(a).any(|p| p == b) {
        Some(Step::Up)
    } else if topology.peers(a).any(|p| p == b) {
        Some(Step::Across)
    } else if topology.customers(a).any(|c| c == b) {
        Some(Step::Down)
    } else {
        None
    }
}

/// Valley-free predicate: the step string must read `Up* Across? Down*`.
pub fn valley_free(hops: &[Asn], topology: &AsTopology) -> bool {
    if hops.is_empty() {
        return false;
    }
    let mut steps = Vec::new();
    for w in hops.windows(2) {
        match step(topology, w[0], w[1]) {
            Some(s) => steps.push(s),
            None => return false,
        }
    }
    let ups = steps.iter().take_while(|s| **s == Step::Up).count();
    let rest = &steps[ups..];
    let rest = rest.strip_prefix(&[Step::Across]).unwrap_or(rest);
    rest.iter().all(|s| *s == Step::Down)
}

fn neighbours(topology: &AsTopology, a: Asn) -> Vec<Asn> {
    let mut out: Vec<Asn> = topology
        .providers(a)
        .chain(topology.peers(a))
        .chain(topology.customers(a))
        .collect();
    out.sort_unstable();
    out.dedup();
    out
}

/// Every simple path from `src` to `dst`, in no particular order.
pub fn all_simple_paths(src: Asn, dst: Asn, topology: &AsTopology) -> Vec<Vec<Asn>> {
    fn go(at: Asn, dst: Asn, topology: &AsTopology, stack: &mut Vec<Asn>, out: &mut Vec<Vec<Asn>>) {
        if at == dst {
            out.push(stack.clone());
            return;
        }
        for n in neighbours(topology, at) {
            if stack.contains(&n) {
                continue;
            }
            stack.push(n);
            go(n, dst, topology, stack, out);
            stack.pop();
        }
    }
    let mut out = Vec::new();
    if topology.contains(src) && topology.contains(dst) {
        go(src, dst, topology, &mut vec![src], &mut out);
    }
    out
}

/// All valley-free simple paths ranked by (class of first edge, length, hops).
pub fn ranked_paths(src: Asn, dst: Asn, topology: &AsTopology) -> Vec<(RouteClass, Vec<Asn>)> {
    rank(all_simple_paths(src, dst, topology), topology)
}

/// [`ranked_paths`] for every destination reachable from `src`, from a
/// single exhaustive walk.
pub fn ranked_paths_from(src: Asn, topology: &AsTopology) -> BTreeMap<Asn, Vec<(RouteClass, Vec<Asn>)>> {
    fn go(at: Asn, topology: &AsTopology, stack: &mut Vec<Asn>, out: &mut BTreeMap<Asn, Vec<Vec<Asn>>>) {
        out.entry(at).or_default().push(stack.clone());
        for n in neighbours(topology, at) {
            if stack.contains(&n) {
                continue;
            }
            stack.push(n);
            go(n, topology, stack, out);
            stack.pop();
        }
    }
    let mut paths = BTreeMap::new();
    if topology.contains(src) {
        go(src, topology, &mut vec![src], &mut paths);
    }
    paths.into_iter().map(|(dst, p)| (dst, rank(p, topology))).collect()
}

fn rank(paths: Vec<Vec<Asn>>, topology: &AsTopology) -> Vec<(RouteClass, Vec<Asn>)> {
    let mut ranked: Vec<(RouteClass, Vec<Asn>)> = paths
        .into_iter()
        .filter(|p| valley_free(p, topology))
        .map(|p| {
            let class = if p.len() < 2 {
                RouteClass::Customer
            } else {
                match step(topology, p[0], p[1]) {
                    Some(Step::Down) => RouteClass::Customer,
                    Some(Step::Across) => RouteClass::Peer,
                    _ => RouteClass::Provider,
                }
            };
            (class, p)
        })
        .collect();
    ranked.sort_by(|a, b| (a.0, a.1.len(), &a.1).cmp(&(b.0, b.1.len(), &b.1)));
    ranked
}

/// Random relationship graph on ASes `1..=n`. Every node is present even if
/// isolated. Returns the topology and its as-rel lines.
pub fn random_topology<R: Rng>(rng: &mut R, n: u32, density: f64) -> (AsTopology, Vec<String>) {
    let mut topology = AsTopology::new();
    let mut lines = Vec::new();
    for a in 1..=n {
        topology.add_node(a);
    }
    for a in 1..=n {
        for b in (a + 1)..=n {
            if !rng.gen_bool(density) {
                continue;
            }
            match rng.gen_range(0..3) {
                0 => {
                    topology.add_provider_customer(a, b).expect("fresh pair");
                    lines.push(format!("{a}|{b}|-1"));
                }
                1 => {
                    topology.add_provider_customer(b, a).expect("fresh pair");
                    lines.push(format!("{b}|{a}|-1"));
                }
                _ => {
                    topology.add_peering(a, b).expect("fresh pair");
                    lines.push(format!("{a}|{b}|0"));
                }
            }
        }
    }
    (topology, lines)
}

// ---------------------------------------------------------------- relays

pub fn fingerprint(i: u32) -> Fingerprint {
    Fingerprint::try_from(format!("{i:040X}")).expect("40 hex digits")
}

pub fn flags(list: &[Flag]) -> RelayFlags {
    list.iter().copied().collect()
}

pub fn relay(i: u32, address: Ipv4Addr, relay_flags: RelayFlags, bandwidth: u64) -> RelayRecord {
    RelayRecord {
        fingerprint: fingerprint(i),
        nickname: format!("relay{i}"),
        address,
        or_port: 9001,
        flags: relay_flags,
        bandwidth,
        family: None,
    }
}

pub fn epoch() -> DateTime<Utc> {
    Utc.with_ymd_and_hms(2016, 7, 9, 16, 0, 0).unwrap()
}

pub fn snapshot(relays: Vec<RelayRecord>) -> ConsensusSnapshot {
    let t = epoch();
    ConsensusSnapshot::new(t, t + Duration::hours(1), t + Duration::hours(3), relays).expect("valid snapshot")
}

pub fn random_nickname<R: Rng>(rng: &mut R, len: usize) -> String {
    const ALPHA: &[u8] = b"ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789";
    (0..len).map(|_| ALPHA[rng.gen_range(0..ALPHA.len())] as char).collect()
}

/// A relay with random nickname (1..=19 chars), address, flags and bandwidth.
pub fn random_relay<R: Rng>(rng: &mut R, i: u32) -> RelayRecord {
    let len = rng.gen_range(1..=19);
    let mut f = RelayFlags::empty();
    for flag in Flag::ALL {
        if rng.gen_bool(0.5) {
            f.insert(flag);
        }
    }
    RelayRecord {
        fingerprint: fingerprint(i),
        nickname: random_nickname(rng, len),
        address: Ipv4Addr::from(rng.gen::<u32>()),
        or_port: rng.gen_range(1..=u16::MAX),
        flags: f,
        bandwidth: rng.gen_range(0..10_000_000),
        family: None,
    }
}

// ---------------------------------------------------------------- circuits

#[derive(Debug, Clone, Default)]
pub struct Marginals {
    pub guard: BTreeMap<Fingerprint, f64>,
    pub middle: BTreeMap<Fingerprint, f64>,
    pub exit: BTreeMap<Fingerprint, f64>,
}

/// Exact per-position selection probabilities of the circuit sampler:
/// (guard, exit) drawn by bandwidth and rejected when they conflict or leave
/// no weighted middle, then the middle by bandwidth among compatible relays.
pub fn exact_marginals(snapshot: &ConsensusSnapshot) -> Marginals {
    let relays = snapshot.relays();
    let mut pairs = Vec::new();
    let mut mass = 0.0;
    for g in relays.iter().filter(|r| r.is_guard()) {
        for e in relays.iter().filter(|r| r.is_exit()) {
            if relays_conflict(g, e) {
                continue;
            }
            let middles: Vec<&RelayRecord> = relays
                .iter()
                .filter(|m| !relays_conflict(m, g) && !relays_conflict(m, e))
                .collect();
            let mw: f64 = middles.iter().map(|m| m.bandwidth as f64).sum();
            if mw == 0.0 {
                continue;
            }
            let w = g.bandwidth as f64 * e.bandwidth as f64;
            mass += w;
            pairs.push((g, e, w, middles, mw));
        }
    }
    let mut out = Marginals::default();
    for (g, e, w, middles, mw) in pairs {
        let p = w / mass;
        *out.guard.entry(g.fingerprint.clone()).or_default() += p;
        *out.exit.entry(e.fingerprint.clone()).or_default() += p;
        for m in middles {
            *out.middle.entry(m.fingerprint.clone()).or_default() += p * m.bandwidth as f64 / mw;
        }
    }
    out
}

// ---------------------------------------------------------------- worlds

#[derive(Debug, Clone)]
pub struct CatalogSite {
    pub label: String,
    pub host: String,
    pub ip: Ipv4Addr,
}

/// Everything a path database is built from.
#[derive(Debug, Clone)]
pub struct World {
    pub relays: Vec<RelayRecord>,
    pub sites: Vec<CatalogSite>,
    pub topology: AsTopology,
    pub table: PrefixTable,
    pub n_ases: u32,
    next_id: u32,
}

fn as_address<R: Rng>(rng: &mut R, asn: Asn) -> Ipv4Addr {
    Ipv4Addr::new(20 + asn as u8, rng.gen_range(0..=255), rng.gen_range(0..=255), rng.gen_range(1..=254))
}

impl World {
    pub fn random<R: Rng>(rng: &mut R) -> World {
        let n = rng.gen_range(6..=16);
        let (topology, _) = random_topology(rng, n, 0.3);
        let mut table = PrefixTable::new();
        for asn in 1..=n {
            table.insert(Ipv4Addr::new(20 + asn as u8, 0, 0, 0), 16, [asn]).unwrap();
        }
        let mut world = World {
            relays: Vec::new(),
            sites: Vec::new(),
            topology,
            table,
            n_ases: n,
            next_id: 1,
        };
        for _ in 0..rng.gen_range(2..=7) {
            world.add_relay(rng, true);
        }
        for _ in 0..rng.gen_range(0..=3) {
            world.add_relay(rng, false);
        }
        for _ in 0..rng.gen_range(1..=4) {
            world.add_site(rng);
        }
        world
    }

    fn random_address<R: Rng>(&self, rng: &mut R) -> Ipv4Addr {
        // one address in twenty falls outside every prefix
        if rng.gen_bool(0.05) {
            return Ipv4Addr::new(200, rng.gen(), rng.gen(), 1);
        }
        let asn = rng.gen_range(1..=self.n_ases);
        as_address(rng, asn)
    }

    pub fn add_relay<R: Rng>(&mut self, rng: &mut R, exit: bool) {
        let id = self.next_id;
        self.next_id += 1;
        let f = if exit { flags(&[Flag::Exit, Flag::Fast]) } else { flags(&[Flag::Guard, Flag::Fast]) };
        let addr = self.random_address(rng);
        self.relays.push(relay(id, addr, f, rng.gen_range(1..50_000)));
    }

    pub fn add_site<R: Rng>(&mut self, rng: &mut R) {
        let id = self.next_id;
        self.next_id += 1;
        let ip = self.random_address(rng);
        self.sites.push(CatalogSite {
            label: format!("cat{}", id % 3),
            host: format!("site{id}.example"),
            ip,
        });
    }

    pub fn snapshot(&self) -> ConsensusSnapshot {
        snapshot(self.relays.clone())
    }

    /// The catalog as a fresh load would produce it against the current table.
    pub fn catalog(&self) -> DestinationCatalog {
        DestinationCatalog {
            entries: self
                .sites
                .iter()
                .map(|s| CatalogEntry {
                    label: s.label.clone(),
                    host: s.host.clone(),
                    resolved_ip: s.ip,
                    resolved_asns: ip_to_asn(s.ip, &self.table).unwrap_or_default(),
                })
                .collect(),
            fetched_at: epoch(),
        }
    }

    /// Applies one to three random changes of the kinds seen between hourly
    /// snapshots: relays joining, leaving or moving, catalog edits, routing
    /// changes and new multi-origin announcements.
    pub fn churn<R: Rng>(&mut self, rng: &mut R) -> Vec<&'static str> {
        let mut applied = Vec::new();
        for _ in 0..rng.gen_range(1..=3) {
            match rng.gen_range(0..8) {
                0 => {
                    self.add_relay(rng, true);
                    applied.push("exit joins");
                }
                1 if self.relays.len() > 1 => {
                    let i = rng.gen_range(0..self.relays.len());
                    self.relays.remove(i);
                    applied.push("relay leaves");
                }
                2 if !self.relays.is_empty() => {
                    let addr = self.random_address(rng);
                    let r = self.relays.choose_mut(rng).unwrap();
                    r.address = addr;
                    applied.push("relay moves");
                }
                3 => {
                    self.add_site(rng);
                    applied.push("site added");
                }
                4 if self.sites.len() > 1 => {
                    let i = rng.gen_range(0..self.sites.len());
                    self.sites.remove(i);
                    applied.push("site removed");
                }
                5 => {
                    let a = rng.gen_range(1..=self.n_ases);
                    let b = rng.gen_range(1..=self.n_ases);
                    if a != b && self.topology.relationship(a, b).is_none() {
                        let _ = if rng.gen_bool(0.5) {
                            self.topology.add_peering(a, b)
                        } else {
                            self.topology.add_provider_customer(a, b)
                        };
                        applied.push("route added");
                    }
                }
                6 => {
                    let asn = rng.gen_range(1..=self.n_ases);
                    let other = rng.gen_range(1..=self.n_ases);
                    let sub = Ipv4Addr::new(20 + asn as u8, rng.gen(), 0, 0);
                    let _ = self.table.insert(sub, 17, [asn, other]);
                    applied.push("multi-origin announcement");
                }
                _ => applied.push("no change"),
            }
        }
        applied
    }
}

// ---------------------------------------------------------------- queries

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScanResult {
    pub unsafe_exits: Vec<Ipv4Addr>,
    pub inconclusive: Vec<Ipv4Addr>,
    pub safe: usize,
}

/// Row-by-row scan of the database for one destination.
pub fn linear_scan(suspects: &BTreeSet<Asn>, destination: Ipv4Addr, db: &PathDb) -> ScanResult {
    let mut res = ScanResult {
        unsafe_exits: Vec::new(),
        inconclusive: Vec::new(),
        safe: 0,
    };
    for exit in db.exits.values() {
        let row = db
            .entries
            .iter()
            .find(|((fp, ip), _)| *fp == exit.fingerprint && *ip == destination)
            .map(|(_, set)| set);
        match row {
            Some(set) if !set.is_empty() => {
                if set.iter().any(|a| suspects.contains(a)) {
                    res.unsafe_exits.push(exit.address);
                } else {
                    res.safe += 1;
                }
            }
            _ => res.inconclusive.push(exit.address),
        }
    }
    res.unsafe_exits.sort();
    res.inconclusive.sort();
    res
}

// ---------------------------------------------------------------- numerics

/// Mean-centred least squares: (slope, intercept).
pub fn ols(points: &[(f64, f64)]) -> (f64, f64) {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = points.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = points.iter().map(|(x, _)| (x - mx) * (x - mx)).sum();
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

/// Most specific covering entry by scanning all of them.
pub fn lpm_scan(address: Ipv4Addr, entries: &[(Ipv4Addr, u8, BTreeSet<Asn>)]) -> Option<(Ipv4Addr, u8, BTreeSet<Asn>)> {
    entries
        .iter()
        .filter(|(p, len, _)| {
            let mask = if *len == 0 { 0 } else { u32::MAX << (32 - u32::from(*len)) };
            u32::from(address) & mask == u32::from(*p)
        })
        .max_by_key(|(_, len, _)| *len)
        .cloned()
}
