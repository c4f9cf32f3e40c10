//! The safety check: a circuit is only safe when no AS sits on both the
//! client-to-guard path and the exit-to-destination path.
//!
//! Queries run against a [`PathDb`], a precomputed table of exit-side AS sets
//! for every (exit relay, destination) pair.

use std::collections::{BTreeMap, BTreeSet};
use std::net::Ipv4Addr;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::asdb::Asn;
use crate::consensus::Fingerprint;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum QueryError {
    #[error("suspect AS set is empty")]
    EmptySuspectSet,
    #[error("destination {0} is not in the database catalog")]
    UnknownDestination(String),
    #[error("invalid path database: {0}")]
    InvalidDatabase(String),
}

/// The ASes a user suspects on the client side. Order and duplicates in the
/// input do not matter.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<Asn>", into = "Vec<Asn>")]
pub struct SuspectSet(BTreeSet<Asn>);

impl SuspectSet {
    pub fn new(asns: impl IntoIterator<Item = Asn>) -> Result<Self, QueryError> {
        let set: BTreeSet<Asn> = asns.into_iter().collect();
        if set.is_empty() {
            return Err(QueryError::EmptySuspectSet);
        }
        Ok(SuspectSet(set))
    }

    pub fn asns(&self) -> &BTreeSet<Asn> {
        &self.0
    }

    pub fn contains(&self, asn: Asn) -> bool {
        self.0.contains(&asn)
    }
}

impl TryFrom<Vec<Asn>> for SuspectSet {
    type Error = QueryError;

    fn try_from(value: Vec<Asn>) -> Result<Self, Self::Error> {
        SuspectSet::new(value)
    }
}

impl From<SuspectSet> for Vec<Asn> {
    fn from(value: SuspectSet) -> Self {
        value.0.into_iter().collect()
    }
}

/// True iff the two AS sets are disjoint.
pub fn circuit_is_safe(client_side: &BTreeSet<Asn>, exit_side: &BTreeSet<Asn>) -> bool {
    client_side.is_disjoint(exit_side)
}

/// The ASes that can observe both ends.
pub fn overlap(client_side: &BTreeSet<Asn>, exit_side: &BTreeSet<Asn>) -> BTreeSet<Asn> {
    client_side.intersection(exit_side).copied().collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExitInfo {
    pub fingerprint: Fingerprint,
    pub address: Ipv4Addr,
    /// Origins of the exit's address; empty when no prefix covers it.
    pub asns: BTreeSet<Asn>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Destination {
    pub ip: Ipv4Addr,
    /// Origins of the destination address; empty when no prefix covers it.
    pub asns: BTreeSet<Asn>,
    pub label: Option<String>,
    pub host: Option<String>,
}

/// Precomputed exit-side AS sets. An empty set marks a pair whose inference
/// failed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PathDb {
    pub built_at: DateTime<Utc>,
    /// Content hash of the topology the entries were inferred from.
    pub topology_version: String,
    pub exits: BTreeMap<Fingerprint, ExitInfo>,
    pub destinations: BTreeMap<Ipv4Addr, Destination>,
    pub entries: BTreeMap<(Fingerprint, Ipv4Addr), BTreeSet<Asn>>,
    /// Paths per direction the entries were built with.
    pub k: usize,
}

impl PathDb {
    pub fn empty(built_at: DateTime<Utc>, topology_version: impl Into<String>, k: usize) -> Self {
        PathDb {
            built_at,
            k,
            topology_version: topology_version.into(),
            exits: BTreeMap::new(),
            destinations: BTreeMap::new(),
            entries: BTreeMap::new(),
        }
    }

    pub fn exit_count(&self) -> usize {
        self.exits.len()
    }

    /// Finds a catalog destination by IPv4 address, host name or label.
    pub fn resolve_destination(&self, key: &str) -> Result<&Destination, QueryError> {
        let key = key.trim();
        if let Ok(ip) = key.parse::<Ipv4Addr>() {
            return self
                .destinations
                .get(&ip)
                .ok_or_else(|| QueryError::UnknownDestination(key.to_string()));
        }
        self.destinations
            .values()
            .find(|d| d.host.as_deref() == Some(key))
            .or_else(|| self.destinations.values().find(|d| d.label.as_deref() == Some(key)))
            .ok_or_else(|| QueryError::UnknownDestination(key.to_string()))
    }

    /// Checks structural invariants: entries reference known exits and
    /// destinations, and every non-empty set contains both endpoint ASes.
    pub fn validate(&self) -> Result<(), QueryError> {
        let bad = |m: String| Err(QueryError::InvalidDatabase(m));
        for (fp, info) in &self.exits {
            if fp != &info.fingerprint {
                return bad(format!("exit keyed {fp} carries fingerprint {}", info.fingerprint));
            }
        }
        for (ip, dest) in &self.destinations {
            if ip != &dest.ip {
                return bad(format!("destination keyed {ip} carries address {}", dest.ip));
            }
        }
        for ((fp, ip), set) in &self.entries {
            let Some(exit) = self.exits.get(fp) else {
                return bad(format!("entry for unknown exit {fp}"));
            };
            let Some(dest) = self.destinations.get(ip) else {
                return bad(format!("entry for unknown destination {ip}"));
            };
            if set.is_empty() {
                continue;
            }
            for asn in exit.asns.iter().chain(&dest.asns) {
                if !set.contains(asn) {
                    return bad(format!("entry {fp}|{ip} is missing endpoint AS{asn}"));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnsafeExitReport {
    pub suspects: SuspectSet,
    pub destination: Ipv4Addr,
    /// Exits whose AS set meets the suspects, ascending by address.
    pub unsafe_exits: Vec<Ipv4Addr>,
    /// Exits with no usable AS set, ascending by address.
    pub inconclusive_exits: Vec<Ipv4Addr>,
    pub safe_count: usize,
    pub snapshot_id: DateTime<Utc>,
}

/// Classifies every exit in `db` for one destination.
pub fn unsafe_exits(suspects: &SuspectSet, destination: Ipv4Addr, db: &PathDb) -> Result<UnsafeExitReport, QueryError> {
    if !db.destinations.contains_key(&destination) {
        return Err(QueryError::UnknownDestination(destination.to_string()));
    }
    let mut unsafe_list = Vec::new();
    let mut inconclusive = Vec::new();
    let mut safe_count = 0usize;
    for (fp, exit) in &db.exits {
        match db.entries.get(&(fp.clone(), destination)) {
            None => inconclusive.push(exit.address),
            Some(set) if set.is_empty() => inconclusive.push(exit.address),
            Some(set) if !suspects.asns().is_disjoint(set) => unsafe_list.push(exit.address),
            Some(_) => safe_count += 1,
        }
    }
    unsafe_list.sort();
    inconclusive.sort();
    Ok(UnsafeExitReport {
        suspects: suspects.clone(),
        destination,
        unsafe_exits: unsafe_list,
        inconclusive_exits: inconclusive,
        safe_count,
        snapshot_id: db.built_at,
    })
}

/// First safe circuit in a fastest-first list, if any.
pub fn filter_prebuilt_circuits<C>(circuits: &[(C, BTreeSet<Asn>, BTreeSet<Asn>)]) -> Option<&C> {
    circuits
        .iter()
        .find(|(_, client, exit)| circuit_is_safe(client, exit))
        .map(|(c, _, _)| c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;

    fn set(v: &[Asn]) -> BTreeSet<Asn> {
        v.iter().copied().collect()
    }

    #[test]
    fn empty_client_side_is_safe() {
        assert!(circuit_is_safe(&set(&[]), &set(&[1, 2, 3])));
    }

    #[test]
    fn shared_transit_is_unsafe() {
        let client = set(&[2516, 3257, 8001, 63949]);
        let exit = set(&[43350, 3257, 2516, 2510]);
        assert!(!circuit_is_safe(&client, &exit));
        assert_eq!(overlap(&client, &exit), set(&[2516, 3257]));
    }

    #[test]
    fn disjoint_is_safe() {
        assert!(circuit_is_safe(&set(&[1103]), &set(&[43350, 174, 2914, 2510])));
    }

    #[test]
    fn identical_sets_are_unsafe() {
        assert!(!circuit_is_safe(&set(&[7]), &set(&[7])));
    }

    #[test]
    fn suspect_set_semantics() {
        assert_eq!(SuspectSet::new([3, 1, 1]).unwrap(), SuspectSet::new([1, 3]).unwrap());
        assert_eq!(SuspectSet::new([]), Err(QueryError::EmptySuspectSet));
        let parsed: Result<SuspectSet, _> = serde_json::from_str("[]");
        assert!(parsed.is_err());
    }

    #[test]
    fn prebuilt_circuit_order() {
        let unsafe_pair = (set(&[1]), set(&[1]));
        let safe_pair = (set(&[1]), set(&[2]));
        let circuits = vec![
            ("a", unsafe_pair.0.clone(), unsafe_pair.1.clone()),
            ("b", unsafe_pair.0.clone(), unsafe_pair.1.clone()),
            ("c", safe_pair.0.clone(), safe_pair.1.clone()),
        ];
        assert_eq!(filter_prebuilt_circuits(&circuits), Some(&"c"));
        assert_eq!(filter_prebuilt_circuits(&circuits[..2]), None);
        let first_safe = vec![("x", safe_pair.0.clone(), safe_pair.1.clone()), circuits[0].clone()];
        assert_eq!(filter_prebuilt_circuits(&first_safe), Some(&"x"));
    }

    fn fp(n: u8) -> Fingerprint {
        format!("{:040X}", n).parse().unwrap()
    }

    #[test]
    fn report_partitions_exits() {
        let dest: Ipv4Addr = "141.0.174.41".parse().unwrap();
        let mut db = PathDb::empty(Utc.with_ymd_and_hms(2016, 7, 23, 16, 0, 0).unwrap(), "t", 5);
        db.destinations.insert(
            dest,
            Destination {
                ip: dest,
                asns: set(&[9]),
                label: None,
                host: None,
            },
        );
        for (n, ip, asns) in [
            (1u8, [192, 42, 116, 16], Some(vec![1, 1103, 9])),
            (2, [10, 0, 0, 2], Some(vec![2, 9])),
            (3, [10, 0, 0, 3], Some(vec![])),
            (4, [10, 0, 0, 4], None),
        ] {
            db.exits.insert(
                fp(n),
                ExitInfo {
                    fingerprint: fp(n),
                    address: Ipv4Addr::from(ip),
                    asns: set(&[u32::from(n)]),
                },
            );
            if let Some(asns) = asns {
                db.entries.insert((fp(n), dest), asns.into_iter().collect());
            }
        }
        db.validate().unwrap();
        let report = unsafe_exits(&SuspectSet::new([1103]).unwrap(), dest, &db).unwrap();
        assert_eq!(report.unsafe_exits, vec![Ipv4Addr::new(192, 42, 116, 16)]);
        assert_eq!(
            report.inconclusive_exits,
            vec![Ipv4Addr::new(10, 0, 0, 3), Ipv4Addr::new(10, 0, 0, 4)]
        );
        assert_eq!(report.safe_count, 1);

        let none = unsafe_exits(&SuspectSet::new([64512]).unwrap(), dest, &db).unwrap();
        assert!(none.unsafe_exits.is_empty());
        assert_eq!(none.safe_count, 2);

        assert!(matches!(
            unsafe_exits(&SuspectSet::new([1]).unwrap(), Ipv4Addr::new(8, 8, 8, 8), &db),
            Err(QueryError::UnknownDestination(_))
        ));
    }

    #[test]
    fn validation_catches_missing_endpoint() {
        let dest = Ipv4Addr::new(1, 1, 1, 1);
        let mut db = PathDb::empty(Utc.with_ymd_and_hms(2016, 1, 1, 0, 0, 0).unwrap(), "t", 5);
        db.destinations.insert(dest, Destination { ip: dest, asns: set(&[5]), label: None, host: None });
        db.exits.insert(fp(1), ExitInfo { fingerprint: fp(1), address: dest, asns: set(&[6]) });
        db.entries.insert((fp(1), dest), set(&[6]));
        assert!(db.validate().is_err());
        db.entries.insert((fp(1), dest), set(&[5, 6]));
        assert!(db.validate().is_ok());
        db.entries.insert((fp(2), dest), set(&[]));
        assert!(db.validate().is_err());
    }
}
