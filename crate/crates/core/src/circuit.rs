//! Bandwidth-weighted relay selection and per-AS observation probabilities.

use std::collections::{BTreeMap, BTreeSet};

use rand::distributions::{Distribution, WeightedIndex};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::asdb::{attribute_asn, AsTopology, Asn, PrefixTable};
use crate::consensus::{ConsensusSnapshot, Fingerprint, RelayRecord};
use crate::scalar::Scalar;

/// Rejections tolerated by [`sample_circuit`] before giving up.
pub const MAX_CIRCUIT_RETRIES: usize = 1_000;

/// Directory fetches per client per day: one per three-hour validity window.
pub const DEFAULT_FETCHES_PER_DAY: u64 = 8;

/// AS number used for relays no prefix covers.
pub const UNRESOLVED_ASN: Asn = 0;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CircuitError {
    #[error("eligible {0:?} relays have zero total bandwidth")]
    ZeroTotalBandwidth(Role),
    #[error("relay {0} is not in the snapshot")]
    UnknownRelay(Fingerprint),
    #[error("relay {0} is not eligible for the {1:?} position")]
    NotEligible(Fingerprint, Role),
    #[error("no circuit satisfies the selection constraints after {0} attempts")]
    NoFeasibleCircuit(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Role {
    Guard,
    Middle,
    Exit,
}

impl Role {
    pub fn admits(self, relay: &RelayRecord) -> bool {
        match self {
            Role::Guard => relay.is_guard(),
            Role::Exit => relay.is_exit(),
            Role::Middle => true,
        }
    }
}

/// Probability that `relay` is picked for `role`: its bandwidth over the total
/// bandwidth of the relays eligible for that role.
pub fn selection_weight<S: Scalar>(relay: &RelayRecord, snapshot: &ConsensusSnapshot, role: Role) -> Result<S, CircuitError> {
    if snapshot.relay(&relay.fingerprint).is_none() {
        return Err(CircuitError::UnknownRelay(relay.fingerprint.clone()));
    }
    if !role.admits(relay) {
        return Err(CircuitError::NotEligible(relay.fingerprint.clone(), role));
    }
    let total: u128 = snapshot
        .relays()
        .iter()
        .filter(|r| role.admits(r))
        .map(|r| u128::from(r.bandwidth))
        .sum();
    if total == 0 {
        return Err(CircuitError::ZeroTotalBandwidth(role));
    }
    Ok(S::from_ratio(u128::from(relay.bandwidth), total))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Circuit {
    pub guard: RelayRecord,
    pub middle: RelayRecord,
    pub exit: RelayRecord,
}

/// True when two relays may not share a circuit: same relay, same /16, or same family.
pub fn relays_conflict(a: &RelayRecord, b: &RelayRecord) -> bool {
    a.fingerprint == b.fingerprint
        || a.subnet16() == b.subnet16()
        || matches!((&a.family, &b.family), (Some(x), Some(y)) if x == y)
}

impl Circuit {
    /// Checks the circuit invariants: position flags, and pairwise distinct
    /// relays, /16 networks and families.
    pub fn is_valid(&self) -> bool {
        self.guard.is_guard()
            && self.exit.is_exit()
            && !relays_conflict(&self.guard, &self.middle)
            && !relays_conflict(&self.guard, &self.exit)
            && !relays_conflict(&self.middle, &self.exit)
    }
}

fn weighted<'a>(candidates: &[&'a RelayRecord]) -> Option<(WeightedIndex<u64>, Vec<&'a RelayRecord>)> {
    let weights: Vec<u64> = candidates.iter().map(|r| r.bandwidth).collect();
    WeightedIndex::new(&weights).ok().map(|w| (w, candidates.to_vec()))
}

/// Draws a circuit: guard among Guard-flagged relays and exit among
/// Exit-flagged relays, each in proportion to bandwidth; the pair is redrawn
/// while it conflicts. The middle is then drawn by bandwidth among the
/// relays compatible with both ends. Deterministic for a given seed.
pub fn sample_circuit(snapshot: &ConsensusSnapshot, rng_seed: u64) -> Result<Circuit, CircuitError> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    sample_circuit_with(snapshot, &mut rng)
}

/// As [`sample_circuit`], drawing from a caller-supplied generator.
pub fn sample_circuit_with<R: rand::Rng + ?Sized>(snapshot: &ConsensusSnapshot, rng: &mut R) -> Result<Circuit, CircuitError> {
    let guards: Vec<&RelayRecord> = snapshot.guards().collect();
    let exits: Vec<&RelayRecord> = snapshot.exits().collect();
    let (guard_dist, guards) = weighted(&guards).ok_or(CircuitError::NoFeasibleCircuit(0))?;
    let (exit_dist, exits) = weighted(&exits).ok_or(CircuitError::NoFeasibleCircuit(0))?;

    for _ in 0..MAX_CIRCUIT_RETRIES {
        let guard = guards[guard_dist.sample(rng)];
        let exit = exits[exit_dist.sample(rng)];
        if relays_conflict(guard, exit) {
            continue;
        }
        let middles: Vec<&RelayRecord> = snapshot
            .relays()
            .iter()
            .filter(|m| !relays_conflict(m, guard) && !relays_conflict(m, exit))
            .collect();
        let Some((middle_dist, middles)) = weighted(&middles) else {
            continue;
        };
        let middle = middles[middle_dist.sample(rng)];
        return Ok(Circuit {
            guard: guard.clone(),
            middle: middle.clone(),
            exit: exit.clone(),
        });
    }
    Err(CircuitError::NoFeasibleCircuit(MAX_CIRCUIT_RETRIES))
}

/// How likely an AS is to hold the guard or the exit of a circuit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AsObservation<S> {
    pub asn: Asn,
    pub guard_probability: S,
    pub exit_probability: S,
    /// Upper bound after adding what the AS can see through its customers.
    pub propagated_guard_upper: S,
    pub propagated_exit_upper: S,
}

impl<S: Scalar> AsObservation<S> {
    pub fn new(asn: Asn, guard_probability: S, exit_probability: S) -> Self {
        AsObservation {
            asn,
            propagated_guard_upper: guard_probability.clone(),
            propagated_exit_upper: exit_probability.clone(),
            guard_probability,
            exit_probability,
        }
    }
}

fn by_exit_desc<S: Scalar>(a: &AsObservation<S>, b: &AsObservation<S>) -> std::cmp::Ordering {
    b.exit_probability
        .partial_cmp(&a.exit_probability)
        .unwrap_or(std::cmp::Ordering::Equal)
        .then(a.asn.cmp(&b.asn))
}

/// Guard and exit probability per AS. Relays are attributed to the smallest
/// origin of their most specific prefix; uncovered relays go to
/// [`UNRESOLVED_ASN`]. Sorted by exit probability, descending.
pub fn as_observation_probabilities<S: Scalar>(snapshot: &ConsensusSnapshot, table: &PrefixTable) -> Vec<AsObservation<S>> {
    let mut guard_bw: BTreeMap<Asn, u128> = BTreeMap::new();
    let mut exit_bw: BTreeMap<Asn, u128> = BTreeMap::new();
    let mut guard_total = 0u128;
    let mut exit_total = 0u128;
    for relay in snapshot.relays() {
        let asn = attribute_asn(relay.address, table).map_or(UNRESOLVED_ASN, |(a, _)| a);
        let bw = u128::from(relay.bandwidth);
        let g = guard_bw.entry(asn).or_default();
        let e = exit_bw.entry(asn).or_default();
        if relay.is_guard() {
            *g += bw;
            guard_total += bw;
        }
        if relay.is_exit() {
            *e += bw;
            exit_total += bw;
        }
    }
    let share = |part: u128, total: u128| {
        if total == 0 {
            S::zero()
        } else {
            S::from_ratio(part, total)
        }
    };
    let mut out: Vec<AsObservation<S>> = guard_bw
        .iter()
        .map(|(asn, g)| AsObservation::new(*asn, share(*g, guard_total), share(exit_bw[asn], exit_total)))
        .collect();
    out.sort_by(by_exit_desc);
    out
}

/// One-hop threat propagation: every provider's upper bounds grow by the base
/// probabilities of its customers. Providers absent from `observations` are
/// added with zero base probability.
pub fn propagate_threat<S: Scalar>(observations: &[AsObservation<S>], topology: &AsTopology) -> Vec<AsObservation<S>> {
    propagate_threat_to_depth(observations, topology, 1)
}

/// Threat propagation through up to `depth` levels of the customer cone.
/// Each descendant contributes once per provider. `depth` 0 leaves the bounds
/// at their base values.
pub fn propagate_threat_to_depth<S: Scalar>(
    observations: &[AsObservation<S>],
    topology: &AsTopology,
    depth: usize,
) -> Vec<AsObservation<S>> {
    let mut rows: BTreeMap<Asn, AsObservation<S>> = observations
        .iter()
        .map(|o| {
            let mut o = o.clone();
            o.propagated_guard_upper = o.guard_probability.clone();
            o.propagated_exit_upper = o.exit_probability.clone();
            (o.asn, o)
        })
        .collect();
    let base: BTreeMap<Asn, (S, S)> = rows
        .values()
        .map(|o| (o.asn, (o.guard_probability.clone(), o.exit_probability.clone())))
        .collect();

    // (provider, descendants it can observe)
    let mut contributions: BTreeMap<Asn, BTreeSet<Asn>> = BTreeMap::new();
    for customer in base.keys() {
        let mut frontier = vec![*customer];
        let mut seen = BTreeSet::from([*customer]);
        for _ in 0..depth {
            let mut next = Vec::new();
            for asn in frontier {
                for provider in topology.providers(asn) {
                    contributions.entry(provider).or_default().insert(*customer);
                    if seen.insert(provider) {
                        next.push(provider);
                    }
                }
            }
            frontier = next;
        }
    }

    for (provider, customers) in contributions {
        let row = rows
            .entry(provider)
            .or_insert_with(|| AsObservation::new(provider, S::zero(), S::zero()));
        for c in customers {
            if c == provider {
                continue;
            }
            let (g, e) = &base[&c];
            row.propagated_guard_upper = row.propagated_guard_upper.clone() + g.clone();
            row.propagated_exit_upper = row.propagated_exit_upper.clone() + e.clone();
        }
    }

    let mut out: Vec<AsObservation<S>> = rows.into_values().collect();
    out.sort_by(by_exit_desc);
    out
}

/// Directory bandwidth spent serving consensus documents, in bytes per day.
pub fn dir_bandwidth_cost<S: Scalar>(n_clients: u64, consensus_bytes: u64, fetches_per_client_per_day: S) -> S {
    S::from_count(u128::from(n_clients)) * S::from_count(u128::from(consensus_bytes)) * fetches_per_client_per_day
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::consensus::{Flag, RelayFlags};
    use chrono::{TimeZone, Utc};
    use num_rational::BigRational;
    use std::net::Ipv4Addr;

    fn relay(n: u8, ip: [u8; 4], flags: &[Flag], bw: u64) -> RelayRecord {
        RelayRecord {
            fingerprint: format!("{:040X}", n).parse().unwrap(),
            nickname: format!("r{n}"),
            address: Ipv4Addr::from(ip),
            or_port: 9001,
            flags: flags.iter().copied().collect::<RelayFlags>(),
            bandwidth: bw,
            family: None,
        }
    }

    fn snapshot(relays: Vec<RelayRecord>) -> ConsensusSnapshot {
        ConsensusSnapshot::new(
            Utc.with_ymd_and_hms(2016, 7, 9, 16, 0, 0).unwrap(),
            Utc.with_ymd_and_hms(2016, 7, 9, 17, 0, 0).unwrap(),
            Utc.with_ymd_and_hms(2016, 7, 9, 19, 0, 0).unwrap(),
            relays,
        )
        .unwrap()
    }

    #[test]
    fn equal_bandwidth_splits_evenly() {
        let s = snapshot(vec![
            relay(1, [1, 1, 1, 1], &[Flag::Guard], 500),
            relay(2, [2, 2, 2, 2], &[Flag::Guard], 500),
        ]);
        for r in s.relays() {
            assert_eq!(selection_weight::<f64>(r, &s, Role::Guard).unwrap(), 0.5);
        }
    }

    #[test]
    fn table_bandwidths_weight() {
        let s = snapshot(vec![
            relay(1, [46, 246, 46, 27], &[Flag::Guard], 26000),
            relay(2, [46, 246, 32, 223], &[Flag::Guard], 144),
            relay(3, [197, 231, 221, 211], &[Flag::Guard], 573000),
        ]);
        let w: BigRational = selection_weight(&s.relays()[0], &s, Role::Guard).unwrap();
        assert_eq!(w, BigRational::from_ratio(26000, 599144));
        let wf: f64 = selection_weight(&s.relays()[0], &s, Role::Guard).unwrap();
        assert!((wf - 0.0434).abs() < 5e-5);
    }

    #[test]
    fn single_relay_weight_is_one() {
        let s = snapshot(vec![relay(1, [1, 1, 1, 1], &[Flag::Exit], 3)]);
        assert_eq!(selection_weight::<f64>(&s.relays()[0], &s, Role::Exit).unwrap(), 1.0);
        assert_eq!(
            selection_weight::<f64>(&s.relays()[0], &s, Role::Guard),
            Err(CircuitError::NotEligible(s.relays()[0].fingerprint.clone(), Role::Guard))
        );
    }

    #[test]
    fn zero_bandwidth() {
        let s = snapshot(vec![relay(1, [1, 1, 1, 1], &[Flag::Exit], 0)]);
        assert_eq!(
            selection_weight::<f64>(&s.relays()[0], &s, Role::Exit),
            Err(CircuitError::ZeroTotalBandwidth(Role::Exit))
        );
    }

    #[test]
    fn forced_circuit() {
        let s = snapshot(vec![
            relay(1, [10, 1, 0, 1], &[Flag::Guard], 10),
            relay(2, [10, 2, 0, 1], &[Flag::Exit], 10),
            relay(3, [10, 3, 0, 1], &[], 10),
        ]);
        for seed in 0..50 {
            let c = sample_circuit(&s, seed).unwrap();
            assert_eq!(c.guard.nickname, "r1");
            assert_eq!(c.exit.nickname, "r2");
            assert_eq!(c.middle.nickname, "r3");
        }
    }

    #[test]
    fn shared_subnet_is_infeasible() {
        let s = snapshot(vec![
            relay(1, [10, 1, 0, 1], &[Flag::Guard], 10),
            relay(2, [10, 1, 0, 2], &[Flag::Exit], 10),
            relay(3, [10, 1, 0, 3], &[], 10),
        ]);
        assert_eq!(sample_circuit(&s, 1), Err(CircuitError::NoFeasibleCircuit(MAX_CIRCUIT_RETRIES)));
    }

    #[test]
    fn family_members_never_share_a_circuit() {
        let mut a = relay(1, [10, 1, 0, 1], &[Flag::Guard], 10);
        let mut b = relay(2, [10, 2, 0, 1], &[Flag::Exit], 10);
        a.family = Some("fam".into());
        b.family = Some("fam".into());
        let s = snapshot(vec![a, b, relay(3, [10, 3, 0, 1], &[], 10)]);
        assert!(sample_circuit(&s, 3).is_err());
    }

    #[test]
    fn deterministic_per_seed() {
        let s = snapshot(
            (1..=8)
                .map(|i| relay(i, [10, i, 0, 1], &[Flag::Guard, Flag::Exit], u64::from(i) * 10))
                .collect(),
        );
        assert_eq!(sample_circuit(&s, 42), sample_circuit(&s, 42));
    }

    #[test]
    fn one_as_holds_everything() {
        let table: PrefixTable = crate::asdb::load_prefix_table(b"10.0.0.0\t8\t65000\n").unwrap();
        let s = snapshot(vec![
            relay(1, [10, 1, 0, 1], &[Flag::Guard], 10),
            relay(2, [10, 2, 0, 1], &[Flag::Exit], 30),
        ]);
        let obs: Vec<AsObservation<BigRational>> = as_observation_probabilities(&s, &table);
        assert_eq!(obs.len(), 1);
        assert_eq!(obs[0].guard_probability, BigRational::from_count(1));
        assert_eq!(obs[0].exit_probability, BigRational::from_count(1));
    }

    #[test]
    fn unresolved_relays_use_sentinel() {
        let table = crate::asdb::load_prefix_table(b"10.0.0.0\t8\t65000\n").unwrap();
        let s = snapshot(vec![
            relay(1, [10, 1, 0, 1], &[Flag::Guard], 10),
            relay(2, [11, 2, 0, 1], &[Flag::Guard, Flag::Exit], 30),
        ]);
        let obs: Vec<AsObservation<f64>> = as_observation_probabilities(&s, &table);
        let sentinel = obs.iter().find(|o| o.asn == UNRESOLVED_ASN).unwrap();
        assert_eq!(sentinel.guard_probability, 0.75);
        assert_eq!(sentinel.exit_probability, 1.0);
    }

    #[test]
    fn provider_without_customers_keeps_base() {
        let topo = crate::asdb::load_as_relationships(b"1|2|-1\n").unwrap();
        let obs = vec![AsObservation::new(1, 0.25f64, 0.5)];
        let out = propagate_threat(&obs, &topo);
        assert_eq!(out, obs);
    }

    #[test]
    fn depth_zero_changes_nothing() {
        let topo = crate::asdb::load_as_relationships(b"1|2|-1\n").unwrap();
        let obs = vec![AsObservation::new(1, 0.25f64, 0.5), AsObservation::new(2, 0.5, 0.25)];
        let mut out = propagate_threat_to_depth(&obs, &topo, 0);
        out.sort_by_key(|o| o.asn);
        assert_eq!(out, obs);
    }

    #[test]
    fn two_hop_propagation_reaches_grand_provider() {
        let topo = crate::asdb::load_as_relationships(b"1|2|-1\n2|3|-1\n").unwrap();
        let obs = vec![AsObservation::new(3, BigRational::from_ratio(1, 10), BigRational::from_ratio(2, 10))];
        let one = propagate_threat(&obs, &topo);
        assert!(one.iter().all(|o| o.asn != 1));
        let two = propagate_threat_to_depth(&obs, &topo, 2);
        let top = two.iter().find(|o| o.asn == 1).unwrap();
        assert_eq!(top.propagated_guard_upper, BigRational::from_ratio(1, 10));
        assert_eq!(top.guard_probability, BigRational::from_count(0));
    }

    #[test]
    fn dir_cost_unit_and_linear() {
        assert_eq!(dir_bandwidth_cost(1, 1, 1.0f64), 1.0);
        assert_eq!(dir_bandwidth_cost(2, 5, 3.0f64), 2.0 * dir_bandwidth_cost(1, 5, 3.0f64));
    }
}
