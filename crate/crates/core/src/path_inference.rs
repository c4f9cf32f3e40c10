//! Valley-free AS path inference over an [`AsTopology`].
//!
//! A path is valley-free when it climbs zero or more customer-to-provider
//! edges, crosses at most one peer edge, then descends zero or more
//! provider-to-customer edges. Candidate paths are ranked by
//!
//! 1. route class, from the first edge leaving the source: a route through a
//!    customer beats one through a peer, which beats one through a provider;
//! 2. fewer hops;
//! 3. lexicographic hop order.
//!
//! The search is a best-first enumeration of simple paths keyed on
//! `(class, hops so far + remaining distance, hops)`. The remaining distance
//! is the exact valley-free distance to the destination with the loop-free
//! requirement relaxed, so it never overestimates and a path is only popped
//! once nothing ranked ahead of it can still be produced.

use std::cmp::Reverse;
use std::collections::{BTreeSet, BinaryHeap, HashMap, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::asdb::{AsTopology, Asn};
use crate::scalar::Scalar;

/// Paths returned per query unless a caller asks otherwise.
pub const DEFAULT_K: usize = 5;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PathError {
    #[error("AS{0} is not in the topology")]
    UnknownAs(Asn),
    #[error("only {reachable} of {sampled} sampled pairs are reachable")]
    InsufficientReachability { reachable: usize, sampled: usize },
    #[error("topology is empty")]
    EmptyTopology,
}

/// Preference class of a route, best first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum RouteClass {
    Customer,
    Peer,
    Provider,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AsPath {
    pub hops: Vec<Asn>,
    pub class: RouteClass,
}

impl AsPath {
    pub fn rank_key(&self) -> (RouteClass, usize) {
        (self.class, self.hops.len())
    }

    pub fn len(&self) -> usize {
        self.hops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hops.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
enum Phase {
    /// Only customer-to-provider edges so far.
    Up,
    /// A peer or provider-to-customer edge has been taken.
    Down,
}

/// Exact relaxed distances (in edges) from every `(AS, phase)` state to one
/// destination. Computing this once per destination lets many sources share it.
#[derive(Debug, Clone)]
pub struct DistanceMap {
    dst: Asn,
    dist: HashMap<(Asn, Phase), u32>,
}

impl DistanceMap {
    pub fn towards(dst: Asn, topology: &AsTopology) -> Result<Self, PathError> {
        if !topology.contains(dst) {
            return Err(PathError::UnknownAs(dst));
        }
        let mut dist = HashMap::new();
        let mut queue = VecDeque::new();
        for phase in [Phase::Up, Phase::Down] {
            dist.insert((dst, phase), 0u32);
            queue.push_back((dst, phase));
        }
        while let Some((v, phase)) = queue.pop_front() {
            let d = dist[&(v, phase)] + 1;
            let mut preds: Vec<(Asn, Phase)> = Vec::new();
            match phase {
                // (u, Up) -c2p-> (v, Up)
                Phase::Up => preds.extend(topology.customers(v).map(|u| (u, Phase::Up))),
                Phase::Down => {
                    preds.extend(topology.peers(v).map(|u| (u, Phase::Up)));
                    for u in topology.providers(v) {
                        preds.push((u, Phase::Up));
                        preds.push((u, Phase::Down));
                    }
                }
            }
            for state in preds {
                if let std::collections::hash_map::Entry::Vacant(slot) = dist.entry(state) {
                    slot.insert(d);
                    queue.push_back(state);
                }
            }
        }
        Ok(DistanceMap { dst, dist })
    }

    pub fn destination(&self) -> Asn {
        self.dst
    }

    fn get(&self, asn: Asn, phase: Phase) -> Option<u32> {
        self.dist.get(&(asn, phase)).copied()
    }
}

/// Valley-free successors of `asn` in `phase`, as `(next, next_phase, class of the edge)`.
fn successors(topology: &AsTopology, asn: Asn, phase: Phase) -> Vec<(Asn, Phase, RouteClass)> {
    let mut out = Vec::new();
    out.extend(topology.customers(asn).map(|c| (c, Phase::Down, RouteClass::Customer)));
    if phase == Phase::Up {
        out.extend(topology.peers(asn).map(|p| (p, Phase::Down, RouteClass::Peer)));
        out.extend(topology.providers(asn).map(|p| (p, Phase::Up, RouteClass::Provider)));
    }
    out
}

type QueueItem = Reverse<(RouteClass, usize, Vec<Asn>, Phase)>;

/// Up to `k` best valley-free, loop-free paths from `src` to `dst`.
pub fn infer_paths(src: Asn, dst: Asn, topology: &AsTopology, k: usize) -> Result<Vec<AsPath>, PathError> {
    if !topology.contains(src) {
        return Err(PathError::UnknownAs(src));
    }
    let distances = DistanceMap::towards(dst, topology)?;
    Ok(infer_paths_with(src, &distances, topology, k))
}

/// As [`infer_paths`], with a precomputed distance map for the destination.
/// An unknown `src` yields no paths.
pub fn infer_paths_with(src: Asn, distances: &DistanceMap, topology: &AsTopology, k: usize) -> Vec<AsPath> {
    let dst = distances.destination();
    if k == 0 || !topology.contains(src) {
        return Vec::new();
    }
    if src == dst {
        return vec![AsPath {
            hops: vec![src],
            class: RouteClass::Customer,
        }];
    }

    let mut heap: BinaryHeap<QueueItem> = BinaryHeap::new();
    // The class of a partial path is fixed by its first edge.
    for (next, phase, class) in successors(topology, src, Phase::Up) {
        if let Some(h) = distances.get(next, phase) {
            heap.push(Reverse((class, 2 + h as usize, vec![src, next], phase)));
        }
    }

    let mut found = Vec::new();
    while let Some(Reverse((class, _, hops, phase))) = heap.pop() {
        let last = *hops.last().expect("paths are never empty");
        if last == dst {
            found.push(AsPath { hops, class });
            if found.len() == k {
                break;
            }
            continue;
        }
        for (next, next_phase, _) in successors(topology, last, phase) {
            if hops.contains(&next) {
                continue;
            }
            let Some(h) = distances.get(next, next_phase) else {
                continue;
            };
            let mut extended = Vec::with_capacity(hops.len() + 1);
            extended.extend_from_slice(&hops);
            extended.push(next);
            let f = extended.len() + h as usize;
            heap.push(Reverse((class, f, extended, next_phase)));
        }
    }
    found
}

/// Union of the hops of the top-`k` inferred paths, endpoints included.
/// Empty when no path exists.
pub fn path_as_set(src: Asn, dst: Asn, topology: &AsTopology, k: usize) -> Result<BTreeSet<Asn>, PathError> {
    Ok(infer_paths(src, dst, topology, k)?
        .into_iter()
        .flat_map(|p| p.hops)
        .collect())
}

/// Checks the valley-free shape of `hops` against the topology: every
/// consecutive pair must be adjacent, and the edge kinds must read
/// up*, peer?, down*.
pub fn is_valley_free(hops: &[Asn], topology: &AsTopology) -> bool {
    use crate::asdb::Relationship::*;
    let mut descending = false;
    for pair in hops.windows(2) {
        match topology.relationship(pair[0], pair[1]) {
            Some(CustomerToProvider) if !descending => {}
            Some(Peer) if !descending => descending = true,
            Some(ProviderToCustomer) => descending = true,
            _ => return false,
        }
    }
    !hops.is_empty()
}

/// Mean hop count of the rank-1 path over reachable `(src, dst)` pairs.
///
/// When `sample_pairs` is at least the number of ordered node pairs, every
/// pair is visited once; otherwise pairs are drawn uniformly with replacement
/// from a generator seeded with `rng_seed`. At least half the visited pairs
/// must be reachable.
pub fn mean_path_length<S: Scalar>(topology: &AsTopology, sample_pairs: usize, rng_seed: u64) -> Result<S, PathError> {
    let nodes: Vec<Asn> = topology.nodes().collect();
    if nodes.is_empty() {
        return Err(PathError::EmptyTopology);
    }
    let n = nodes.len();
    let pairs: Vec<(Asn, Asn)> = if sample_pairs >= n * n {
        nodes
            .iter()
            .flat_map(|a| nodes.iter().map(move |b| (*a, *b)))
            .collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        (0..sample_pairs.max(1))
            .map(|_| (nodes[rng.gen_range(0..n)], nodes[rng.gen_range(0..n)]))
            .collect()
    };

    let mut by_dst: HashMap<Asn, DistanceMap> = HashMap::new();
    let mut total_hops: u128 = 0;
    let mut reachable = 0usize;
    for (src, dst) in &pairs {
        let distances = match by_dst.entry(*dst) {
            std::collections::hash_map::Entry::Occupied(e) => e.into_mut(),
            std::collections::hash_map::Entry::Vacant(e) => e.insert(DistanceMap::towards(*dst, topology)?),
        };
        if let Some(best) = infer_paths_with(*src, distances, topology, 1).first() {
            reachable += 1;
            total_hops += best.len() as u128;
        }
    }
    if reachable == 0 || reachable * 2 < pairs.len() {
        return Err(PathError::InsufficientReachability {
            reachable,
            sampled: pairs.len(),
        });
    }
    Ok(S::from_ratio(total_hops, reachable as u128))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::asdb::load_as_relationships;

    fn fx_g() -> AsTopology {
        load_as_relationships(b"20|10|-1\n30|20|-1\n30|40|0\n40|50|-1\n").unwrap()
    }

    #[test]
    fn identity_path() {
        let mut topo = AsTopology::new();
        topo.add_node(2516);
        let paths = infer_paths(2516, 2516, &topo, 5).unwrap();
        assert_eq!(paths.len(), 1);
        assert_eq!(paths[0].hops, vec![2516]);
        assert_eq!(path_as_set(2516, 2516, &topo, 5).unwrap(), BTreeSet::from([2516]));
    }

    #[test]
    fn fx_g_single_path() {
        let topo = fx_g();
        let paths = infer_paths(10, 50, &topo, 5).unwrap();
        let hops: Vec<_> = paths.iter().map(|p| p.hops.clone()).collect();
        assert_eq!(hops, vec![vec![10, 20, 30, 40, 50]]);
        assert_eq!(paths[0].class, RouteClass::Provider);
        assert_eq!(
            path_as_set(10, 50, &topo, 1).unwrap(),
            BTreeSet::from([10, 20, 30, 40, 50])
        );
    }

    #[test]
    fn fx_g_reverse_direction_is_also_valley_free() {
        // 50 -> 40 is customer-to-provider, 40 -> 30 peer, then down.
        let topo = fx_g();
        let hops: Vec<_> = infer_paths(50, 10, &topo, 5).unwrap().into_iter().map(|p| p.hops).collect();
        assert_eq!(hops, vec![vec![50, 40, 30, 20, 10]]);
    }

    #[test]
    fn valleys_are_not_paths() {
        // 1 and 3 are both providers of 2: 1 -> 2 -> 3 would be a valley.
        let topo = load_as_relationships(b"1|2|-1\n3|2|-1\n").unwrap();
        assert!(infer_paths(1, 3, &topo, 5).unwrap().is_empty());
        assert!(path_as_set(1, 3, &topo, 5).unwrap().is_empty());
        assert!(!is_valley_free(&[1, 2, 3], &topo));
    }

    #[test]
    fn two_peer_edges_are_not_allowed() {
        let topo = load_as_relationships(b"1|2|0\n2|3|0\n").unwrap();
        assert!(infer_paths(1, 3, &topo, 5).unwrap().is_empty());
    }

    #[test]
    fn unknown_as() {
        let topo = fx_g();
        assert_eq!(infer_paths(99, 10, &topo, 1), Err(PathError::UnknownAs(99)));
        assert_eq!(infer_paths(10, 99, &topo, 1), Err(PathError::UnknownAs(99)));
    }

    #[test]
    fn customer_routes_rank_ahead_of_shorter_provider_routes() {
        // 1 reaches 9 either via its provider 2 (3 hops) or via customer 3 then 4 (4 hops).
        let topo = load_as_relationships(b"2|1|-1\n2|9|-1\n1|3|-1\n3|4|-1\n4|9|-1\n").unwrap();
        let paths = infer_paths(1, 9, &topo, 5).unwrap();
        assert_eq!(paths[0].hops, vec![1, 3, 4, 9]);
        assert_eq!(paths[0].class, RouteClass::Customer);
        assert_eq!(paths[1].hops, vec![1, 2, 9]);
    }

    #[test]
    fn k_zero_is_empty() {
        assert!(infer_paths(10, 50, &fx_g(), 0).unwrap().is_empty());
    }

    #[test]
    fn single_node_mean_is_one() {
        let mut topo = AsTopology::new();
        topo.add_node(7);
        let mean: f64 = mean_path_length(&topo, 10, 0).unwrap();
        assert_eq!(mean, 1.0);
    }

    #[test]
    fn unreachable_topology_is_rejected() {
        let mut topo = AsTopology::new();
        for a in 1..=4 {
            topo.add_node(a);
        }
        assert!(matches!(
            mean_path_length::<f64>(&topo, 16, 0),
            Err(PathError::InsufficientReachability { reachable: 4, sampled: 16 })
        ));
        assert_eq!(mean_path_length::<f64>(&AsTopology::new(), 1, 0), Err(PathError::EmptyTopology));
    }
}
