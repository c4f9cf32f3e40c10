//! Prefix-to-AS mapping, the AS relationship graph, and the multi-origin
//! blacklist.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::net::Ipv4Addr;

use chrono::{DateTime, Duration, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// An autonomous system number.
pub type Asn = u32;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AsDbError {
    #[error("no prefix covers {0}")]
    NoMatchingPrefix(Ipv4Addr),
    #[error("prefix table line {line}: {reason}")]
    MalformedPrefixLine { line: usize, reason: String },
    #[error("relationship line {line}: {reason}")]
    MalformedRelationshipLine { line: usize, reason: String },
    #[error("line {line}: AS{a}-AS{b} already has a different relationship")]
    ConflictingRelationship { line: usize, a: Asn, b: Asn },
    #[error("relationship file is not valid UTF-8")]
    NotUtf8,
}

/// One announced prefix and the set of ASes originating it.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PrefixEntry {
    pub prefix: Ipv4Addr,
    pub mask_len: u8,
    pub origin_asns: BTreeSet<Asn>,
}

impl PrefixEntry {
    pub fn is_multi_origin(&self) -> bool {
        self.origin_asns.len() > 1
    }

    pub fn contains(&self, address: Ipv4Addr) -> bool {
        let mask = prefix_mask(self.mask_len);
        u32::from(address) & mask == u32::from(self.prefix)
    }
}

impl fmt::Display for PrefixEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.prefix, self.mask_len)
    }
}

fn prefix_mask(mask_len: u8) -> u32 {
    if mask_len == 0 {
        0
    } else {
        u32::MAX << (32 - u32::from(mask_len))
    }
}

#[derive(Debug, Clone)]
struct TrieNode<V> {
    children: [Option<u32>; 2],
    value: Option<V>,
}

impl<V> Default for TrieNode<V> {
    fn default() -> Self {
        TrieNode {
            children: [None, None],
            value: None,
        }
    }
}

/// Binary trie over IPv4 prefixes answering longest-prefix-match queries.
#[derive(Debug, Clone)]
pub struct PrefixTrie<V> {
    nodes: Vec<TrieNode<V>>,
    len: usize,
}

impl<V> Default for PrefixTrie<V> {
    fn default() -> Self {
        PrefixTrie {
            nodes: vec![TrieNode::default()],
            len: 0,
        }
    }
}

impl<V> PrefixTrie<V> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of distinct prefixes.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Stores `value` at `prefix/mask_len`, combining with an existing value
    /// through `merge`. Host bits must be zero.
    pub fn insert_with(
        &mut self,
        prefix: Ipv4Addr,
        mask_len: u8,
        value: V,
        merge: impl FnOnce(&mut V, V),
    ) -> Result<(), String> {
        if mask_len > 32 {
            return Err(format!("mask length {mask_len} exceeds 32"));
        }
        let bits = u32::from(prefix);
        if bits & !prefix_mask(mask_len) != 0 {
            return Err(format!("{prefix}/{mask_len} has host bits set"));
        }
        let mut node = 0usize;
        for depth in 0..mask_len {
            let bit = ((bits >> (31 - depth)) & 1) as usize;
            node = match self.nodes[node].children[bit] {
                Some(child) => child as usize,
                None => {
                    let child = self.nodes.len();
                    self.nodes.push(TrieNode::default());
                    self.nodes[node].children[bit] = Some(child as u32);
                    child
                }
            };
        }
        match &mut self.nodes[node].value {
            Some(existing) => merge(existing, value),
            slot @ None => {
                *slot = Some(value);
                self.len += 1;
            }
        }
        Ok(())
    }

    /// The most specific prefix covering `address` with its value.
    pub fn longest_match(&self, address: Ipv4Addr) -> Option<(Ipv4Addr, u8, &V)> {
        let bits = u32::from(address);
        let mut node = 0usize;
        let mut best = self.nodes[0].value.as_ref().map(|v| (0u8, v));
        for depth in 0..32u8 {
            let bit = ((bits >> (31 - depth)) & 1) as usize;
            match self.nodes[node].children[bit] {
                Some(child) => node = child as usize,
                None => break,
            }
            if let Some(v) = &self.nodes[node].value {
                best = Some((depth + 1, v));
            }
        }
        best.map(|(mask_len, v)| (Ipv4Addr::from(bits & prefix_mask(mask_len)), mask_len, v))
    }

    /// All stored prefixes, sorted by (prefix, mask length).
    pub fn entries(&self) -> Vec<(Ipv4Addr, u8, &V)> {
        let mut out = Vec::with_capacity(self.len);
        let mut stack = vec![(0usize, 0u32, 0u8)];
        while let Some((node, bits, depth)) = stack.pop() {
            let n = &self.nodes[node];
            if let Some(v) = &n.value {
                out.push((Ipv4Addr::from(bits), depth, v));
            }
            for (bit, child) in n.children.iter().enumerate() {
                if let Some(child) = child {
                    let next = bits | ((bit as u32) << (31 - u32::from(depth)));
                    stack.push((*child as usize, next, depth + 1));
                }
            }
        }
        out.sort_by_key(|(p, m, _)| (*p, *m));
        out
    }
}

/// Prefix-to-origin table.
#[derive(Debug, Clone, Default)]
pub struct PrefixTable {
    trie: PrefixTrie<BTreeSet<Asn>>,
}

impl PrefixTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.trie.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trie.is_empty()
    }

    /// Adds origins for a prefix. Announcing the same prefix again merges the
    /// origin sets.
    pub fn insert(
        &mut self,
        prefix: Ipv4Addr,
        mask_len: u8,
        origins: impl IntoIterator<Item = Asn>,
    ) -> Result<(), String> {
        let origins: BTreeSet<Asn> = origins.into_iter().collect();
        if origins.is_empty() {
            return Err(format!("{prefix}/{mask_len} has no origin AS"));
        }
        self.trie
            .insert_with(prefix, mask_len, origins, |existing, new| existing.extend(new))
    }

    /// The most specific entry covering `address`.
    pub fn longest_match(&self, address: Ipv4Addr) -> Option<PrefixEntry> {
        self.trie.longest_match(address).map(|(prefix, mask_len, origins)| PrefixEntry {
            prefix,
            mask_len,
            origin_asns: origins.clone(),
        })
    }

    /// All entries, sorted by (prefix, mask length).
    pub fn entries(&self) -> Vec<PrefixEntry> {
        self.trie
            .entries()
            .into_iter()
            .map(|(prefix, mask_len, origins)| PrefixEntry {
                prefix,
                mask_len,
                origin_asns: origins.clone(),
            })
            .collect()
    }
}

impl FromIterator<PrefixEntry> for PrefixTable {
    fn from_iter<T: IntoIterator<Item = PrefixEntry>>(iter: T) -> Self {
        let mut table = PrefixTable::new();
        for e in iter {
            table
                .insert(e.prefix, e.mask_len, e.origin_asns)
                .expect("valid prefix entry");
        }
        table
    }
}

/// Parses a pfx2as-style table: `prefix<TAB>mask_len<TAB>asn[,asn...]`.
/// `_` is accepted as an alternative origin separator, `#` starts a comment.
pub fn load_prefix_table(document: &[u8]) -> Result<PrefixTable, AsDbError> {
    let text = std::str::from_utf8(document).map_err(|_| AsDbError::NotUtf8)?;
    let mut table = PrefixTable::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |reason: String| AsDbError::MalformedPrefixLine {
            line: line_no,
            reason,
        };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(bad("expected three tab-separated fields".into()));
        }
        let prefix: Ipv4Addr = fields[0]
            .parse()
            .map_err(|_| bad(format!("bad prefix `{}`", fields[0])))?;
        let mask_len: u8 = fields[1]
            .parse()
            .map_err(|_| bad(format!("bad mask length `{}`", fields[1])))?;
        let origins = fields[2]
            .split([',', '_'])
            .map(|a| a.trim().parse::<Asn>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|_| bad(format!("bad origin list `{}`", fields[2])))?;
        table.insert(prefix, mask_len, origins).map_err(bad)?;
    }
    Ok(table)
}

/// Origin set of the most specific prefix covering `address`. A multi-origin
/// result contains every origin; callers pick per their own policy.
pub fn ip_to_asn(address: Ipv4Addr, table: &PrefixTable) -> Result<BTreeSet<Asn>, AsDbError> {
    table
        .longest_match(address)
        .map(|e| e.origin_asns)
        .ok_or(AsDbError::NoMatchingPrefix(address))
}

/// Single-AS attribution used for grouping: the smallest origin of the most
/// specific covering prefix. The flag reports whether that prefix is
/// multi-origin.
pub fn attribute_asn(address: Ipv4Addr, table: &PrefixTable) -> Option<(Asn, bool)> {
    let entry = table.longest_match(address)?;
    let multi = entry.is_multi_origin();
    entry.origin_asns.first().map(|a| (*a, multi))
}

/// Entries announced by more than one origin AS, sorted by prefix.
pub fn detect_multi_origin(table: &PrefixTable) -> Vec<PrefixEntry> {
    table
        .entries()
        .into_iter()
        .filter(PrefixEntry::is_multi_origin)
        .collect()
}

/// Every AS that originates some multi-origin prefix.
pub fn multi_origin_asns(table: &PrefixTable) -> BTreeSet<Asn> {
    detect_multi_origin(table)
        .into_iter()
        .flat_map(|e| e.origin_asns)
        .collect()
}

/// Relationship of an edge as seen from its first endpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Relationship {
    /// First AS is a provider of the second.
    ProviderToCustomer,
    CustomerToProvider,
    Peer,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
struct Neighbors {
    providers: BTreeSet<Asn>,
    customers: BTreeSet<Asn>,
    peers: BTreeSet<Asn>,
}

/// AS-level relationship graph.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AsTopology {
    adjacency: BTreeMap<Asn, Neighbors>,
}

impl AsTopology {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_node(&mut self, asn: Asn) {
        self.adjacency.entry(asn).or_default();
    }

    pub fn contains(&self, asn: Asn) -> bool {
        self.adjacency.contains_key(&asn)
    }

    pub fn nodes(&self) -> impl Iterator<Item = Asn> + '_ {
        self.adjacency.keys().copied()
    }

    pub fn node_count(&self) -> usize {
        self.adjacency.len()
    }

    pub fn relationship(&self, a: Asn, b: Asn) -> Option<Relationship> {
        let n = self.adjacency.get(&a)?;
        if n.customers.contains(&b) {
            Some(Relationship::ProviderToCustomer)
        } else if n.providers.contains(&b) {
            Some(Relationship::CustomerToProvider)
        } else if n.peers.contains(&b) {
            Some(Relationship::Peer)
        } else {
            None
        }
    }

    /// Adds `provider -> customer`. Re-adding the same edge is a no-op.
    pub fn add_provider_customer(&mut self, provider: Asn, customer: Asn) -> Result<(), (Asn, Asn)> {
        self.add_edge(provider, customer, Relationship::ProviderToCustomer)
    }

    pub fn add_peering(&mut self, a: Asn, b: Asn) -> Result<(), (Asn, Asn)> {
        self.add_edge(a, b, Relationship::Peer)
    }

    fn add_edge(&mut self, a: Asn, b: Asn, rel: Relationship) -> Result<(), (Asn, Asn)> {
        if a == b {
            return Err((a, b));
        }
        match self.relationship(a, b) {
            Some(existing) if existing == rel => return Ok(()),
            Some(_) => return Err((a, b)),
            None => {}
        }
        match rel {
            Relationship::ProviderToCustomer => {
                self.adjacency.entry(a).or_default().customers.insert(b);
                self.adjacency.entry(b).or_default().providers.insert(a);
            }
            Relationship::CustomerToProvider => {
                self.adjacency.entry(a).or_default().providers.insert(b);
                self.adjacency.entry(b).or_default().customers.insert(a);
            }
            Relationship::Peer => {
                self.adjacency.entry(a).or_default().peers.insert(b);
                self.adjacency.entry(b).or_default().peers.insert(a);
            }
        }
        Ok(())
    }

    pub fn providers(&self, asn: Asn) -> impl Iterator<Item = Asn> + '_ {
        self.adjacency.get(&asn).into_iter().flat_map(|n| n.providers.iter().copied())
    }

    pub fn customers(&self, asn: Asn) -> impl Iterator<Item = Asn> + '_ {
        self.adjacency.get(&asn).into_iter().flat_map(|n| n.customers.iter().copied())
    }

    pub fn peers(&self, asn: Asn) -> impl Iterator<Item = Asn> + '_ {
        self.adjacency.get(&asn).into_iter().flat_map(|n| n.peers.iter().copied())
    }

    /// Provider-customer pairs, sorted.
    pub fn provider_customer_edges(&self) -> Vec<(Asn, Asn)> {
        self.adjacency
            .iter()
            .flat_map(|(p, n)| n.customers.iter().map(move |c| (*p, *c)))
            .collect()
    }

    /// Peer pairs with the smaller ASN first, sorted.
    pub fn peer_edges(&self) -> Vec<(Asn, Asn)> {
        self.adjacency
            .iter()
            .flat_map(|(a, n)| n.peers.iter().filter(move |b| a < *b).map(move |b| (*a, *b)))
            .collect()
    }

    /// Content hash of the graph, stable across load order.
    pub fn version(&self) -> String {
        let mut hasher = Sha256::new();
        for asn in self.adjacency.keys() {
            hasher.update(format!("n{asn}\n"));
        }
        for (p, c) in self.provider_customer_edges() {
            hasher.update(format!("{p}|{c}|-1\n"));
        }
        for (a, b) in self.peer_edges() {
            hasher.update(format!("{a}|{b}|0\n"));
        }
        hex::encode(hasher.finalize())
    }

    /// Writes the graph back in as-rel format.
    pub fn to_as_rel(&self) -> String {
        let mut out = String::new();
        for (p, c) in self.provider_customer_edges() {
            out.push_str(&format!("{p}|{c}|-1\n"));
        }
        for (a, b) in self.peer_edges() {
            out.push_str(&format!("{a}|{b}|0\n"));
        }
        out
    }
}

/// Loads CAIDA as-rel lines `as1|as2|rel` (rel -1: as1 provides as2; 0: peers).
/// A fourth `source` field, as in serial-2 files, is accepted and ignored.
pub fn load_as_relationships(document: &[u8]) -> Result<AsTopology, AsDbError> {
    let text = std::str::from_utf8(document).map_err(|_| AsDbError::NotUtf8)?;
    let mut topology = AsTopology::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |reason: &str| AsDbError::MalformedRelationshipLine {
            line: line_no,
            reason: reason.to_string(),
        };
        let fields: Vec<&str> = line.split('|').collect();
        if !(3..=4).contains(&fields.len()) {
            return Err(bad("expected `as1|as2|rel`"));
        }
        let a: Asn = fields[0].trim().parse().map_err(|_| bad("bad first AS"))?;
        let b: Asn = fields[1].trim().parse().map_err(|_| bad("bad second AS"))?;
        if a == b {
            return Err(bad("self relationship"));
        }
        let result = match fields[2].trim() {
            "-1" => topology.add_provider_customer(a, b),
            "0" => topology.add_peering(a, b),
            _ => return Err(bad("relationship must be -1 or 0")),
        };
        result.map_err(|(a, b)| AsDbError::ConflictingRelationship { line: line_no, a, b })?;
    }
    Ok(topology)
}

/// ASes that recently started originating a multi-origin prefix. An AS stays
/// listed while `now - first_seen < trust_period`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AsBlacklist {
    pub entries: BTreeMap<Asn, DateTime<Utc>>,
    pub trust_period: Duration,
}

impl Default for AsBlacklist {
    fn default() -> Self {
        AsBlacklist::new(Duration::days(30))
    }
}

impl AsBlacklist {
    pub fn new(trust_period: Duration) -> Self {
        assert!(trust_period > Duration::zero(), "trust period must be positive");
        AsBlacklist {
            entries: BTreeMap::new(),
            trust_period,
        }
    }

    pub fn is_listed(&self, asn: Asn, now: DateTime<Utc>) -> bool {
        self.entries
            .get(&asn)
            .is_some_and(|first| now - *first < self.trust_period)
    }

    /// ASes listed at `now`.
    pub fn listed(&self, now: DateTime<Utc>) -> BTreeSet<Asn> {
        self.entries
            .keys()
            .copied()
            .filter(|a| self.is_listed(*a, now))
            .collect()
    }
}

/// Expires entries whose trust period has elapsed, then lists every newly
/// multi-origin AS not already present with `first_seen = now`.
pub fn update_blacklist(
    blacklist: &AsBlacklist,
    newly_multi_origin: &BTreeSet<Asn>,
    now: DateTime<Utc>,
) -> AsBlacklist {
    let mut next = blacklist.clone();
    next.entries
        .retain(|_, first_seen| now - *first_seen < blacklist.trust_period);
    for asn in newly_multi_origin {
        next.entries.entry(*asn).or_insert(now);
    }
    next
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;

    fn ip(s: &str) -> Ipv4Addr {
        s.parse().unwrap()
    }

    #[test]
    fn more_specific_prefix_wins() {
        let table = load_prefix_table(b"46.246.0.0\t17\t42708\n46.246.32.0\t19\t37560\n").unwrap();
        assert_eq!(ip_to_asn(ip("46.246.46.27"), &table).unwrap(), BTreeSet::from([37560]));
        assert_eq!(ip_to_asn(ip("46.246.100.1"), &table).unwrap(), BTreeSet::from([42708]));
    }

    #[test]
    fn single_cover_and_miss() {
        let table = load_prefix_table(b"10.0.0.0\t8\t65000\n").unwrap();
        assert_eq!(ip_to_asn(ip("10.0.0.1"), &table).unwrap(), BTreeSet::from([65000]));
        assert_eq!(
            ip_to_asn(ip("11.0.0.1"), &table),
            Err(AsDbError::NoMatchingPrefix(ip("11.0.0.1")))
        );
    }

    #[test]
    fn default_route_matches_everything() {
        let table = load_prefix_table(b"0.0.0.0\t0\t1\n").unwrap();
        assert_eq!(ip_to_asn(ip("203.0.113.9"), &table).unwrap(), BTreeSet::from([1]));
    }

    #[test]
    fn host_bits_rejected() {
        let err = load_prefix_table(b"10.0.0.1\t8\t65000\n").unwrap_err();
        assert!(matches!(err, AsDbError::MalformedPrefixLine { line: 1, .. }));
    }

    #[test]
    fn multi_origin_listing() {
        let table = load_prefix_table(
            b"46.246.32.0\t19\t37560,42708\n46.246.0.0\t17\t42708\n10.0.0.0\t8\t1\n",
        )
        .unwrap();
        let multi = detect_multi_origin(&table);
        assert_eq!(multi.len(), 1);
        assert_eq!(multi[0].to_string(), "46.246.32.0/19");
        assert_eq!(multi[0].origin_asns, BTreeSet::from([37560, 42708]));
        assert_eq!(attribute_asn(ip("46.246.46.27"), &table), Some((37560, true)));
    }

    #[test]
    fn repeated_prefix_merges_origins() {
        let table = load_prefix_table(b"1.0.0.0\t24\t13335\n1.0.0.0\t24\t38803\n").unwrap();
        assert_eq!(table.len(), 1);
        assert_eq!(detect_multi_origin(&table).len(), 1);
    }

    #[test]
    fn all_singletons_have_no_multi_origin() {
        let table = load_prefix_table(b"1.0.0.0\t24\t1\n2.0.0.0\t8\t2\n").unwrap();
        assert!(detect_multi_origin(&table).is_empty());
    }

    #[test]
    fn relationships_from_caida_lines() {
        let topo = load_as_relationships(
            b"# source: test\n174|37560|-1\n42708|37560|-1\n16150|37560|-1\n37560|50304|0\n",
        )
        .unwrap();
        assert_eq!(topo.providers(37560).collect::<Vec<_>>(), vec![174, 16150, 42708]);
        assert_eq!(topo.peers(37560).collect::<Vec<_>>(), vec![50304]);
        assert_eq!(topo.relationship(174, 37560), Some(Relationship::ProviderToCustomer));
        assert_eq!(topo.relationship(37560, 174), Some(Relationship::CustomerToProvider));
    }

    #[test]
    fn empty_and_duplicate_relationships() {
        assert_eq!(load_as_relationships(b"").unwrap().node_count(), 0);
        let topo = load_as_relationships(b"1|2|-1\n1|2|-1\n").unwrap();
        assert_eq!(topo.provider_customer_edges(), vec![(1, 2)]);
    }

    #[test]
    fn conflicting_relationship_is_an_error() {
        let err = load_as_relationships(b"1|2|-1\n1|2|0\n").unwrap_err();
        assert_eq!(err, AsDbError::ConflictingRelationship { line: 2, a: 1, b: 2 });
        let err = load_as_relationships(b"1|2|-1\n2|1|-1\n").unwrap_err();
        assert!(matches!(err, AsDbError::ConflictingRelationship { .. }));
    }

    #[test]
    fn malformed_relationships() {
        for doc in [&b"1|2\n"[..], b"1|2|7\n", b"a|2|0\n", b"3|3|0\n"] {
            assert!(matches!(
                load_as_relationships(doc),
                Err(AsDbError::MalformedRelationshipLine { line: 1, .. })
            ));
        }
    }

    #[test]
    fn blacklist_insert_and_expire() {
        let t0 = Utc.with_ymd_and_hms(2016, 7, 1, 0, 0, 0).unwrap();
        let empty = AsBlacklist::default();
        assert_eq!(empty.trust_period, Duration::days(30));
        let bl = update_blacklist(&empty, &BTreeSet::from([37560]), t0);
        assert_eq!(bl.entries, BTreeMap::from([(37560, t0)]));
        assert!(bl.is_listed(37560, t0));
        let later = t0 + bl.trust_period;
        assert!(!bl.is_listed(37560, later));
        assert!(update_blacklist(&bl, &BTreeSet::new(), later).entries.is_empty());
    }

    #[test]
    fn reappearing_as_gets_fresh_timestamp() {
        let t0 = Utc.with_ymd_and_hms(2016, 7, 1, 0, 0, 0).unwrap();
        let bl = update_blacklist(&AsBlacklist::default(), &BTreeSet::from([7]), t0);
        let later = t0 + Duration::days(30);
        let bl = update_blacklist(&bl, &BTreeSet::from([7]), later);
        assert_eq!(bl.entries, BTreeMap::from([(7, later)]));
    }
}
