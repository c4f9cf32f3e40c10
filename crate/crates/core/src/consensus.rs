//! Parsing and canonical serialization of (simplified) consensus network-status
//! documents.
//!
//! The accepted grammar is line oriented:
//!
//! ```text
//! valid-after 2016-07-09 16:00:00
//! fresh-until 2016-07-09 17:00:00
//! valid-until 2016-07-09 19:00:00
//! r <nickname> <fingerprint40hex> <ipv4> <orport>
//! s <flag> [<flag> ...]
//! w Bandwidth=<int>
//! f <family-token>
//! m sha256=<hex>
//! ```
//!
//! `f` and `m` are optional. `m` carries the SHA-256 of the relay's preceding
//! `r`/`s`/`w`/`f` lines exactly as written and is checked when present. Any
//! other keyword is counted in [`ConsensusSnapshot::ignored_lines`] and
//! otherwise skipped.
//!
//! Fields are separated by runs of ASCII whitespace. The canonical form
//! written by [`serialize_consensus`] aligns every relay field except the
//! nickname to a fixed column width, so that the size of one relay entry is
//! `210 + nickname length` bytes for any relay without a family token and with
//! a bandwidth below 10^18.

use std::collections::HashSet;
use std::fmt;
use std::net::Ipv4Addr;
use std::str::FromStr;

use chrono::{DateTime, NaiveDateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

const TIME_FORMAT: &str = "%Y-%m-%d %H:%M:%S";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ConsensusError {
    #[error("line {line}: {reason}")]
    MalformedLine { line: usize, reason: String },
    #[error("duplicate relay fingerprint {0}")]
    DuplicateFingerprint(Fingerprint),
    #[error("missing validity header `{0}`")]
    MissingValidityHeader(&'static str),
    #[error("validity window must satisfy valid-after < fresh-until < valid-until")]
    InvalidValidityWindow,
    #[error("document is not valid UTF-8")]
    NotUtf8,
}

fn malformed(line: usize, reason: impl Into<String>) -> ConsensusError {
    ConsensusError::MalformedLine {
        line,
        reason: reason.into(),
    }
}

/// A relay identity fingerprint: 40 hex characters, stored upper-case.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Fingerprint(String);

impl Fingerprint {
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl FromStr for Fingerprint {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.len() == 40 && s.bytes().all(|b| b.is_ascii_hexdigit()) {
            Ok(Fingerprint(s.to_ascii_uppercase()))
        } else {
            Err(format!("invalid fingerprint `{s}`"))
        }
    }
}

impl TryFrom<String> for Fingerprint {
    type Error = String;

    fn try_from(value: String) -> Result<Self, Self::Error> {
        value.parse()
    }
}

impl From<Fingerprint> for String {
    fn from(value: Fingerprint) -> Self {
        value.0
    }
}

impl fmt::Display for Fingerprint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// The relay flags this crate understands.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Flag {
    Exit,
    Fast,
    Guard,
    Running,
    Stable,
    Valid,
}

impl Flag {
    /// All flags, in canonical (alphabetical) order.
    pub const ALL: [Flag; 6] = [
        Flag::Exit,
        Flag::Fast,
        Flag::Guard,
        Flag::Running,
        Flag::Stable,
        Flag::Valid,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Flag::Exit => "Exit",
            Flag::Fast => "Fast",
            Flag::Guard => "Guard",
            Flag::Running => "Running",
            Flag::Stable => "Stable",
            Flag::Valid => "Valid",
        }
    }

    fn bit(self) -> u8 {
        1 << (self as u8)
    }
}

impl FromStr for Flag {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Flag::ALL.into_iter().find(|f| f.name() == s).ok_or(())
    }
}

/// A set of [`Flag`]s.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RelayFlags(u8);

impl RelayFlags {
    pub const fn empty() -> Self {
        RelayFlags(0)
    }

    pub fn contains(self, flag: Flag) -> bool {
        self.0 & flag.bit() != 0
    }

    pub fn insert(&mut self, flag: Flag) {
        self.0 |= flag.bit();
    }

    pub fn with(mut self, flag: Flag) -> Self {
        self.insert(flag);
        self
    }

    pub fn iter(self) -> impl Iterator<Item = Flag> {
        Flag::ALL.into_iter().filter(move |f| self.contains(*f))
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }
}

impl FromIterator<Flag> for RelayFlags {
    fn from_iter<T: IntoIterator<Item = Flag>>(iter: T) -> Self {
        let mut flags = RelayFlags::empty();
        for f in iter {
            flags.insert(f);
        }
        flags
    }
}

impl fmt::Display for RelayFlags {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = self.iter().map(Flag::name).collect();
        f.write_str(&names.join(" "))
    }
}

/// The /16 network a relay lives in, e.g. `46.246.0.0/16` is `Subnet16([46, 246])`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Subnet16(pub [u8; 2]);

impl fmt::Display for Subnet16 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}.0.0/16", self.0[0], self.0[1])
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelayRecord {
    pub fingerprint: Fingerprint,
    pub nickname: String,
    pub address: Ipv4Addr,
    pub or_port: u16,
    pub flags: RelayFlags,
    /// Consensus weight in KB/s.
    pub bandwidth: u64,
    pub family: Option<String>,
}

impl RelayRecord {
    pub fn subnet16(&self) -> Subnet16 {
        let [a, b, _, _] = self.address.octets();
        Subnet16([a, b])
    }

    pub fn has_flag(&self, flag: Flag) -> bool {
        self.flags.contains(flag)
    }

    pub fn is_guard(&self) -> bool {
        self.has_flag(Flag::Guard)
    }

    pub fn is_exit(&self) -> bool {
        self.has_flag(Flag::Exit)
    }
}

fn is_valid_nickname(nick: &str) -> bool {
    (1..=19).contains(&nick.len()) && nick.bytes().all(|b| b.is_ascii_alphanumeric())
}

fn is_valid_family_token(token: &str) -> bool {
    !token.is_empty() && !token.bytes().any(|b| b.is_ascii_whitespace() || b.is_ascii_control())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsensusSnapshot {
    pub valid_after: DateTime<Utc>,
    pub fresh_until: DateTime<Utc>,
    pub valid_until: DateTime<Utc>,
    /// Sorted by fingerprint.
    relays: Vec<RelayRecord>,
    /// Byte length of the document this snapshot was parsed from (or last
    /// serialized to).
    pub raw_byte_size: usize,
    /// Lines with unrecognised keywords.
    pub ignored_lines: usize,
}

impl ConsensusSnapshot {
    /// Builds a snapshot from parts, sorting relays and checking invariants.
    pub fn new(
        valid_after: DateTime<Utc>,
        fresh_until: DateTime<Utc>,
        valid_until: DateTime<Utc>,
        mut relays: Vec<RelayRecord>,
    ) -> Result<Self, ConsensusError> {
        if !(valid_after < fresh_until && fresh_until < valid_until) {
            return Err(ConsensusError::InvalidValidityWindow);
        }
        relays.sort_by(|a, b| a.fingerprint.cmp(&b.fingerprint));
        if let Some(w) = relays.windows(2).find(|w| w[0].fingerprint == w[1].fingerprint) {
            return Err(ConsensusError::DuplicateFingerprint(w[0].fingerprint.clone()));
        }
        let mut snapshot = ConsensusSnapshot {
            valid_after,
            fresh_until,
            valid_until,
            relays,
            raw_byte_size: 0,
            ignored_lines: 0,
        };
        snapshot.raw_byte_size = serialize_consensus(&snapshot).len();
        Ok(snapshot)
    }

    pub fn relays(&self) -> &[RelayRecord] {
        &self.relays
    }

    pub fn relay(&self, fingerprint: &Fingerprint) -> Option<&RelayRecord> {
        self.relays
            .binary_search_by(|r| r.fingerprint.cmp(fingerprint))
            .ok()
            .map(|i| &self.relays[i])
    }

    pub fn guards(&self) -> impl Iterator<Item = &RelayRecord> {
        self.relays.iter().filter(|r| r.is_guard())
    }

    pub fn exits(&self) -> impl Iterator<Item = &RelayRecord> {
        self.relays.iter().filter(|r| r.is_exit())
    }

    pub fn total_bandwidth(&self) -> u128 {
        self.relays.iter().map(|r| u128::from(r.bandwidth)).sum()
    }

    /// Inserts a relay, keeping canonical order. Fails on a duplicate fingerprint.
    pub fn insert_relay(&mut self, relay: RelayRecord) -> Result<(), ConsensusError> {
        match self
            .relays
            .binary_search_by(|r| r.fingerprint.cmp(&relay.fingerprint))
        {
            Ok(_) => Err(ConsensusError::DuplicateFingerprint(relay.fingerprint)),
            Err(pos) => {
                self.relays.insert(pos, relay);
                Ok(())
            }
        }
    }

    /// Equality of document content: validity window and relays. Ignores
    /// where the snapshot came from (`raw_byte_size`, `ignored_lines`).
    pub fn same_content(&self, other: &Self) -> bool {
        self.valid_after == other.valid_after
            && self.fresh_until == other.fresh_until
            && self.valid_until == other.valid_until
            && self.relays == other.relays
    }
}

/// True iff the snapshot has not yet expired at `now`.
pub fn is_live(snapshot: &ConsensusSnapshot, now: DateTime<Utc>) -> bool {
    now < snapshot.valid_until
}

fn parse_time(line_no: usize, rest: &str) -> Result<DateTime<Utc>, ConsensusError> {
    NaiveDateTime::parse_from_str(rest.trim(), TIME_FORMAT)
        .map(|t| t.and_utc())
        .map_err(|e| malformed(line_no, format!("bad timestamp `{}`: {e}", rest.trim())))
}

struct PendingRelay {
    line: usize,
    record: RelayRecord,
    seen_s: bool,
    seen_w: bool,
    seen_f: bool,
    seen_m: bool,
    /// Raw text of the relay's lines up to (not including) the `m` line.
    raw: String,
}

/// Parses a consensus document.
pub fn parse_consensus(document: &[u8]) -> Result<ConsensusSnapshot, ConsensusError> {
    let text = std::str::from_utf8(document).map_err(|_| ConsensusError::NotUtf8)?;

    let mut valid_after = None;
    let mut fresh_until = None;
    let mut valid_until = None;
    let mut relays: Vec<RelayRecord> = Vec::new();
    let mut seen = HashSet::new();
    let mut current: Option<PendingRelay> = None;
    let mut ignored_lines = 0usize;

    let mut finish = |pending: Option<PendingRelay>,
                      relays: &mut Vec<RelayRecord>|
     -> Result<(), ConsensusError> {
        if let Some(p) = pending {
            if !seen.insert(p.record.fingerprint.clone()) {
                return Err(ConsensusError::DuplicateFingerprint(p.record.fingerprint));
            }
            relays.push(p.record);
        }
        Ok(())
    };

    for (idx, raw_line) in text.split_inclusive('\n').enumerate() {
        let line_no = idx + 1;
        let line = raw_line.trim_end_matches(['\n', '\r']);
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let (keyword, rest) = match trimmed.split_once(|c: char| c.is_ascii_whitespace()) {
            Some((k, r)) => (k, r),
            None => (trimmed, ""),
        };
        let fields: Vec<&str> = rest.split_ascii_whitespace().collect();
        match keyword {
            "valid-after" => valid_after = Some(parse_time(line_no, rest)?),
            "fresh-until" => fresh_until = Some(parse_time(line_no, rest)?),
            "valid-until" => valid_until = Some(parse_time(line_no, rest)?),
            "r" => {
                finish(current.take(), &mut relays)?;
                if fields.len() != 4 {
                    return Err(malformed(line_no, "expected `r <nickname> <fingerprint> <ipv4> <orport>`"));
                }
                if !is_valid_nickname(fields[0]) {
                    return Err(malformed(line_no, format!("invalid nickname `{}`", fields[0])));
                }
                let fingerprint: Fingerprint =
                    fields[1].parse().map_err(|e: String| malformed(line_no, e))?;
                let address = Ipv4Addr::from_str(fields[2])
                    .map_err(|_| malformed(line_no, format!("not an IPv4 address `{}`", fields[2])))?;
                let or_port = fields[3]
                    .parse::<u16>()
                    .map_err(|_| malformed(line_no, format!("invalid port `{}`", fields[3])))?;
                current = Some(PendingRelay {
                    line: line_no,
                    record: RelayRecord {
                        fingerprint,
                        nickname: fields[0].to_string(),
                        address,
                        or_port,
                        flags: RelayFlags::empty(),
                        bandwidth: 0,
                        family: None,
                    },
                    seen_s: false,
                    seen_w: false,
                    seen_f: false,
                    seen_m: false,
                    raw: raw_line.to_string(),
                });
            }
            "s" | "w" | "f" | "m" => {
                let pending = current
                    .as_mut()
                    .ok_or_else(|| malformed(line_no, format!("`{keyword}` line outside a relay entry")))?;
                if pending.seen_m {
                    return Err(malformed(line_no, "relay lines after the `m` digest line"));
                }
                match keyword {
                    "s" => {
                        if pending.seen_s {
                            return Err(malformed(line_no, "duplicate `s` line"));
                        }
                        pending.seen_s = true;
                        // flags outside the known set are skipped
                        pending.record.flags = fields.iter().filter_map(|f| f.parse().ok()).collect();
                    }
                    "w" => {
                        if pending.seen_w {
                            return Err(malformed(line_no, "duplicate `w` line"));
                        }
                        pending.seen_w = true;
                        let bw = fields
                            .iter()
                            .find_map(|f| f.strip_prefix("Bandwidth="))
                            .ok_or_else(|| malformed(line_no, "`w` line without Bandwidth="))?;
                        pending.record.bandwidth = bw
                            .parse()
                            .map_err(|_| malformed(line_no, format!("invalid bandwidth `{bw}`")))?;
                    }
                    "f" => {
                        if pending.seen_f {
                            return Err(malformed(line_no, "duplicate `f` line"));
                        }
                        pending.seen_f = true;
                        if fields.len() != 1 || !is_valid_family_token(fields[0]) {
                            return Err(malformed(line_no, "expected `f <family-token>`"));
                        }
                        pending.record.family = Some(fields[0].to_string());
                    }
                    _ => {
                        pending.seen_m = true;
                        let digest = match fields.as_slice() {
                            [d] => d.strip_prefix("sha256="),
                            _ => None,
                        }
                        .ok_or_else(|| malformed(line_no, "expected `m sha256=<hex>`"))?;
                        let expected = hex::encode(Sha256::digest(pending.raw.as_bytes()));
                        if !digest.eq_ignore_ascii_case(&expected) {
                            return Err(malformed(
                                line_no,
                                format!("relay digest mismatch for entry starting at line {}", pending.line),
                            ));
                        }
                    }
                }
                if keyword != "m" {
                    pending.raw.push_str(raw_line);
                }
            }
            _ => ignored_lines += 1,
        }
    }
    finish(current.take(), &mut relays)?;

    let valid_after = valid_after.ok_or(ConsensusError::MissingValidityHeader("valid-after"))?;
    let fresh_until = fresh_until.ok_or(ConsensusError::MissingValidityHeader("fresh-until"))?;
    let valid_until = valid_until.ok_or(ConsensusError::MissingValidityHeader("valid-until"))?;
    if !(valid_after < fresh_until && fresh_until < valid_until) {
        return Err(ConsensusError::InvalidValidityWindow);
    }
    relays.sort_by(|a, b| a.fingerprint.cmp(&b.fingerprint));

    Ok(ConsensusSnapshot {
        valid_after,
        fresh_until,
        valid_until,
        relays,
        raw_byte_size: document.len(),
        ignored_lines,
    })
}

/// Writes one relay entry in canonical form.
pub fn serialize_relay(relay: &RelayRecord, out: &mut String) {
    let mut block = format!(
        "r {} {} {:<15} {:>5}\ns {:<36}\nw {:>28}\n",
        relay.nickname,
        relay.fingerprint,
        relay.address.to_string(),
        relay.or_port,
        relay.flags.to_string(),
        format!("Bandwidth={}", relay.bandwidth),
    );
    if let Some(family) = &relay.family {
        block.push_str(&format!("f {family}\n"));
    }
    let digest = hex::encode(Sha256::digest(block.as_bytes()));
    out.push_str(&block);
    out.push_str(&format!("m sha256={digest}\n"));
}

/// Canonical, deterministic serialization.
pub fn serialize_consensus(snapshot: &ConsensusSnapshot) -> Vec<u8> {
    let mut out = String::with_capacity(120 + snapshot.relays.len() * 230);
    for (key, time) in [
        ("valid-after", snapshot.valid_after),
        ("fresh-until", snapshot.fresh_until),
        ("valid-until", snapshot.valid_until),
    ] {
        out.push_str(&format!("{key} {}\n", time.format(TIME_FORMAT)));
    }
    for relay in &snapshot.relays {
        serialize_relay(relay, &mut out);
    }
    out.into_bytes()
}
