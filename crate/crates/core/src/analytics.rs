//! Measurement reports over a snapshot: per-AS aggregation, per-country
//! distributions, users-per-guard ratios and consensus size growth.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::net::Ipv4Addr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::asdb::{attribute_asn, Asn, PrefixTable, PrefixTrie};
use crate::circuit::UNRESOLVED_ASN;
use crate::consensus::{ConsensusSnapshot, Flag};
use crate::scalar::{percent_2dp, Scalar};

/// Country code given to relays no GeoIP prefix covers.
pub const UNMAPPED_COUNTRY: &str = "ZZ";

/// Network-wide users per guard, drawn as a reference line in the ratio report.
pub const REFERENCE_USERS_PER_GUARD: u64 = 1_000;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AnalyticsError {
    #[error("need at least two snapshots with differing relay counts")]
    DegenerateSeries,
    #[error("geoip line {line}: {reason}")]
    MalformedGeoIp { line: usize, reason: String },
    #[error("country table line {line}: {reason}")]
    MalformedCountryTable { line: usize, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SortKey {
    ByRelays,
    ByBandwidth,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AsAggregateRow {
    pub asn: Asn,
    pub cumulative_bw: u128,
    pub bw_share: String,
    pub relay_count: u64,
    pub relay_share: String,
    /// Set when the relays' covering prefix has several origins.
    pub multi_origin: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AsAggregateReport {
    pub rows: Vec<AsAggregateRow>,
    /// Sum over the displayed rows only.
    pub shown: AsAggregateRow,
    /// Snapshot-wide totals; always 100% shares.
    pub total_bw: u128,
    pub total_relays: u64,
}

struct Group {
    bw: u128,
    relays: u64,
    multi: bool,
}

/// Groups relays by origin AS. Unresolvable addresses go under AS0.
pub fn aggregate_by_as(
    snapshot: &ConsensusSnapshot,
    table: &PrefixTable,
    sort: SortKey,
    top_n: usize,
) -> AsAggregateReport {
    let mut groups: HashMap<Asn, Group> = HashMap::new();
    for relay in snapshot.relays() {
        let (asn, multi) = attribute_asn(relay.address, table).unwrap_or((UNRESOLVED_ASN, false));
        let g = groups.entry(asn).or_insert(Group { bw: 0, relays: 0, multi: false });
        g.bw += u128::from(relay.bandwidth);
        g.relays += 1;
        g.multi |= multi;
    }
    let total_bw = snapshot.total_bandwidth();
    let total_relays = snapshot.relays().len() as u64;

    let mut grouped: Vec<(Asn, Group)> = groups.into_iter().collect();
    grouped.sort_by(|(a_asn, a), (b_asn, b)| {
        let primary = match sort {
            SortKey::ByRelays => b.relays.cmp(&a.relays).then(b.bw.cmp(&a.bw)),
            SortKey::ByBandwidth => b.bw.cmp(&a.bw).then(b.relays.cmp(&a.relays)),
        };
        primary.then(a_asn.cmp(b_asn))
    });
    grouped.truncate(top_n);

    let row = |asn, bw: u128, relays: u64, multi| AsAggregateRow {
        asn,
        cumulative_bw: bw,
        bw_share: percent_2dp(bw, total_bw),
        relay_count: relays,
        relay_share: percent_2dp(u128::from(relays), u128::from(total_relays)),
        multi_origin: multi,
    };
    let rows: Vec<AsAggregateRow> = grouped.iter().map(|(asn, g)| row(*asn, g.bw, g.relays, g.multi)).collect();
    let shown = row(
        UNRESOLVED_ASN,
        grouped.iter().map(|(_, g)| g.bw).sum(),
        grouped.iter().map(|(_, g)| g.relays).sum(),
        false,
    );
    AsAggregateReport {
        rows,
        shown,
        total_bw,
        total_relays,
    }
}

/// Exact bandwidth share of one row, for callers that want a number.
pub fn bandwidth_share<S: Scalar>(row: &AsAggregateRow, report: &AsAggregateReport) -> S {
    if report.total_bw == 0 {
        return S::zero();
    }
    S::from_ratio(row.cumulative_bw, report.total_bw)
}

/// Prefix-to-country table.
#[derive(Debug, Clone, Default)]
pub struct GeoIpTable {
    trie: PrefixTrie<String>,
}

impl GeoIpTable {
    pub fn new() -> Self {
        Self::default()
    }

    /// Later rows for the same prefix replace earlier ones.
    pub fn insert(&mut self, prefix: Ipv4Addr, mask_len: u8, country: &str) -> Result<(), String> {
        if country.len() != 2 || !country.bytes().all(|b| b.is_ascii_alphabetic()) {
            return Err(format!("`{country}` is not a two-letter country code"));
        }
        self.trie
            .insert_with(prefix, mask_len, country.to_ascii_uppercase(), |old, new| *old = new)
    }

    pub fn lookup(&self, address: Ipv4Addr) -> Option<&str> {
        self.trie.longest_match(address).map(|(_, _, cc)| cc.as_str())
    }

    pub fn len(&self) -> usize {
        self.trie.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trie.is_empty()
    }
}

#[derive(Debug, Deserialize)]
struct GeoIpRecord {
    prefix: Ipv4Addr,
    mask_len: u8,
    country_code: String,
}

/// Loads `prefix,mask_len,country_code` with a header row.
pub fn load_geoip(document: &[u8]) -> Result<GeoIpTable, AnalyticsError> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(document);
    let mut table = GeoIpTable::new();
    for (i, record) in reader.deserialize::<GeoIpRecord>().enumerate() {
        let line = i + 2;
        let rec = record.map_err(|e| AnalyticsError::MalformedGeoIp { line, reason: e.to_string() })?;
        table
            .insert(rec.prefix, rec.mask_len, &rec.country_code)
            .map_err(|reason| AnalyticsError::MalformedGeoIp { line, reason })?;
    }
    Ok(table)
}

#[derive(Debug, Deserialize)]
struct UsersRecord {
    country: String,
    mean_daily_users: u64,
}

/// Loads `country,mean_daily_users` with a header row.
pub fn load_users_by_country(document: &[u8]) -> Result<BTreeMap<String, u64>, AnalyticsError> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(document);
    let mut out = BTreeMap::new();
    for (i, record) in reader.deserialize::<UsersRecord>().enumerate() {
        let line = i + 2;
        let rec = record.map_err(|e| AnalyticsError::MalformedCountryTable { line, reason: e.to_string() })?;
        if rec.country.is_empty() {
            return Err(AnalyticsError::MalformedCountryTable { line, reason: "empty country".into() });
        }
        *out.entry(rec.country).or_insert(0) += rec.mean_daily_users;
    }
    Ok(out)
}

#[derive(Debug, Deserialize)]
struct GuardsRecord {
    country: String,
    guards: u64,
}

/// Loads `country,guards` with a header row.
pub fn load_guards_by_country(document: &[u8]) -> Result<BTreeMap<String, u64>, AnalyticsError> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(document);
    let mut out = BTreeMap::new();
    for (i, record) in reader.deserialize::<GuardsRecord>().enumerate() {
        let rec = record.map_err(|e| AnalyticsError::MalformedCountryTable { line: i + 2, reason: e.to_string() })?;
        *out.entry(rec.country).or_insert(0) += rec.guards;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountryRow {
    pub country_code: String,
    pub count: u64,
    pub share: String,
}

/// Counts relays carrying `flag` per country, most first.
pub fn country_distribution(snapshot: &ConsensusSnapshot, geoip: &GeoIpTable, flag: Flag) -> Vec<CountryRow> {
    let mut counts: BTreeMap<&str, u64> = BTreeMap::new();
    let mut total = 0u64;
    for relay in snapshot.relays().iter().filter(|r| r.has_flag(flag)) {
        let cc = geoip.lookup(relay.address).unwrap_or(UNMAPPED_COUNTRY);
        *counts.entry(cc).or_insert(0) += 1;
        total += 1;
    }
    let mut rows: Vec<CountryRow> = counts
        .into_iter()
        .map(|(cc, count)| CountryRow {
            country_code: cc.to_string(),
            count,
            share: percent_2dp(u128::from(count), u128::from(total)),
        })
        .collect();
    // BTreeMap order already breaks ties by code; the sort is stable
    rows.sort_by_key(|r| std::cmp::Reverse(r.count));
    rows
}

/// Guard count per country, as consumed by [`users_per_guard`].
pub fn guards_by_country(snapshot: &ConsensusSnapshot, geoip: &GeoIpTable) -> BTreeMap<String, u64> {
    country_distribution(snapshot, geoip, Flag::Guard)
        .into_iter()
        .map(|r| (r.country_code, r.count))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UsersPerGuardRow {
    pub country: String,
    pub users: u64,
    pub guards: u64,
    pub ratio: u64,
    /// No guards in the country; `ratio` holds the raw user count.
    pub unservable: bool,
}

/// Ratio of direct users to guards for each country in `users`, most
/// feasible (lowest ratio) first. Ratios round half up.
pub fn users_per_guard(users: &BTreeMap<String, u64>, guards: &BTreeMap<String, u64>) -> Vec<UsersPerGuardRow> {
    let mut rows: Vec<UsersPerGuardRow> = users
        .iter()
        .map(|(country, &u)| {
            let g = guards.get(country).copied().unwrap_or(0);
            let ratio = if g == 0 {
                u
            } else {
                ((2 * u128::from(u) + u128::from(g)) / (2 * u128::from(g))) as u64
            };
            UsersPerGuardRow {
                country: country.clone(),
                users: u,
                guards: g,
                ratio,
                unservable: g == 0,
            }
        })
        .collect();
    rows.sort_by(|a, b| {
        a.unservable
            .cmp(&b.unservable)
            .then(a.ratio.cmp(&b.ratio))
            .then(a.country.cmp(&b.country))
    });
    rows
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrowthStats<S> {
    /// Least-squares bytes per additional relay.
    pub slope: S,
    pub intercept: S,
    pub residual_min: f64,
    pub residual_max: f64,
    pub residual_mean_abs: f64,
    pub points: usize,
}

/// Fits `raw_byte_size` against relay count across the series.
pub fn consensus_growth<S: Scalar>(snapshots: &[ConsensusSnapshot]) -> Result<GrowthStats<S>, AnalyticsError> {
    let points: Vec<(i128, i128)> = snapshots
        .iter()
        .map(|s| (s.relays().len() as i128, s.raw_byte_size as i128))
        .collect();
    fit_line(&points)
}

/// Ordinary least squares over integer points, exact up to the final division.
pub fn fit_line<S: Scalar>(points: &[(i128, i128)]) -> Result<GrowthStats<S>, AnalyticsError> {
    let n = points.len() as i128;
    let (sx, sy) = points.iter().fold((0i128, 0i128), |(a, b), (x, y)| (a + x, b + y));
    let sxx: i128 = points.iter().map(|(x, _)| x * x).sum();
    let sxy: i128 = points.iter().map(|(x, y)| x * y).sum();
    let denom = n * sxx - sx * sx;
    if n < 2 || denom == 0 {
        return Err(AnalyticsError::DegenerateSeries);
    }
    let slope_num = n * sxy - sx * sy;
    let intercept_num = sy * sxx - sx * sxy;
    let slope_f = slope_num as f64 / denom as f64;
    let intercept_f = intercept_num as f64 / denom as f64;
    let residuals: Vec<f64> = points
        .iter()
        .map(|&(x, y)| y as f64 - (intercept_f + slope_f * x as f64))
        .collect();
    Ok(GrowthStats {
        slope: S::from_signed_ratio(slope_num, denom),
        intercept: S::from_signed_ratio(intercept_num, denom),
        residual_min: residuals.iter().copied().fold(f64::INFINITY, f64::min),
        residual_max: residuals.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        residual_mean_abs: residuals.iter().map(|r| r.abs()).sum::<f64>() / residuals.len() as f64,
        points: points.len(),
    })
}

pub fn render_as_report_tsv(report: &AsAggregateReport) -> String {
    let mut out = String::from("asn\tcumulative_bw\tbw_share\trelays\trelay_share\tmulti_origin\n");
    for r in &report.rows {
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}",
            r.asn, r.cumulative_bw, r.bw_share, r.relay_count, r.relay_share, r.multi_origin
        );
    }
    let s = &report.shown;
    let _ = writeln!(
        out,
        "total\t{}\t{}\t{}\t{}\t",
        s.cumulative_bw, s.bw_share, s.relay_count, s.relay_share
    );
    out
}

pub fn render_countries_tsv(rows: &[CountryRow]) -> String {
    let mut out = String::from("country\tcount\tshare\n");
    for r in rows {
        let _ = writeln!(out, "{}\t{}\t{}", r.country_code, r.count, r.share);
    }
    out
}

pub fn render_users_per_guard_tsv(rows: &[UsersPerGuardRow]) -> String {
    let mut out = String::from("country\tusers\tguards\tratio\tunservable\n");
    for r in rows {
        let _ = writeln!(out, "{}\t{}\t{}\t{}\t{}", r.country, r.users, r.guards, r.ratio, r.unservable);
    }
    let _ = writeln!(out, "reference\t\t\t{REFERENCE_USERS_PER_GUARD}\t");
    out
}

pub fn render_growth_tsv<S: Scalar>(stats: &GrowthStats<S>) -> String {
    format!(
        "points\tslope\tintercept\tresidual_min\tresidual_max\tresidual_mean_abs\n{}\t{:.3}\t{:.3}\t{:.3}\t{:.3}\t{:.3}\n",
        stats.points,
        stats.slope.to_f64(),
        stats.intercept.to_f64(),
        stats.residual_min,
        stats.residual_max,
        stats.residual_mean_abs
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::consensus::{Fingerprint, RelayFlags, RelayRecord};
    use chrono::{TimeZone, Utc};
    use num_rational::BigRational;

    fn relay(i: u32, addr: &str, bw: u64, flags: RelayFlags) -> RelayRecord {
        RelayRecord {
            fingerprint: Fingerprint::try_from(format!("{:040X}", i)).unwrap(),
            nickname: format!("r{i}"),
            address: addr.parse().unwrap(),
            or_port: 9001,
            flags,
            bandwidth: bw,
            family: None,
        }
    }

    fn snap(relays: Vec<RelayRecord>) -> ConsensusSnapshot {
        let t = Utc.with_ymd_and_hms(2024, 1, 1, 0, 0, 0).unwrap();
        ConsensusSnapshot::new(t, t + chrono::Duration::hours(1), t + chrono::Duration::hours(3), relays).unwrap()
    }

    #[test]
    fn cumulative_bandwidth_per_as() {
        let mut table = PrefixTable::new();
        table.insert("46.246.0.0".parse().unwrap(), 16, [37560]).unwrap();
        table.insert("10.0.0.0".parse().unwrap(), 8, [1]).unwrap();
        let g = RelayFlags::empty().with(Flag::Guard);
        let s = snap(vec![
            relay(1, "46.246.46.27", 26000, g),
            relay(2, "46.246.1.1", 144, g),
            relay(3, "46.246.2.2", 573000, g),
            relay(4, "10.1.1.1", 5, g),
        ]);
        let report = aggregate_by_as(&s, &table, SortKey::ByBandwidth, 10);
        assert_eq!(report.rows[0].asn, 37560);
        assert_eq!(report.rows[0].cumulative_bw, 599144);
        assert_eq!(report.rows[0].relay_count, 3);
        assert_eq!(report.shown.cumulative_bw, report.total_bw);
        let by_relays = aggregate_by_as(&s, &table, SortKey::ByRelays, 1);
        assert_eq!(by_relays.rows.len(), 1);
        assert_eq!(by_relays.shown.relay_count, 3);
        let share: BigRational = bandwidth_share(&report.rows[1], &report);
        assert_eq!(share, BigRational::from_ratio(5, 599149));
    }

    #[test]
    fn unresolved_relays_go_to_as0() {
        let s = snap(vec![relay(1, "8.8.8.8", 10, RelayFlags::empty())]);
        let report = aggregate_by_as(&s, &PrefixTable::new(), SortKey::ByRelays, 5);
        assert_eq!(report.rows[0].asn, 0);
        assert_eq!(report.rows[0].bw_share, "100.00");
    }

    #[test]
    fn country_shares_and_unmapped() {
        let mut geo = GeoIpTable::new();
        geo.insert("1.0.0.0".parse().unwrap(), 8, "fr").unwrap();
        let g = RelayFlags::empty().with(Flag::Guard);
        let s = snap(vec![
            relay(1, "1.1.1.1", 1, g),
            relay(2, "1.2.2.2", 1, g),
            relay(3, "9.9.9.9", 1, g),
            relay(4, "1.3.3.3", 1, RelayFlags::empty()),
        ]);
        let rows = country_distribution(&s, &geo, Flag::Guard);
        assert_eq!(rows[0], CountryRow { country_code: "FR".into(), count: 2, share: "66.67".into() });
        assert_eq!(rows[1].country_code, UNMAPPED_COUNTRY);
    }

    #[test]
    fn ratios_round_half_up() {
        let users: BTreeMap<String, u64> =
            [("FR", 108474), ("JP", 47375), ("DE", 177034), ("XX", 12)].iter().map(|(c, u)| (c.to_string(), *u)).collect();
        let guards: BTreeMap<String, u64> =
            [("FR", 471), ("JP", 1), ("DE", 422)].iter().map(|(c, g)| (c.to_string(), *g)).collect();
        let rows = users_per_guard(&users, &guards);
        let order: Vec<(&str, u64)> = rows.iter().map(|r| (r.country.as_str(), r.ratio)).collect();
        assert_eq!(order, vec![("FR", 230), ("DE", 420), ("JP", 47375), ("XX", 12)]);
        assert!(rows[3].unservable);
    }

    #[test]
    fn growth_two_point_fit() {
        let points = [(10, 1000), (10, 1000), (11, 1217)];
        let stats: GrowthStats<BigRational> = fit_line(&points).unwrap();
        assert_eq!(stats.slope, BigRational::from_ratio(217, 1));
        assert_eq!(fit_line::<f64>(&[(3, 1), (3, 9)]), Err(AnalyticsError::DegenerateSeries));
        assert_eq!(fit_line::<f64>(&[(3, 1)]), Err(AnalyticsError::DegenerateSeries));
    }

    #[test]
    fn geoip_csv() {
        let geo = load_geoip(b"prefix,mask_len,country_code\n1.0.0.0,8,JP\n1.2.0.0,16,FR\n").unwrap();
        assert_eq!(geo.lookup("1.2.3.4".parse().unwrap()), Some("FR"));
        assert_eq!(geo.lookup("1.3.3.4".parse().unwrap()), Some("JP"));
        assert!(load_geoip(b"prefix,mask_len,country_code\n1.0.0.0,8,JPN\n").is_err());
    }
}
