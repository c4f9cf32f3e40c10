use std::fs;
use std::net::{Ipv4Addr, SocketAddr, ToSocketAddrs};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use asmon_core::analytics::{self, SortKey};
use asmon_core::asdb::{load_as_relationships, load_prefix_table, AsTopology, PrefixTable};
use asmon_core::ingestion::{
    build_path_db, parse_traceroute, read_path_db, refresh, write_path_db, DestinationCatalog, FixtureResolver,
    Resolver,
};
use asmon_core::path_inference::DEFAULT_K;
use asmon_core::service::{handle_query, AsnInput, QueryRequest};
use asmon_core::{parse_consensus, ConsensusSnapshot, Flag, PathDb};
use chrono::{DateTime, Utc};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "asmon", version, about = "Find Tor exits whose routes share ASes with your guard path")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a path database from a consensus, catalog and routing data.
    BuildDb(BuildArgs),
    /// Rebuild an existing database for new inputs, reusing unchanged entries.
    RefreshDb {
        #[arg(long)]
        db: PathBuf,
        #[command(flatten)]
        inputs: BuildArgs,
    },
    /// List exits that are unsafe for a destination given suspect ASes.
    Query(QueryArgs),
    /// Serve the HTTP API.
    Serve(ServeArgs),
    /// Measurement reports.
    #[command(subcommand)]
    Report(Report),
    /// Extract the AS sequence from `traceroute -a` output.
    ParseTraceroute {
        /// Transcript file, `-` for stdin.
        input: PathBuf,
        #[arg(long)]
        json: bool,
    },
}

#[derive(Debug, Args)]
pub struct BuildArgs {
    #[arg(long)]
    pub consensus: PathBuf,
    #[arg(long)]
    pub catalog: PathBuf,
    #[arg(long = "as-rel")]
    pub as_rel: PathBuf,
    #[arg(long)]
    pub pfx2as: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Paths per direction (ignored by refresh-db, which keeps the old value).
    #[arg(long, default_value_t = DEFAULT_K)]
    pub k: usize,
    /// Build timestamp, RFC 3339. Defaults to now.
    #[arg(long = "built-at")]
    pub built_at: Option<DateTime<Utc>>,
    /// `host,ipv4` CSV used instead of DNS for catalog rows without an address.
    #[arg(long)]
    pub resolve: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct QueryArgs {
    #[arg(long)]
    pub db: PathBuf,
    /// Suspect ASes, comma-separated or repeated (`1103`, `AS1103`).
    #[arg(long, value_delimiter = ',', required = true)]
    pub suspects: Vec<String>,
    /// Destination IPv4 address, catalog host or label.
    #[arg(long)]
    pub dest: String,
    /// Print only the torrc lines.
    #[arg(long)]
    pub torrc: bool,
    /// Print the full JSON response.
    #[arg(long)]
    pub json: bool,
    /// Add `StrictNodes 1` to the torrc lines.
    #[arg(long)]
    pub strict: bool,
    /// Leave exits with unknown paths out of the torrc exclusion.
    #[arg(long = "exclude-inconclusive")]
    pub exclude_inconclusive: bool,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long)]
    pub db: PathBuf,
    #[arg(long, default_value = "127.0.0.1")]
    pub bind: String,
    /// Requests per second allowed per connection.
    #[arg(long, default_value_t = 10)]
    pub rate: u32,
    /// Keep aggregate request counters (never payloads) and report them on /v1/health.
    #[arg(long)]
    pub counters: bool,
    /// Check the database file every N seconds and swap in a changed one.
    #[arg(long = "reload-secs")]
    pub reload_secs: Option<u64>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SortArg {
    Bw,
    Relays,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum FlagArg {
    Guard,
    Exit,
}

#[derive(Debug, Subcommand)]
pub enum Report {
    /// Relays and bandwidth grouped by origin AS.
    AsTop {
        #[arg(long)]
        consensus: PathBuf,
        #[arg(long)]
        pfx2as: PathBuf,
        #[arg(long, value_enum, default_value = "bw")]
        sort: SortArg,
        #[arg(long, default_value_t = 10)]
        top: usize,
        #[arg(long)]
        json: bool,
    },
    /// Guards or exits per country.
    Countries {
        #[arg(long)]
        consensus: PathBuf,
        #[arg(long)]
        geoip: PathBuf,
        #[arg(long, value_enum, default_value = "guard")]
        flag: FlagArg,
        #[arg(long)]
        json: bool,
    },
    /// Direct users per guard, by country.
    UsersPerGuard {
        #[arg(long)]
        users: PathBuf,
        /// `country,guards` CSV; otherwise counted from --consensus and --geoip.
        #[arg(long)]
        guards: Option<PathBuf>,
        #[arg(long)]
        consensus: Option<PathBuf>,
        #[arg(long)]
        geoip: Option<PathBuf>,
        #[arg(long)]
        json: bool,
    },
    /// Bytes per relay fitted over a series of consensus documents.
    ConsensusGrowth {
        #[arg(required = true, num_args = 2..)]
        consensus: Vec<PathBuf>,
        #[arg(long)]
        json: bool,
    },
}

fn read(path: &Path) -> Result<Vec<u8>> {
    if path.as_os_str() == "-" {
        let mut buf = Vec::new();
        std::io::Read::read_to_end(&mut std::io::stdin(), &mut buf)?;
        return Ok(buf);
    }
    fs::read(path).with_context(|| format!("reading {}", path.display()))
}

pub fn load_consensus(path: &Path) -> Result<ConsensusSnapshot> {
    parse_consensus(&read(path)?).with_context(|| format!("parsing {}", path.display()))
}

fn load_topology(path: &Path) -> Result<AsTopology> {
    load_as_relationships(&read(path)?).with_context(|| format!("parsing {}", path.display()))
}

fn load_prefixes(path: &Path) -> Result<PrefixTable> {
    load_prefix_table(&read(path)?).with_context(|| format!("parsing {}", path.display()))
}

pub fn load_db(path: &Path) -> Result<PathDb> {
    let text = String::from_utf8(read(path)?).context("database is not UTF-8")?;
    let db = read_path_db(&text).with_context(|| format!("parsing {}", path.display()))?;
    db.validate()?;
    Ok(db)
}

struct DnsResolver;

impl Resolver for DnsResolver {
    fn resolve(&self, host: &str) -> Option<Ipv4Addr> {
        (host, 0).to_socket_addrs().ok()?.find_map(|a| match a {
            SocketAddr::V4(v4) => Some(*v4.ip()),
            SocketAddr::V6(_) => None,
        })
    }
}

struct Inputs {
    snapshot: ConsensusSnapshot,
    catalog: DestinationCatalog,
    topology: AsTopology,
    table: PrefixTable,
    built_at: DateTime<Utc>,
}

fn load_inputs(args: &BuildArgs) -> Result<Inputs> {
    let built_at = args.built_at.unwrap_or_else(Utc::now);
    let snapshot = load_consensus(&args.consensus)?;
    let topology = load_topology(&args.as_rel)?;
    let table = load_prefixes(&args.pfx2as)?;
    let resolver: Box<dyn Resolver> = match &args.resolve {
        Some(path) => Box::new(FixtureResolver::from_csv(&read(path)?)?),
        None => Box::new(DnsResolver),
    };
    let catalog = DestinationCatalog::from_csv(&read(&args.catalog)?, resolver.as_ref(), &table, built_at)
        .with_context(|| format!("loading {}", args.catalog.display()))?;
    Ok(Inputs {
        snapshot,
        catalog,
        topology,
        table,
        built_at,
    })
}

fn save_db(db: &PathDb, path: &Path) -> Result<()> {
    // write-then-rename so a serving process never reads a half-written file
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, write_path_db(db)).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("renaming to {}", path.display()))?;
    Ok(())
}

fn db_summary(db: &PathDb) -> String {
    format!(
        "{} exits, {} destinations, {} entries\n",
        db.exits.len(),
        db.destinations.len(),
        db.entries.len()
    )
}

fn to_json<T: serde::Serialize>(value: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(value)? + "\n")
}

/// Runs every subcommand except `serve`, returning what goes to stdout.
pub fn run(command: Command) -> Result<String> {
    match command {
        Command::BuildDb(args) => {
            let inputs = load_inputs(&args)?;
            let db = build_path_db(
                &inputs.snapshot,
                &inputs.catalog,
                &inputs.topology,
                &inputs.table,
                args.k,
                inputs.built_at,
            );
            save_db(&db, &args.out)?;
            Ok(db_summary(&db))
        }
        Command::RefreshDb { db, inputs: args } => {
            let previous = load_db(&db)?;
            let inputs = load_inputs(&args)?;
            let (next, stats) = refresh(
                &previous,
                &inputs.snapshot,
                &inputs.catalog,
                &inputs.topology,
                &inputs.table,
                inputs.built_at,
            );
            save_db(&next, &args.out)?;
            Ok(format!(
                "{}reused {}, recomputed {}\n",
                db_summary(&next),
                stats.reused,
                stats.recomputed
            ))
        }
        Command::Query(args) => query(&args),
        Command::Serve(_) => bail!("serve is handled by the binary entry point"),
        Command::Report(report) => run_report(report),
        Command::ParseTraceroute { input, json } => {
            let report = parse_traceroute(&read(&input)?)?;
            if json {
                return to_json(&report);
            }
            let seq: Vec<String> = report.as_sequence.iter().map(|a| a.to_string()).collect();
            Ok(format!("{}\nprivate hops: {}\n", seq.join(","), report.private_hops))
        }
    }
}

fn query(args: &QueryArgs) -> Result<String> {
    let db = load_db(&args.db)?;
    let request = QueryRequest {
        suspect_asns: args.suspects.iter().map(|s| AsnInput::Text(s.clone())).collect(),
        destination: args.dest.clone(),
        include_inconclusive: !args.exclude_inconclusive,
        strict: args.strict,
    };
    let response = handle_query(&request, &db)?;
    if args.json {
        return Ok(response.to_json() + "\n");
    }
    if args.torrc {
        return Ok(response.torrc);
    }
    let mut out = String::new();
    for ip in &response.unsafe_exits {
        out.push_str(&format!("{ip}\n"));
    }
    for ip in &response.inconclusive_exits {
        out.push_str(&format!("{ip}\tinconclusive\n"));
    }
    Ok(out)
}

fn run_report(report: Report) -> Result<String> {
    match report {
        Report::AsTop {
            consensus,
            pfx2as,
            sort,
            top,
            json,
        } => {
            let snapshot = load_consensus(&consensus)?;
            let table = load_prefixes(&pfx2as)?;
            let key = match sort {
                SortArg::Bw => SortKey::ByBandwidth,
                SortArg::Relays => SortKey::ByRelays,
            };
            let rows = analytics::aggregate_by_as(&snapshot, &table, key, top);
            if json {
                to_json(&rows)
            } else {
                Ok(analytics::render_as_report_tsv(&rows))
            }
        }
        Report::Countries {
            consensus,
            geoip,
            flag,
            json,
        } => {
            let snapshot = load_consensus(&consensus)?;
            let geo = analytics::load_geoip(&read(&geoip)?)?;
            let flag = match flag {
                FlagArg::Guard => Flag::Guard,
                FlagArg::Exit => Flag::Exit,
            };
            let rows = analytics::country_distribution(&snapshot, &geo, flag);
            if json {
                to_json(&rows)
            } else {
                Ok(analytics::render_countries_tsv(&rows))
            }
        }
        Report::UsersPerGuard {
            users,
            guards,
            consensus,
            geoip,
            json,
        } => {
            let users = analytics::load_users_by_country(&read(&users)?)?;
            let guards = match (guards, consensus, geoip) {
                (Some(path), _, _) => analytics::load_guards_by_country(&read(&path)?)?,
                (None, Some(c), Some(g)) => {
                    analytics::guards_by_country(&load_consensus(&c)?, &analytics::load_geoip(&read(&g)?)?)
                }
                _ => bail!("give --guards, or both --consensus and --geoip"),
            };
            let rows = analytics::users_per_guard(&users, &guards);
            if json {
                to_json(&rows)
            } else {
                Ok(analytics::render_users_per_guard_tsv(&rows))
            }
        }
        Report::ConsensusGrowth { consensus, json } => {
            let snapshots = consensus
                .iter()
                .map(|p| load_consensus(p))
                .collect::<Result<Vec<_>>>()?;
            let stats = analytics::consensus_growth::<f64>(&snapshots)?;
            if json {
                to_json(&stats)
            } else {
                Ok(analytics::render_growth_tsv(&stats))
            }
        }
    }
}
