use std::path::PathBuf;

use asmon::cli::{run, Cli};
use clap::Parser;

fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn asmon(args: &[&str]) -> anyhow::Result<String> {
    let mut argv = vec!["asmon".to_string()];
    argv.extend(args.iter().map(|a| a.replace("@", fixtures().to_str().unwrap())));
    run(Cli::try_parse_from(argv)?.command)
}

fn golden(name: &str) -> String {
    std::fs::read_to_string(fixtures().join("golden").join(name)).unwrap()
}

#[test]
fn query_outputs_match_goldens() {
    let base = ["query", "--db", "@/world/fx_db.pathdb", "--suspects", "AS1103", "--dest", "141.0.174.41"];
    assert_eq!(asmon(&base).unwrap(), golden("query_1103.txt"));
    assert_eq!(asmon(&[&base[..], &["--torrc"]].concat()).unwrap(), golden("query_1103.torrc"));
    assert_eq!(asmon(&[&base[..], &["--json"]].concat()).unwrap(), golden("query_1103.json"));
}

#[test]
fn destination_can_be_a_label_or_host() {
    let by_label = asmon(&["query", "--db", "@/world/fx_db.pathdb", "--suspects", "1103", "--dest", "adult"]).unwrap();
    assert_eq!(by_label, golden("query_1103.txt"));
    let strict = asmon(&[
        "query", "--db", "@/world/fx_db.pathdb", "--suspects", "1103", "--dest", "adult", "--torrc", "--strict",
    ])
    .unwrap();
    assert_eq!(strict, golden("query_1103.torrc") + "StrictNodes 1\n");
}

#[test]
fn bad_inputs_are_errors() {
    let db = ["query", "--db", "@/world/fx_db.pathdb", "--dest", "141.0.174.41", "--suspects"];
    let err = asmon(&[&db[..], &["AS11x3"]].concat()).unwrap_err();
    assert!(format!("{err:#}").contains("AS11x3"));
    assert!(asmon(&["query", "--db", "@/world/fx_db.pathdb", "--suspects", "1103", "--dest", "10.9.9.9"]).is_err());
    assert!(asmon(&["query", "--db", "@/nope.pathdb", "--suspects", "1103", "--dest", "adult"]).is_err());
}

#[test]
fn build_reproduces_stored_database() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("db.pathdb");
    let summary = asmon(&[
        "build-db",
        "--consensus", "@/world/consensus.txt",
        "--catalog", "@/world/catalog.csv",
        "--as-rel", "@/world/as-rel.txt",
        "--pfx2as", "@/world/pfx2as.txt",
        "--resolve", "@/world/resolver.csv",
        "--built-at", "2016-07-23T16:00:00Z",
        "--out", out.to_str().unwrap(),
    ])
    .unwrap();
    assert_eq!(summary, "6 exits, 3 destinations, 18 entries\n");
    let built = std::fs::read_to_string(&out).unwrap();
    assert_eq!(built, std::fs::read_to_string(fixtures().join("world/fx_db.pathdb")).unwrap());

    let again = dir.path().join("again.pathdb");
    let refreshed = asmon(&[
        "refresh-db",
        "--db", out.to_str().unwrap(),
        "--consensus", "@/world/consensus.txt",
        "--catalog", "@/world/catalog.csv",
        "--as-rel", "@/world/as-rel.txt",
        "--pfx2as", "@/world/pfx2as.txt",
        "--resolve", "@/world/resolver.csv",
        "--built-at", "2016-07-23T16:00:00Z",
        "--out", again.to_str().unwrap(),
    ])
    .unwrap();
    assert!(refreshed.ends_with("reused 18, recomputed 0\n"), "{refreshed}");
    assert_eq!(std::fs::read_to_string(&again).unwrap(), built);
}

#[test]
fn reports_match_goldens() {
    let top = |sort: &str| {
        asmon(&[
            "report", "as-top", "--consensus", "@/analytics/consensus.txt", "--pfx2as", "@/analytics/pfx2as.txt",
            "--sort", sort,
        ])
        .unwrap()
    };
    assert_eq!(top("relays"), golden("as_top_relays.tsv"));
    assert_eq!(top("bw"), golden("as_top_bw.tsv"));
    let countries = asmon(&[
        "report", "countries", "--consensus", "@/analytics/consensus.txt", "--geoip", "@/analytics/geoip.csv",
        "--flag", "exit",
    ])
    .unwrap();
    assert_eq!(countries, golden("countries_exit.tsv"));
    let upg = asmon(&[
        "report", "users-per-guard", "--users", "@/users_by_country.csv", "--guards", "@/guards_by_country.csv",
    ])
    .unwrap();
    assert_eq!(upg, golden("users_per_guard.tsv"));
}

#[test]
fn traceroute_summary() {
    let out = asmon(&["parse-traceroute", "@/client_traceroute.txt"]).unwrap();
    assert_eq!(out, "56220,2516,3257,8001,63949\nprivate hops: 1\n");
}
