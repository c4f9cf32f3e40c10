use std::net::SocketAddr;
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{Context, Result};
use asmon::cli::{self, Cli, Command, ServeArgs};
use asmon::server::{self, AppState, Counters};
use asmon_core::DbHandle;
use clap::Parser;

fn main() -> ExitCode {
    let parsed = Cli::parse();
    let result = match parsed.command {
        Command::Serve(args) => serve(args),
        other => cli::run(other).map(|out| print!("{out}")),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn serve(args: ServeArgs) -> Result<()> {
    let db = Arc::new(DbHandle::with_database(cli::load_db(&args.db)?)?);
    let mut state = AppState::new(db.clone(), args.rate);
    if args.counters {
        state.counters = Some(Arc::new(Counters::default()));
    }
    let addr: SocketAddr = format!("{}:{}", args.bind, args.port)
        .parse()
        .context("bad --bind/--port")?;
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(async move {
        if let Some(secs) = args.reload_secs {
            tokio::spawn(server::watch_database(db, args.db.clone(), Duration::from_secs(secs.max(1))));
        }
        let listener = tokio::net::TcpListener::bind(addr).await?;
        eprintln!("listening on {addr}");
        let app = server::router(state).into_make_service_with_connect_info::<SocketAddr>();
        axum::serve(listener, app).await?;
        Ok(())
    })
}
