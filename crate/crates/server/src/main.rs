use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use clap::{Parser, Subcommand};
use flexext_core::lms::reconcile;
use flexext_core::roster::export_roster_csv;
use flexext_core::{SystemClock, ViewerRole};
use flexext_server::{router, worker, AppState, Auth, Config, ConfigError};

/// Extension-request service for one course.
#[derive(Debug, Parser)]
#[command(name = "flexext", version)]
struct Cli {
    /// Path to the TOML configuration file.
    #[arg(short, long, default_value = "flexext.toml", global = true)]
    config: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the HTTP service and the background dispatcher.
    Serve,
    /// Validate the configuration and templates, then exit.
    CheckConfig,
    /// Replay the event log and print a summary of the resulting state.
    Replay,
    /// Print the roster as CSV.
    Roster {
        /// Blank DSP status and reasons.
        #[arg(long)]
        restricted: bool,
    },
    /// Compare applied extensions with the LMS connector's state.
    Reconcile,
}

enum Failure {
    Config(ConfigError),
    Runtime(String),
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e)
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("configuration error: {e}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let config = Config::load(&cli.config)?;
    match cli.command {
        Command::CheckConfig => {
            config.course_settings()?;
            println!("configuration ok: {} assignments", config.assignments.len());
            Ok(())
        }
        Command::Serve => serve(config),
        Command::Replay => {
            let engine = config.build_engine(Arc::new(SystemClock))?;
            let snapshot = engine.snapshot();
            let summary = serde_json::json!({
                "last_seq": snapshot.last_seq,
                "students": snapshot.students.len(),
                "requests": snapshot.requests.len(),
                "email_jobs": snapshot.jobs.len(),
                "warnings": snapshot.warnings,
            });
            println!("{summary:#}");
            Ok(())
        }
        Command::Roster { restricted } => {
            let engine = config.build_engine(Arc::new(SystemClock))?;
            let role = if restricted { ViewerRole::Restricted } else { ViewerRole::Full };
            let csv = export_roster_csv(&engine.roster(role), &engine.settings().catalog);
            print!("{}", String::from_utf8_lossy(&csv));
            Ok(())
        }
        Command::Reconcile => {
            let engine = config.build_engine(Arc::new(SystemClock))?;
            let report = reconcile(engine.connector(), &engine.snapshot(), &engine.settings().catalog)
                .map_err(|e| Failure::Runtime(e.to_string()))?;
            println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
            Ok(())
        }
    }
}

fn serve(config: Config) -> Result<(), Failure> {
    let engine = Arc::new(config.build_engine(Arc::new(SystemClock))?);
    let state = AppState::new(engine.clone(), Auth::new(&config.auth));
    let runtime = tokio::runtime::Runtime::new().map_err(|e| Failure::Runtime(e.to_string()))?;
    runtime.block_on(async move {
        let address = format!("{}:{}", config.service.bind, config.service.port);
        let listener = tokio::net::TcpListener::bind(&address)
            .await
            .map_err(|e| Failure::Config(ConfigError::Invalid(format!("cannot bind {address}: {e}"))))?;
        let every = Duration::from_secs(config.service.dispatch_interval_secs);
        let dispatcher = worker::spawn(engine, state.nudge.clone(), every);
        tracing::info!(%address, "listening");
        let served = axum::serve(listener, router(state))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await;
        dispatcher.abort();
        served.map_err(|e| Failure::Runtime(e.to_string()))
    })
}
