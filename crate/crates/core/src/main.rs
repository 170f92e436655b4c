use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand};
use tracing_subscriber::EnvFilter;

use clpc::config::ServerConfig;
use clpc::eventlog::{replay_journal, EventLogError};
use clpc::export::{build_bundle, write_bundle, ExportFilter};
use clpc::platform::StartupError;
use clpc::providers::BUILTIN_PROVIDER_IDS;
use clpc::{api, Platform};

const EXIT_VALIDATION: u8 = 1;
const EXIT_IO: u8 = 2;

#[derive(Parser)]
#[command(name = "clpc", version, about = "Experiment chatbot server")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the HTTP server.
    Serve {
        #[arg(long)]
        defaults: PathBuf,
        #[arg(long)]
        experiments: PathBuf,
    },
    /// Check configuration files and report every problem found.
    Validate {
        #[arg(long)]
        defaults: PathBuf,
        #[arg(long)]
        experiments: PathBuf,
    },
    /// Write an export bundle from a data directory without a running server.
    Export {
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        experiment: Option<String>,
        #[arg(long)]
        username: Option<String>,
    },
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")),
        )
        .with_writer(std::io::stderr)
        .init();

    match Cli::parse().command {
        Command::Serve {
            defaults,
            experiments,
        } => serve(defaults, experiments),
        Command::Validate {
            defaults,
            experiments,
        } => validate(defaults, experiments),
        Command::Export {
            data_dir,
            out,
            experiment,
            username,
        } => export(data_dir, out, experiment, username),
    }
}

fn load_config(defaults: &Path, experiments: &Path) -> Result<ServerConfig, ExitCode> {
    ServerConfig::load(defaults, experiments, &BUILTIN_PROVIDER_IDS).map_err(|report| {
        eprintln!("{report}");
        ExitCode::from(if report.is_io() {
            EXIT_IO
        } else {
            EXIT_VALIDATION
        })
    })
}

fn serve(defaults: PathBuf, experiments: PathBuf) -> ExitCode {
    let config = match load_config(&defaults, &experiments) {
        Ok(c) => c,
        Err(code) => return code,
    };
    let listen = config.defaults.listen_address.clone();
    let platform = match Platform::from_config(config) {
        Ok(p) => Arc::new(p),
        Err(e) => {
            eprintln!("{e}");
            return ExitCode::from(match e {
                StartupError::EventLog(EventLogError::Io { .. })
                | StartupError::EventLog(EventLogError::CorruptJournal { .. }) => EXIT_IO,
                _ => EXIT_VALIDATION,
            });
        }
    };

    let runtime = match tokio::runtime::Runtime::new() {
        Ok(rt) => rt,
        Err(e) => {
            eprintln!("failed to start runtime: {e}");
            return ExitCode::from(EXIT_IO);
        }
    };
    let result = runtime.block_on(async move {
        let (listener, addr) = api::bind(&listen).await?;
        println!("clpc listening on {addr}");
        std::io::stdout().flush()?;
        api::serve(platform, listener, async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("server error: {e}");
            ExitCode::from(EXIT_IO)
        }
    }
}

fn validate(defaults: PathBuf, experiments: PathBuf) -> ExitCode {
    let config = match load_config(&defaults, &experiments) {
        Ok(c) => c,
        Err(code) => return code,
    };
    let mut event_types = clpc::eventlog::EventTypeRegistry::with_builtins();
    let mut failed = false;
    for custom in &config.defaults.custom_events {
        if let Err(e) =
            event_types.register_event_type(&custom.type_name, &custom.required_payload_keys)
        {
            eprintln!("{}: custom_events: {e}", defaults.display());
            failed = true;
        }
    }
    if failed {
        return ExitCode::from(EXIT_VALIDATION);
    }
    if config.experiments.is_empty() {
        eprintln!("warning: 0 experiments");
    }
    let providers = BUILTIN_PROVIDER_IDS.len() + config.defaults.providers.len();
    println!(
        "{} experiments, {} providers",
        config.experiments.len(),
        providers
    );
    ExitCode::SUCCESS
}

fn export(
    data_dir: PathBuf,
    out: PathBuf,
    experiment: Option<String>,
    username: Option<String>,
) -> ExitCode {
    let replay = match replay_journal(&data_dir) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("{e}");
            return ExitCode::from(EXIT_IO);
        }
    };
    if replay.torn_records > 0 {
        eprintln!("warning: skipped {} torn record(s)", replay.torn_records);
    }
    let filter = ExportFilter {
        experiment_code: experiment,
        username,
    };
    let bundle = build_bundle(&replay.records, &filter);
    match write_bundle(&bundle, &out) {
        Ok(_) => {
            println!(
                "{} sessions, {} messages, {} events written to {}",
                bundle.sessions.len(),
                bundle.messages.len(),
                bundle.events.len(),
                out.display()
            );
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(EXIT_IO)
        }
    }
}
