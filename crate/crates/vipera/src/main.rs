use std::net::SocketAddr;
use std::path::PathBuf;
use std::time::Duration;

use anyhow::Context;
use clap::{Parser, Subcommand};
use vipera::config::{Settings, DEFAULT_DATA_DIR, DEFAULT_PARALLELISM};
use vipera::demo::{run_audit, run_demo, AuditConfig, DemoOptions, DEMO_COUNT};
use vipera::service::Service;

#[derive(Parser)]
#[command(name = "vipera", version, about = "Audit text-to-image models through scene graphs and labeled criteria")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Serve the HTTP API.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: std::net::IpAddr,
        /// Overrides VIPERA_DATA_DIR.
        #[arg(long)]
        data_dir: Option<PathBuf>,
        /// Directory of static UI assets served at `/`.
        #[arg(long)]
        assets: Option<PathBuf>,
    },
    /// Run a headless audit described by a TOML file and write the report.
    Audit {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "report.md")]
        out: PathBuf,
        #[arg(long)]
        data_dir: Option<PathBuf>,
    },
    /// Run the offline walk-through with stub providers and print a JSON summary.
    Demo {
        #[arg(long, default_value = DEFAULT_DATA_DIR)]
        data_dir: PathBuf,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, default_value_t = DEMO_COUNT)]
        count: u32,
        /// Abort the process right after step N.
        #[arg(long)]
        abort_after: Option<usize>,
        /// Maximum simulated latency per stub call.
        #[arg(long, default_value_t = 0)]
        stub_latency_ms: u64,
        #[arg(long, default_value_t = DEFAULT_PARALLELISM)]
        parallelism: usize,
    },
}

fn settings(data_dir: Option<PathBuf>) -> anyhow::Result<Settings> {
    let mut s = Settings::from_env()?;
    if let Some(d) = data_dir {
        s.data_dir = d;
    }
    Ok(s)
}

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Serve {
            port,
            host,
            data_dir,
            assets,
        } => {
            let svc = Service::from_settings(&settings(data_dir)?)?;
            let resumed = svc.resume_all()?;
            log::info!("resumed {resumed} session(s)");
            let runtime = tokio::runtime::Runtime::new()?;
            runtime.block_on(vipera::http::serve(svc.clone(), SocketAddr::new(host, port), assets))?;
            svc.shutdown();
        }
        Command::Audit { config, out, data_dir } => {
            let config = AuditConfig::load(&config)?;
            let svc = Service::from_settings(&settings(data_dir)?)?;
            let (id, markdown) = run_audit(&svc, &config)?;
            std::fs::write(&out, markdown).with_context(|| format!("writing {}", out.display()))?;
            svc.shutdown();
            println!("session {id}: report written to {}", out.display());
        }
        Command::Demo {
            data_dir,
            seed,
            count,
            abort_after,
            stub_latency_ms,
            parallelism,
        } => {
            let summary = run_demo(&DemoOptions {
                data_dir,
                seed,
                count,
                abort_after,
                stub_latency: Duration::from_millis(stub_latency_ms),
                parallelism,
            })?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
    }
    Ok(())
}
