//! `campus-pass`: run the server, host virtual devices, run scenario scripts,
//! export attendance and follow the event stream.

mod device;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use campus_pass_core::config::Settings;
use campus_pass_core::sim::{run_scenario, ScenarioScript, DEMO_WORLD};
use campus_pass_core::time::SystemClock;
use campus_pass_core::world::World;
use clap::{Args, Parser, Subcommand, ValueEnum};
use thiserror::Error;

#[derive(Parser)]
#[command(name = "campus-pass", version, about = "Campus RFID door, attendance and payment platform")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Config file of `key = value` lines.
    #[arg(long, env = "CAMPUS_PASS_CONFIG")]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set relock_after=3`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct ServerArgs {
    /// Base URL of the server's HTTP API.
    #[arg(long, default_value = "http://127.0.0.1:7411")]
    server: String,
    /// Admin token sent as the `x-admin-token` header.
    #[arg(long, env = "CAMPUS_PASS_ADMIN_TOKEN")]
    admin_token: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Start the control server.
    Serve(ConfigArgs),
    /// Run one virtual device against a server, driven by stdin lines.
    Device {
        kind: DeviceKindArg,
        #[arg(long)]
        id: String,
        /// Server wire address.
        #[arg(long, default_value = "127.0.0.1:7410")]
        connect: String,
        /// Attendance session; defaults to the reader's configured session.
        #[arg(long)]
        session: Option<String>,
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        server: ServerArgs,
    },
    /// Deterministic scenario scripts.
    Scenario {
        #[command(subcommand)]
        command: ScenarioCommand,
    },
    /// Export records.
    Export {
        #[command(subcommand)]
        command: ExportCommand,
    },
    /// Event log access.
    Events {
        #[command(subcommand)]
        command: EventsCommand,
    },
}

#[derive(Subcommand)]
enum ScenarioCommand {
    /// Run a script on a simulated clock and print the event trace.
    Run {
        file: PathBuf,
        /// World config; defaults to `--config`, then the built-in demo world.
        #[arg(long)]
        world: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArgs,
    },
}

#[derive(Subcommand)]
enum ExportCommand {
    /// Write a session's attendance CSV.
    Attendance {
        #[arg(long)]
        session: String,
        #[arg(long)]
        out: PathBuf,
        /// Read from an event log file instead of a running server.
        #[arg(long)]
        log: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        server: ServerArgs,
    },
}

#[derive(Subcommand)]
enum EventsCommand {
    /// Print the log from `--since`, then follow new events.
    Tail {
        #[arg(long, default_value_t = 0)]
        since: u64,
        /// Stop after the backlog instead of following.
        #[arg(long)]
        no_follow: bool,
        #[command(flatten)]
        server: ServerArgs,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum DeviceKindArg {
    Door,
    Attendance,
    Pos,
}

#[derive(Debug, Error)]
enum CliError {
    #[error("{path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Write { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Scenario(String),
    #[error(transparent)]
    Server(#[from] campus_pass_server::ServerError),
    #[error("http: {0}")]
    Http(#[from] reqwest::Error),
    #[error("server replied {status}: {body}")]
    Status { status: u16, body: String },
    #[error("device: {0}")]
    Device(String),
}

fn read_file(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|source| CliError::Read {
        path: path.to_path_buf(),
        source,
    })
}

fn load_settings(args: &ConfigArgs, fallback: Option<&str>) -> Result<Settings, CliError> {
    let text = match (&args.config, fallback) {
        (Some(path), _) => read_file(path)?,
        (None, Some(text)) => text.to_string(),
        (None, None) => String::new(),
    };
    let mut settings = Settings::parse(&text).map_err(|e| CliError::Config(e.to_string()))?;
    for o in &args.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("override {o:?} is not KEY=VALUE")))?;
        settings.set(k.trim(), v.trim()).map_err(|e| CliError::Config(e.to_string()))?;
    }
    settings
        .world
        .platform
        .validate()
        .map_err(|e| CliError::Config(e.to_string()))?;
    Ok(settings)
}

fn http_client(server: &ServerArgs) -> Result<reqwest::Client, CliError> {
    let mut headers = reqwest::header::HeaderMap::new();
    if let Some(token) = &server.admin_token {
        let value = token
            .parse()
            .map_err(|_| CliError::Config("admin token is not a valid header value".into()))?;
        headers.insert(campus_pass_server::ADMIN_TOKEN_HEADER, value);
    }
    Ok(reqwest::Client::builder().default_headers(headers).build()?)
}

async fn checked(resp: reqwest::Response) -> Result<reqwest::Response, CliError> {
    if resp.status().is_success() {
        return Ok(resp);
    }
    let status = resp.status().as_u16();
    let body = resp.text().await.unwrap_or_default();
    Err(CliError::Status { status, body })
}

async fn serve(args: ConfigArgs) -> Result<(), CliError> {
    let settings = load_settings(&args, None)?;
    let running = campus_pass_server::start(&settings, Arc::new(SystemClock::new())).await?;
    println!(
        "listening wire={} http={} modem={}",
        running.wire_addr, running.http_addr, running.modem_addr
    );
    tokio::select! {
        _ = running.wait() => {}
        _ = tokio::signal::ctrl_c() => {}
    }
    Ok(())
}

/// Returns whether every `expect` passed.
fn scenario_run(file: &Path, world: Option<&Path>, config: &ConfigArgs) -> Result<bool, CliError> {
    let settings = match world {
        Some(path) => load_settings(
            &ConfigArgs {
                config: Some(path.to_path_buf()),
                overrides: config.overrides.clone(),
            },
            None,
        )?,
        None => load_settings(config, Some(DEMO_WORLD))?,
    };
    let script = ScenarioScript::parse(&read_file(file)?)
        .map_err(|e| CliError::Scenario(format!("{}: {e}", file.display())))?;
    let result = run_scenario(&script, &settings.world).map_err(|e| CliError::Scenario(e.to_string()))?;
    print!("{}", result.trace_text());
    for e in &result.expects {
        let verdict = if e.passed { "pass" } else { "FAIL" };
        eprintln!("expect line {}: {} {} by {}: {verdict}", e.line, e.kind, e.device, e.at);
    }
    Ok(result.passed())
}

async fn export_attendance(
    session: &str,
    out: &Path,
    log: Option<&Path>,
    config: &ConfigArgs,
    server: &ServerArgs,
) -> Result<(), CliError> {
    let csv = match log {
        Some(path) => {
            let settings = load_settings(config, None)?;
            let bytes = std::fs::read(path).map_err(|source| CliError::Read {
                path: path.to_path_buf(),
                source,
            })?;
            let world = World::replay(settings.world, &bytes, None).map_err(|e| CliError::Config(e.to_string()))?;
            world.export_csv(session).map_err(|e| CliError::Config(e.to_string()))?
        }
        None => {
            let url = format!("{}/sessions/{session}/attendance.csv", server.server.trim_end_matches('/'));
            let resp = checked(http_client(server)?.get(url).send().await?).await?;
            resp.bytes().await?.to_vec()
        }
    };
    std::fs::write(out, csv).map_err(|source| CliError::Write {
        path: out.to_path_buf(),
        source,
    })
}

const TAIL_PAGE: usize = 1000;

async fn events_tail(since: u64, follow: bool, server: &ServerArgs) -> Result<(), CliError> {
    use std::io::Write;
    let client = http_client(server)?;
    let base = server.server.trim_end_matches('/');
    let mut stdout = std::io::stdout().lock();
    let mut last = since;
    loop {
        let url = format!("{base}/events?since={last}&limit={TAIL_PAGE}");
        let page: Vec<campus_pass_core::EventRecord> = checked(client.get(url).send().await?).await?.json().await?;
        for e in &page {
            stdout.write_all(e.to_line().as_bytes()).ok();
            last = e.seq;
        }
        if page.len() < TAIL_PAGE {
            break;
        }
    }
    stdout.flush().ok();
    if !follow {
        return Ok(());
    }
    let mut resp = checked(client.get(format!("{base}/events/stream?since={last}")).send().await?).await?;
    while let Some(chunk) = resp.chunk().await? {
        stdout.write_all(&chunk).ok();
        stdout.flush().ok();
    }
    Ok(())
}

async fn run(cli: Cli) -> Result<ExitCode, CliError> {
    match cli.command {
        Command::Serve(args) => serve(args).await?,
        Command::Device {
            kind,
            id,
            connect,
            session,
            config,
            server,
        } => {
            let settings = load_settings(&config, None)?;
            let client = http_client(&server)?;
            let host = device::Host::new(&settings, &id, &connect, client, &server.server)?;
            match kind {
                DeviceKindArg::Door => host.run_door().await?,
                DeviceKindArg::Attendance => host.run_attendance(session).await?,
                DeviceKindArg::Pos => host.run_pos().await?,
            }
        }
        Command::Scenario {
            command: ScenarioCommand::Run { file, world, config },
        } => {
            if !scenario_run(&file, world.as_deref(), &config)? {
                return Ok(ExitCode::from(1));
            }
        }
        Command::Export {
            command:
                ExportCommand::Attendance {
                    session,
                    out,
                    log,
                    config,
                    server,
                },
        } => export_attendance(&session, &out, log.as_deref(), &config, &server).await?,
        Command::Events {
            command: EventsCommand::Tail {
                since,
                no_follow,
                server,
            },
        } => events_tail(since, !no_follow, &server).await?,
    }
    Ok(ExitCode::SUCCESS)
}

#[tokio::main]
async fn main() -> ExitCode {
    tracing_subscriber::fmt().with_writer(std::io::stderr).init();
    match run(Cli::parse()).await {
        Ok(code) => code,
        Err(e) => {
            eprintln!("campus-pass: {e}");
            ExitCode::from(2)
        }
    }
}
