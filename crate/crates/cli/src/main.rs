//! `otshadow`: scenario runner, device server and management client.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use otshadow_core::device::{run_scenario, write_run_csv, Device, DeviceHandle, ExportSection, RunMode};
use otshadow_core::scenario::Scenario;
use otshadow_gateway::coordinator::{RemoteParticipant, SwitchCoordinator};
use otshadow_gateway::protocol::SwitchPhase;
use otshadow_gateway::{server, Client, Gateway, GatewayConfig, ManagementMessage, MessageType, Participant};

#[derive(Parser)]
#[command(
    name = "otshadow",
    version,
    about = "Shadow deployment and A/B switching for cyclic controllers"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario to completion and write the per-cycle CSV.
    Run(RunArgs),
    /// Run a scenario's device and serve the management protocol.
    Serve(ServeArgs),
    /// Deploy the configured (or given) shadow service.
    DeployShadow {
        #[arg(long, default_value_t = 0)]
        asset: usize,
        /// JSON file with a service deployment; the device's configured
        /// shadow when omitted.
        #[arg(long)]
        service: Option<PathBuf>,
        #[command(flatten)]
        conn: Conn,
    },
    /// Switch the asset to B at the start of a cycle.
    Promote {
        #[arg(long)]
        cycle: Option<u64>,
        #[arg(long, default_value_t = 0)]
        asset: usize,
        /// Phase of a coordinated switch.
        #[arg(long, value_enum)]
        phase: Option<Phase>,
        #[command(flatten)]
        conn: Conn,
    },
    /// Switch the asset back to A at the start of a cycle.
    Rollback {
        #[arg(long)]
        cycle: u64,
        #[arg(long, default_value_t = 0)]
        asset: usize,
        #[command(flatten)]
        conn: Conn,
    },
    /// Stop the shadow and retire it.
    Abort {
        #[arg(long, default_value_t = 0)]
        asset: usize,
        #[command(flatten)]
        conn: Conn,
    },
    /// Print the device's management snapshot.
    Status {
        /// Extra sections to include (twin_csv, supervisory_csv,
        /// metrics_csv, history, management_log).
        #[arg(long)]
        include: Vec<String>,
        #[command(flatten)]
        conn: Conn,
    },
    /// Pull a CSV export from the device.
    Export {
        #[arg(long)]
        csv: PathBuf,
        #[arg(long, value_enum, default_value_t = Section::Twin)]
        section: Section,
        #[command(flatten)]
        conn: Conn,
    },
    /// Print metrics pushes.
    Subscribe {
        #[arg(long)]
        interval_ms: Option<u64>,
        /// Stop after this many pushes.
        #[arg(long)]
        count: Option<usize>,
        #[command(flatten)]
        conn: Conn,
    },
    /// Agree on one switch cycle across several devices.
    Coordinate {
        /// Gateway address of each participating device.
        #[arg(long = "device", required = true)]
        devices: Vec<String>,
        #[arg(long, default_value_t = 0)]
        asset: usize,
        /// Proposed switch cycle; the earliest admissible one if omitted.
        #[arg(long)]
        cycle: Option<u64>,
        #[arg(long, default_value_t = 2000)]
        timeout_ms: u64,
    },
}

#[derive(Args)]
struct RunArgs {
    scenario: PathBuf,
    /// Per-cycle CSV for asset 0; further assets go next to it with an
    /// `.asset<N>` suffix.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Also write the twin's level-2 and level-3 CSVs into this directory.
    #[arg(long)]
    twin_dir: Option<PathBuf>,
}

#[derive(Args)]
struct ServeArgs {
    scenario: PathBuf,
    /// Gateway config file (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    listen: Option<std::net::SocketAddr>,
    #[arg(long)]
    http_listen: Option<std::net::SocketAddr>,
    /// Run deterministic scenarios as fast as possible instead of one
    /// period per cycle.
    #[arg(long)]
    no_pace: bool,
    /// Keep stepping past the scenario's cycle count.
    #[arg(long)]
    forever: bool,
}

#[derive(Args)]
struct Conn {
    /// Gateway address.
    #[arg(long, env = "OTSHADOW_CONNECT", default_value = "127.0.0.1:7400")]
    connect: String,
    /// Print the request line and exit without connecting.
    #[arg(long)]
    print_message: bool,
    #[arg(long, default_value_t = 5000)]
    timeout_ms: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum Phase {
    Prepare,
    Commit,
    Release,
}

impl From<Phase> for SwitchPhase {
    fn from(p: Phase) -> Self {
        match p {
            Phase::Prepare => SwitchPhase::Prepare,
            Phase::Commit => SwitchPhase::Commit,
            Phase::Release => SwitchPhase::Release,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Section {
    Twin,
    Supervisory,
    Metrics,
}

impl From<Section> for ExportSection {
    fn from(s: Section) -> Self {
        match s {
            Section::Twin => ExportSection::TwinCsv,
            Section::Supervisory => ExportSection::SupervisoryCsv,
            Section::Metrics => ExportSection::MetricsCsv,
        }
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::from_default_env())
        .with_writer(std::io::stderr)
        .init();
    match dispatch(Cli::parse().command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn dispatch(cmd: Command) -> Result<ExitCode> {
    match cmd {
        Command::Run(args) => run(args),
        Command::Serve(args) => serve(args),
        Command::DeployShadow { asset, service, conn } => {
            let mut payload = json!({ "asset": asset });
            if let Some(path) = service {
                let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
                payload["service"] = serde_json::from_str(&text).context("service file is not JSON")?;
            }
            request(&conn, MessageType::DeployShadow, payload)
        }
        Command::Promote {
            cycle,
            asset,
            phase,
            conn,
        } => {
            let mut payload = json!({ "asset": asset });
            if let Some(k) = cycle {
                payload["cycle"] = json!(k);
            }
            match phase {
                Some(p) => payload["phase"] = json!(SwitchPhase::from(p)),
                None if cycle.is_none() => bail!("--cycle is required"),
                None => {}
            }
            request(&conn, MessageType::Promote, payload)
        }
        Command::Rollback { cycle, asset, conn } => {
            request(&conn, MessageType::Rollback, json!({ "asset": asset, "cycle": cycle }))
        }
        Command::Abort { asset, conn } => request(&conn, MessageType::Abort, json!({ "asset": asset })),
        Command::Status { include, conn } => {
            let payload = if include.is_empty() {
                json!({})
            } else {
                json!({ "include": include })
            };
            request(&conn, MessageType::Status, payload)
        }
        Command::Export { csv, section, conn } => export(&csv, section.into(), &conn),
        Command::Subscribe {
            interval_ms,
            count,
            conn,
        } => subscribe(interval_ms, count, &conn),
        Command::Coordinate {
            devices,
            asset,
            cycle,
            timeout_ms,
        } => coordinate(&devices, asset, cycle, Duration::from_millis(timeout_ms)),
    }
}

fn run(args: RunArgs) -> Result<ExitCode> {
    let scenario = Scenario::from_path(&args.scenario)?;
    let (device, summary) = run_scenario(&scenario, true)?;
    let csv = args
        .csv
        .unwrap_or_else(|| PathBuf::from(format!("{}.csv", scenario.name)));
    for asset in 0..scenario.assets.len() {
        let path = if asset == 0 {
            csv.clone()
        } else {
            asset_path(&csv, asset)
        };
        let mut out = BufWriter::new(File::create(&path).with_context(|| format!("creating {}", path.display()))?);
        write_run_csv(device.rows(), asset, &mut out)?;
        out.flush()?;
    }
    if let Some(dir) = args.twin_dir {
        write_twin(&device, &dir)?;
    }
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(if summary.success() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

fn asset_path(base: &Path, asset: usize) -> PathBuf {
    let stem = base.file_stem().and_then(|s| s.to_str()).unwrap_or("run");
    let ext = base.extension().and_then(|s| s.to_str()).unwrap_or("csv");
    base.with_file_name(format!("{stem}.asset{asset}.{ext}"))
}

fn write_twin(device: &Device, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (section, file) in [
        (ExportSection::TwinCsv, "twin_level2.csv"),
        (ExportSection::SupervisoryCsv, "twin_level3.csv"),
        (ExportSection::MetricsCsv, "metrics.csv"),
        (ExportSection::History, "adaptation.ndjson"),
        (ExportSection::ManagementLog, "management.ndjson"),
    ] {
        std::fs::write(dir.join(file), section.export(device)?)?;
    }
    Ok(())
}

fn serve(args: ServeArgs) -> Result<ExitCode> {
    let scenario = Scenario::from_path(&args.scenario)?;
    let mut config = GatewayConfig::load(args.config.as_deref())?;
    if let Some(l) = args.listen {
        config.listen = l;
    }
    if let Some(h) = args.http_listen {
        config.http_listen = Some(h);
    }
    let device = Device::from_scenario(&scenario, scenario.name.clone())?;
    let handle = DeviceHandle::spawn(
        device,
        RunMode {
            until: (!args.forever).then_some(scenario.cycles),
            pace: !args.no_pace,
        },
    )?;
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(async {
        let gateway = Gateway::bind(&config, server::shared(handle)).await?;
        eprintln!("management on {}", gateway.local_addr()?);
        if let Some(h) = gateway.http_addr() {
            eprintln!("http bridge on http://{h} (POST /rpc, GET /events)");
        }
        gateway
            .run(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await?;
        anyhow::Ok(())
    })?;
    Ok(ExitCode::SUCCESS)
}

fn connect(conn: &Conn) -> Result<Client> {
    Client::connect(conn.connect.as_str(), Duration::from_millis(conn.timeout_ms))
        .with_context(|| format!("connecting to {}", conn.connect))
}

/// Sends one request and prints the reply; exit status 1 on an error reply.
fn request(conn: &Conn, kind: MessageType, payload: Value) -> Result<ExitCode> {
    if conn.print_message {
        let msg = ManagementMessage::new(kind, "1", payload);
        print!("{}", otshadow_gateway::codec::encode(&msg));
        return Ok(ExitCode::SUCCESS);
    }
    let reply = connect(conn)?.request(kind, payload)?;
    println!("{}", serde_json::to_string_pretty(&reply)?);
    Ok(exit_for(&reply))
}

fn exit_for(reply: &ManagementMessage) -> ExitCode {
    if reply.kind == MessageType::Ack {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn export(path: &Path, section: ExportSection, conn: &Conn) -> Result<ExitCode> {
    let name = serde_json::to_value(section)?;
    let payload = json!({ "include": [name] });
    if conn.print_message {
        return request(conn, MessageType::Status, payload);
    }
    let reply = connect(conn)?.request(MessageType::Status, payload)?;
    if reply.kind != MessageType::Ack {
        println!("{}", serde_json::to_string_pretty(&reply)?);
        return Ok(ExitCode::FAILURE);
    }
    let content = name
        .as_str()
        .and_then(|n| reply.payload.get("exports")?.get(n)?.as_str())
        .context("reply has no export section")?;
    std::fs::write(path, content).with_context(|| format!("writing {}", path.display()))?;
    eprintln!("wrote {} ({} lines)", path.display(), content.lines().count());
    Ok(ExitCode::SUCCESS)
}

fn subscribe(interval_ms: Option<u64>, count: Option<usize>, conn: &Conn) -> Result<ExitCode> {
    let payload = match interval_ms {
        Some(ms) => json!({ "interval_ms": ms }),
        None => json!({}),
    };
    if conn.print_message {
        return request(conn, MessageType::SubscribeMetrics, payload);
    }
    let mut client = connect(conn)?;
    let ack = client.request(MessageType::SubscribeMetrics, payload)?;
    if ack.kind != MessageType::Ack {
        println!("{}", serde_json::to_string(&ack)?);
        return Ok(ExitCode::FAILURE);
    }
    let mut seen = 0;
    while count.is_none_or(|n| seen < n) {
        let push = client.next_push()?;
        println!("{}", serde_json::to_string(&push)?);
        seen += 1;
    }
    Ok(ExitCode::SUCCESS)
}

fn coordinate(devices: &[String], asset: usize, cycle: Option<u64>, timeout: Duration) -> Result<ExitCode> {
    let mut remotes = devices
        .iter()
        .map(|addr| {
            let client = Client::connect(addr.as_str(), timeout).with_context(|| format!("connecting to {addr}"))?;
            Ok(RemoteParticipant::new(addr.clone(), client))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut parts: Vec<&mut dyn Participant> = remotes.iter_mut().map(|r| r as &mut dyn Participant).collect();
    let outcome = SwitchCoordinator::new(timeout).coordinate(&mut parts, asset, cycle);
    println!("{}", serde_json::to_string_pretty(&outcome)?);
    Ok(if outcome.committed {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}
