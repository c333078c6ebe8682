//! A device: one executor with its plants, the adaptation manager and the
//! twins. Management calls happen between cycles and reach the operation
//! plane only through the preparation queue.

use std::collections::BTreeMap;
use std::io::Write;
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender, SyncSender};
use std::sync::{Arc, RwLock};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adaptation::{
    AdaptationError, AdaptationManager, AdaptationState, AdaptationStatus, DeploySpec, ManagerConfig,
};
use crate::control::{ControllerTask, ServiceDescriptor};
use crate::executor::{
    Binding, ClockMode, CycleMetrics, CycleRecord, CycleSchedule, CyclicExecutor, ExecError, RunReport, TaskEntry,
    Ticket, TicketResult, WorkerPlan,
};
use crate::plant::{AssetId, Fieldbus, PlantConfig};
use crate::ring::{Cycle, ReadOutcome, RingReader, Source, TaskId};
use crate::scenario::{EventAction, Scenario};
use crate::separation::SeparationProbe;
use crate::twin::{SharedTwin, TwinConfig, TwinError, TwinLevel, TwinRecorder, TwinStore};

const METRICS_DEPTH: usize = 4096;
const DIVERGENCE_WINDOW: Cycle = 1000;

#[derive(Debug, Error)]
pub enum DeviceError {
    #[error(transparent)]
    Exec(#[from] ExecError),
    #[error(transparent)]
    Twin(#[from] TwinError),
    #[error("configuration error: {0}")]
    Config(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActiveService {
    pub descriptor: ServiceDescriptor,
    pub cost_us: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DeviceConfig {
    pub id: String,
    pub schedule: CycleSchedule,
    pub ring_capacity: usize,
    pub plants: Vec<PlantConfig>,
    /// Baseline controller per asset; `None` leaves the asset uncontrolled.
    pub active: Vec<Option<ActiveService>>,
    /// Shadow services available for deployment.
    pub shadows: Vec<DeploySpec>,
    pub manager: ManagerConfig,
    pub twin: TwinConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct AssetRow {
    pub x: f64,
    pub y: f64,
    pub u_a: Option<f64>,
    pub u_b: Option<f64>,
    pub u_applied: f64,
    pub source: Source,
    pub state: AdaptationState,
}

/// Per-cycle trace used for the run CSV.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CycleRow {
    pub cycle: Cycle,
    pub t_start_ns: u64,
    pub overrun: bool,
    pub deadline_met: bool,
    pub assets: Vec<AssetRow>,
}

pub const RUN_CSV_HEADER: &str = "cycle,t_start_ns,x,y,u_A,u_B,u_applied,source,overrun,adaptation_state";

/// Writes the run CSV of one asset.
pub fn write_run_csv(rows: &[CycleRow], asset: AssetId, mut out: impl Write) -> std::io::Result<()> {
    fn opt(v: Option<f64>) -> String {
        v.map(|v| v.to_string()).unwrap_or_default()
    }
    writeln!(out, "{RUN_CSV_HEADER}")?;
    for r in rows {
        let Some(a) = r.assets.get(asset) else {
            continue;
        };
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.cycle,
            r.t_start_ns,
            a.x,
            a.y,
            opt(a.u_a),
            opt(a.u_b),
            a.u_applied,
            a.source,
            r.overrun,
            a.state
        )?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TwinStats {
    pub recorded: u64,
    pub skipped: u64,
    pub torn: u64,
    pub skip_ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DivergenceSummary {
    pub asset: AssetId,
    pub start: Cycle,
    pub end: Cycle,
    pub samples: usize,
    pub last: f64,
    pub rms: f64,
    pub max: f64,
}

/// Point-in-time management view of a device.
#[derive(Clone, Debug, Serialize)]
pub struct ManagementSnapshot {
    pub device: String,
    pub cycle: Option<Cycle>,
    pub clock_mode: ClockMode,
    pub assets: Vec<AdaptationStatus>,
    pub services: Vec<TaskEntry>,
    pub worker_plan: WorkerPlan,
    pub latest_metrics: Option<CycleMetrics>,
    pub cycles_run: u64,
    pub overruns: u64,
    pub integrity_faults: usize,
    pub write_violations: u64,
    pub separation_violations: u64,
    pub twin: TwinStats,
    pub divergence: Vec<DivergenceSummary>,
}

impl ManagementSnapshot {
    /// State of asset 0, the one a single-asset device reports.
    pub fn primary_state(&self) -> AdaptationState {
        self.assets.first().map_or(AdaptationState::Idle, |a| a.state)
    }
}

/// Result of a management command as seen by the caller.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Accepted {
    pub ticket: u64,
    /// Cycle whose preparation window will process the request.
    pub effective_from: Cycle,
    pub state: AdaptationState,
}

pub struct Device {
    id: String,
    executor: CyclicExecutor,
    manager: AdaptationManager,
    twin: SharedTwin,
    management: crate::twin::ManagementTwin,
    metrics_rx: Receiver<CycleRecord>,
    reader: RingReader,
    shadows: BTreeMap<AssetId, DeploySpec>,
    rows: Option<Vec<CycleRow>>,
    report: RunReport,
    history_seen: Vec<usize>,
    probe: SeparationProbe,
}

impl Device {
    pub fn new(cfg: DeviceConfig) -> Result<Self, DeviceError> {
        if cfg.active.len() != cfg.plants.len() {
            return Err(DeviceError::Config("one active entry per plant required".into()));
        }
        let field = Fieldbus::new(&cfg.plants);
        let mut executor = CyclicExecutor::with_capacity(cfg.schedule, cfg.ring_capacity, field)?;
        let mut active_ids = Vec::new();
        for (asset, svc) in cfg.active.iter().enumerate() {
            let Some(svc) = svc else {
                active_ids.push(None);
                continue;
            };
            if svc.descriptor.target_asset != asset {
                return Err(DeviceError::Config(format!(
                    "active service {} targets the wrong asset",
                    svc.descriptor.name
                )));
            }
            let id = TaskId::new(format!("{}@{}", svc.descriptor.name, asset));
            let task = ControllerTask::new(svc.descriptor.clone(), Source::A, Duration::from_micros(svc.cost_us));
            executor.install(
                TaskEntry::controller(id.clone(), crate::executor::Priority::P1, cfg.schedule.period),
                Box::new(task),
                Some(Binding {
                    asset,
                    slot: Source::A,
                    service: svc.descriptor.id,
                }),
            )?;
            active_ids.push(Some(id));
        }
        let twin = Arc::new(RwLock::new(TwinStore::new(cfg.twin.clone(), cfg.plants.len())?));
        executor.install_async("twin", Box::new(TwinRecorder::new(Arc::clone(&twin))))?;
        let (tx, metrics_rx): (SyncSender<CycleRecord>, _) = mpsc::sync_channel(METRICS_DEPTH);
        executor.set_metrics_sink(tx);
        let probe = SeparationProbe::new();
        let mut manager = AdaptationManager::new(executor.request_sender(), cfg.manager, active_ids);
        manager.set_probe(probe.clone());
        let reader = executor.reader();
        let mut shadows = BTreeMap::new();
        for s in cfg.shadows {
            shadows.insert(s.descriptor.target_asset, s);
        }
        Ok(Device {
            id: cfg.id,
            history_seen: vec![0; cfg.plants.len()],
            executor,
            manager,
            twin,
            management: Default::default(),
            metrics_rx,
            reader,
            shadows,
            rows: None,
            report: RunReport::default(),
            probe,
        })
    }

    pub fn from_scenario(scenario: &Scenario, id: impl Into<String>) -> Result<Self, DeviceError> {
        Self::new(scenario.device_config(id))
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn executor(&self) -> &CyclicExecutor {
        &self.executor
    }

    pub fn executor_mut(&mut self) -> &mut CyclicExecutor {
        &mut self.executor
    }

    pub fn manager(&self) -> &AdaptationManager {
        &self.manager
    }

    pub fn twin(&self) -> SharedTwin {
        Arc::clone(&self.twin)
    }

    pub fn management_twin(&self) -> &crate::twin::ManagementTwin {
        &self.management
    }

    pub fn probe(&self) -> &SeparationProbe {
        &self.probe
    }

    pub fn keep_rows(&mut self) {
        self.rows.get_or_insert_with(Vec::new);
    }

    pub fn rows(&self) -> &[CycleRow] {
        self.rows.as_deref().unwrap_or(&[])
    }

    pub fn report(&self) -> &RunReport {
        &self.report
    }

    /// Last completed cycle.
    pub fn current_cycle(&self) -> Option<Cycle> {
        self.executor.next_cycle().checked_sub(1)
    }

    pub fn next_cycle(&self) -> Cycle {
        self.executor.next_cycle()
    }

    pub fn shadow_spec(&self, asset: AssetId) -> Option<&DeploySpec> {
        self.shadows.get(&asset)
    }

    /// Runs one cycle and lets the management side observe it.
    pub fn step(&mut self) -> Result<CycleRecord, ExecError> {
        let record = self.executor.run_cycle()?;
        self.report.cycles.push(record.metrics);
        while let Ok(r) = self.metrics_rx.try_recv() {
            self.manager.observe(&r);
        }
        self.log_transitions();
        if let Some(rows) = self.rows.as_mut() {
            if let ReadOutcome::Valid(frame) = self.reader.read_cycle(record.metrics.cycle) {
                let assets = (0..frame.asset_count)
                    .map(|i| {
                        let a = frame.asset(i);
                        AssetRow {
                            x: a.x,
                            y: a.y,
                            u_a: a.u_a,
                            u_b: a.u_b,
                            u_applied: a.u_applied,
                            source: a.source,
                            state: self.manager.state(i).unwrap_or(AdaptationState::Idle),
                        }
                    })
                    .collect();
                rows.push(CycleRow {
                    cycle: record.metrics.cycle,
                    t_start_ns: record.metrics.t_start_ns,
                    overrun: record.metrics.overrun,
                    deadline_met: record.metrics.deadline_met,
                    assets,
                });
            }
        }
        Ok(record)
    }

    fn log_transitions(&mut self) {
        for asset in 0..self.history_seen.len() {
            let history = self.manager.history(asset);
            for t in &history[self.history_seen[asset]..] {
                self.management.push(
                    t.cycle,
                    "transition",
                    serde_json::json!({"asset": asset, "from": t.from, "to": t.to, "reason": t.reason}),
                );
            }
            self.history_seen[asset] = history.len();
        }
    }

    /// Starts the wall-clock lanes; pair with [`Device::finish`].
    pub fn start(&mut self) {
        self.executor.start_lanes();
    }

    /// Stops the lanes and brings the twin up to date.
    pub fn finish(&mut self) {
        self.executor.stop_lanes();
        self.executor.poll_async();
        self.report.integrity_faults = self.executor.fieldbus().faults().len();
        self.report.write_violations = self.executor.denied_writes();
    }

    /// Runs until cycle `until` (exclusive). `before` is invoked ahead of
    /// every cycle and may issue management commands.
    pub fn run_until(&mut self, until: Cycle, mut before: impl FnMut(&mut Device, Cycle)) -> Result<(), ExecError> {
        self.start();
        let mut result = Ok(());
        while self.next_cycle() < until {
            let c = self.next_cycle();
            before(self, c);
            if let Err(e) = self.step() {
                self.report.aborted = Some(e.to_string());
                result = Err(e);
                break;
            }
        }
        self.finish();
        result
    }

    fn accepted(&self, asset: AssetId, ticket: &Ticket) -> Accepted {
        let effective_from = match ticket.result() {
            Some(TicketResult::Applied { cycle }) | Some(TicketResult::Rejected { cycle, .. }) => *cycle,
            None => self.next_cycle(),
        };
        Accepted {
            ticket: ticket.id(),
            effective_from,
            state: self.manager.state(asset).unwrap_or(AdaptationState::Idle),
        }
    }

    fn record_request(&mut self, kind: &str, asset: AssetId, detail: serde_json::Value) {
        let cycle = self.next_cycle();
        self.management.push(
            cycle,
            "request",
            serde_json::json!({"op": kind, "asset": asset, "detail": detail}),
        );
    }

    /// Deploys `spec`, or the configured shadow of `asset` when `None`.
    pub fn deploy_shadow(&mut self, asset: AssetId, spec: Option<DeploySpec>) -> Result<Accepted, AdaptationError> {
        let spec = match spec {
            Some(s) => s,
            None => self
                .shadows
                .get(&asset)
                .cloned()
                .ok_or_else(|| AdaptationError::Config(format!("no shadow configured for asset {asset}")))?,
        };
        if spec.descriptor.target_asset != asset {
            return Err(AdaptationError::Config("descriptor targets a different asset".into()));
        }
        self.record_request(
            "deploy_shadow",
            asset,
            serde_json::json!({"service": spec.descriptor.name}),
        );
        let ticket = self.manager.deploy_shadow(spec)?;
        self.log_transitions();
        Ok(self.accepted(asset, &ticket))
    }

    pub fn promote(&mut self, asset: AssetId, k: Cycle) -> Result<Accepted, AdaptationError> {
        self.record_request("promote", asset, serde_json::json!({"cycle": k}));
        let t = self.manager.request_promote(asset, k)?;
        Ok(self.accepted(asset, &t))
    }

    pub fn rollback(&mut self, asset: AssetId, m: Cycle) -> Result<Accepted, AdaptationError> {
        self.record_request("rollback", asset, serde_json::json!({"cycle": m}));
        let t = self.manager.request_rollback(asset, m)?;
        Ok(self.accepted(asset, &t))
    }

    pub fn abort(&mut self, asset: AssetId) -> Result<AdaptationState, AdaptationError> {
        self.record_request("abort", asset, serde_json::Value::Null);
        self.manager.abort(asset)?;
        self.log_transitions();
        Ok(self.manager.state(asset).unwrap_or(AdaptationState::Idle))
    }

    pub fn prepare_switch(&mut self, asset: AssetId, k: Cycle) -> Result<Cycle, AdaptationError> {
        self.record_request("prepare", asset, serde_json::json!({"cycle": k}));
        self.manager.prepare_switch(asset, k)?;
        Ok(k)
    }

    pub fn commit_switch(&mut self, asset: AssetId, k: Cycle) -> Result<Accepted, AdaptationError> {
        self.record_request("commit", asset, serde_json::json!({"cycle": k}));
        let t = self.manager.commit_switch(asset, k)?;
        Ok(self.accepted(asset, &t))
    }

    pub fn release_switch(&mut self, asset: AssetId) -> Result<(), AdaptationError> {
        self.record_request("release", asset, serde_json::Value::Null);
        self.manager.release_switch(asset)
    }

    pub fn divergence_summary(&self, asset: AssetId, window: Cycle) -> Option<DivergenceSummary> {
        let end = self.current_cycle()?;
        let start = end.saturating_sub(window.saturating_sub(1));
        let twin = self.twin.read().ok()?;
        let d = twin.divergence(asset, start, end).ok()?;
        Some(DivergenceSummary {
            asset,
            start,
            end,
            samples: d.per_cycle.len(),
            last: d.per_cycle.last().map_or(0.0, |(_, v)| *v),
            rms: d.rms,
            max: d.max,
        })
    }

    pub fn snapshot(&self) -> ManagementSnapshot {
        let twin = self
            .twin
            .read()
            .map(|t| TwinStats {
                recorded: t.recorded(),
                skipped: t.skipped(),
                torn: t.torn(),
                skip_ratio: t.skip_ratio(),
            })
            .unwrap_or(TwinStats {
                recorded: 0,
                skipped: 0,
                torn: 0,
                skip_ratio: 0.0,
            });
        ManagementSnapshot {
            device: self.id.clone(),
            cycle: self.current_cycle(),
            clock_mode: self.executor.schedule().clock_mode,
            assets: self.manager.statuses(),
            services: self.executor.task_entries(),
            worker_plan: self.executor.worker_plan(),
            latest_metrics: self.report.cycles.last().copied(),
            cycles_run: self.report.cycles.len() as u64,
            overruns: self.report.overruns() as u64,
            integrity_faults: self.executor.fieldbus().faults().len(),
            write_violations: self.executor.denied_writes(),
            separation_violations: self.probe.violations(),
            twin,
            divergence: (0..self.manager.asset_count())
                .filter_map(|a| self.divergence_summary(a, DIVERGENCE_WINDOW))
                .collect(),
        }
    }
}

/// Outcome of one scripted event.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EventOutcome {
    pub at: Cycle,
    pub action: EventAction,
    pub asset: AssetId,
    pub result: Result<String, String>,
}

/// Summary of a scenario run.
#[derive(Clone, Debug, Serialize)]
pub struct RunSummary {
    pub scenario: String,
    pub cycles: u64,
    pub overruns: usize,
    pub deadline_ratio: f64,
    pub p99_start_jitter_ns: u64,
    pub actuator_writes: Vec<u64>,
    pub integrity_faults: usize,
    /// Cycles at which the applied source changed, per asset.
    pub switch_cycles: Vec<Vec<(Cycle, Source)>>,
    pub divergence_rms: Vec<Option<f64>>,
    pub skip_ratio: f64,
    pub final_states: Vec<AdaptationState>,
    pub events: Vec<EventOutcome>,
    pub aborted: Option<String>,
    /// Outcome of a real-time scheduling request, if one was made.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub realtime: Option<Result<(), String>>,
}

impl RunSummary {
    pub fn success(&self) -> bool {
        self.integrity_faults == 0 && self.aborted.is_none()
    }
}

fn fire_event(device: &mut Device, scenario: &Scenario, ev: &crate::scenario::ScenarioEvent) -> Result<String, String> {
    let show = |a: Accepted| format!("accepted, ticket {} from cycle {}", a.ticket, a.effective_from);
    match ev.action {
        EventAction::DeployShadow => device
            .deploy_shadow(ev.asset, scenario.deploy_spec(ev.asset))
            .map(show)
            .map_err(|e| e.to_string()),
        EventAction::Promote => device
            .promote(ev.asset, ev.switch_cycle())
            .map(show)
            .map_err(|e| e.to_string()),
        EventAction::Rollback => device
            .rollback(ev.asset, ev.switch_cycle())
            .map(show)
            .map_err(|e| e.to_string()),
        EventAction::Abort => device.abort(ev.asset).map(|s| s.to_string()).map_err(|e| e.to_string()),
        EventAction::InjectBudgetViolation => Ok(format!("shadow cost +{} us", ev.cost_us.unwrap_or(0))),
    }
}

/// Runs a scenario on a fresh device with its event script.
pub fn run_scenario(scenario: &Scenario, keep_rows: bool) -> Result<(Device, RunSummary), DeviceError> {
    let mut device = Device::from_scenario(scenario, scenario.name.clone())?;
    if keep_rows {
        device.keep_rows();
    }
    let mut outcomes = Vec::new();
    let mut next_event = 0;
    let events = scenario.events.clone();
    let _ = device.run_until(scenario.cycles, |d, c| {
        while next_event < events.len() && events[next_event].at <= c {
            let ev = &events[next_event];
            outcomes.push(EventOutcome {
                at: ev.at,
                action: ev.action,
                asset: ev.asset,
                result: fire_event(d, scenario, ev),
            });
            next_event += 1;
        }
    });
    let summary = summarize(&device, scenario, outcomes);
    Ok((device, summary))
}

fn summarize(device: &Device, scenario: &Scenario, events: Vec<EventOutcome>) -> RunSummary {
    let report = device.report();
    let assets = device.executor().fieldbus().asset_count();
    let mut switch_cycles = vec![Vec::new(); assets];
    let mut last = vec![None; assets];
    for row in device.rows() {
        for (i, a) in row.assets.iter().enumerate() {
            if last[i] != Some(a.source) {
                switch_cycles[i].push((row.cycle, a.source));
                last[i] = Some(a.source);
            }
        }
    }
    let end = device.current_cycle().unwrap_or(0);
    let (divergence_rms, skip_ratio) = match device.twin().read() {
        Ok(t) => (
            (0..assets)
                .map(|a| t.divergence(a, 0, end).ok().map(|d| d.rms))
                .collect(),
            t.skip_ratio(),
        ),
        Err(_) => (vec![None; assets], 0.0),
    };
    RunSummary {
        scenario: scenario.name.clone(),
        cycles: report.cycles.len() as u64,
        overruns: report.overruns(),
        deadline_ratio: report.deadline_ratio(),
        p99_start_jitter_ns: report.jitter_percentile(99.0),
        actuator_writes: (0..assets)
            .map(|a| device.executor().fieldbus().port(a).total_writes())
            .collect(),
        integrity_faults: device.executor().fieldbus().faults().len(),
        switch_cycles,
        divergence_rms,
        skip_ratio,
        final_states: (0..assets)
            .map(|a| device.manager().state(a).unwrap_or(AdaptationState::Idle))
            .collect(),
        events,
        aborted: report.aborted.clone(),
        realtime: device.executor().realtime().map(|r| r.map_err(str::to_string)),
    }
}

/// A management command for a device running on its own thread.
#[derive(Clone, Debug, PartialEq)]
pub enum DeviceCommand {
    DeployShadow { asset: AssetId, spec: Option<DeploySpec> },
    Promote { asset: AssetId, cycle: Cycle },
    Rollback { asset: AssetId, cycle: Cycle },
    Abort { asset: AssetId },
    Prepare { asset: AssetId, cycle: Cycle },
    Commit { asset: AssetId, cycle: Cycle },
    Release { asset: AssetId },
    Status,
    Export(ExportSection),
}

/// Text exports a management client can pull from a running device.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExportSection {
    /// Level-2 twin records as CSV.
    TwinCsv,
    /// Level-3 aggregates as CSV.
    SupervisoryCsv,
    /// Per-cycle timing metrics as CSV.
    MetricsCsv,
    /// Adaptation transitions, one JSON object per line.
    History,
    /// Management-plane event log, one JSON object per line.
    ManagementLog,
}

impl ExportSection {
    pub fn export(self, device: &Device) -> std::io::Result<String> {
        let mut buf = Vec::new();
        match self {
            ExportSection::TwinCsv | ExportSection::SupervisoryCsv => {
                let level = if self == ExportSection::TwinCsv {
                    TwinLevel::Control
                } else {
                    TwinLevel::Supervisory
                };
                let twin = device
                    .twin
                    .read()
                    .map_err(|_| std::io::Error::other("twin lock poisoned"))?;
                twin.write_csv(level, &mut buf)?;
            }
            ExportSection::MetricsCsv => device.report.write_csv(&mut buf)?,
            ExportSection::History => buf.extend_from_slice(device.manager.history_ndjson().as_bytes()),
            ExportSection::ManagementLog => device.management.write_ndjson(&mut buf)?,
        }
        String::from_utf8(buf).map_err(std::io::Error::other)
    }
}

#[derive(Clone, Debug, Serialize)]
#[serde(untagged)]
pub enum DeviceReply {
    Accepted(Accepted),
    State { state: AdaptationState },
    Prepared { cycle: Cycle },
    Released {},
    Snapshot(Box<ManagementSnapshot>),
    Export { section: ExportSection, content: String },
}

pub type CommandResult = Result<DeviceReply, AdaptationError>;

impl Device {
    pub fn execute(&mut self, cmd: DeviceCommand) -> CommandResult {
        Ok(match cmd {
            DeviceCommand::DeployShadow { asset, spec } => DeviceReply::Accepted(self.deploy_shadow(asset, spec)?),
            DeviceCommand::Promote { asset, cycle } => DeviceReply::Accepted(self.promote(asset, cycle)?),
            DeviceCommand::Rollback { asset, cycle } => DeviceReply::Accepted(self.rollback(asset, cycle)?),
            DeviceCommand::Abort { asset } => DeviceReply::State {
                state: self.abort(asset)?,
            },
            DeviceCommand::Prepare { asset, cycle } => DeviceReply::Prepared {
                cycle: self.prepare_switch(asset, cycle)?,
            },
            DeviceCommand::Commit { asset, cycle } => DeviceReply::Accepted(self.commit_switch(asset, cycle)?),
            DeviceCommand::Release { asset } => {
                self.release_switch(asset)?;
                DeviceReply::Released {}
            }
            DeviceCommand::Status => DeviceReply::Snapshot(Box::new(self.snapshot())),
            DeviceCommand::Export(section) => DeviceReply::Export {
                section,
                content: section
                    .export(self)
                    .map_err(|e| AdaptationError::Config(format!("export failed: {e}")))?,
            },
        })
    }
}

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
#[error("device thread is gone")]
pub struct DeviceGone;

type Envelope = (DeviceCommand, Sender<CommandResult>);

/// How a spawned device advances.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RunMode {
    /// Stop stepping at this cycle (exclusive) and keep serving commands.
    pub until: Option<Cycle>,
    /// Deterministic mode only: sleep one period per cycle so the device
    /// runs at real-time pace.
    pub pace: bool,
}

/// A device running on its own thread. Commands are executed between
/// cycles.
pub struct DeviceHandle {
    id: String,
    tx: Option<Sender<Envelope>>,
    join: Option<JoinHandle<Device>>,
}

impl DeviceHandle {
    pub fn spawn(mut device: Device, mode: RunMode) -> std::io::Result<Self> {
        let (tx, rx) = mpsc::channel::<Envelope>();
        let id = device.id().to_string();
        let join = std::thread::Builder::new()
            .name(format!("device-{id}"))
            .spawn(move || {
                let period = device.executor().schedule().period;
                let paced = mode.pace && device.executor().schedule().clock_mode == ClockMode::Deterministic;
                device.start();
                let origin = Instant::now();
                let mut stepping = true;
                loop {
                    loop {
                        match rx.try_recv() {
                            Ok((cmd, reply)) => {
                                let _ = reply.send(device.execute(cmd));
                            }
                            Err(mpsc::TryRecvError::Empty) => break,
                            Err(mpsc::TryRecvError::Disconnected) => {
                                device.finish();
                                return device;
                            }
                        }
                    }
                    if stepping && mode.until.is_some_and(|u| device.next_cycle() >= u) {
                        stepping = false;
                        device.finish();
                    }
                    if !stepping {
                        match rx.recv() {
                            Ok((cmd, reply)) => {
                                let _ = reply.send(device.execute(cmd));
                                continue;
                            }
                            Err(_) => return device,
                        }
                    }
                    if paced {
                        let due = origin + period * (device.next_cycle() as u32 + 1);
                        let now = Instant::now();
                        if due > now {
                            std::thread::sleep(due - now);
                        }
                    }
                    if device.step().is_err() {
                        stepping = false;
                        device.finish();
                    }
                }
            })?;
        Ok(DeviceHandle {
            id,
            tx: Some(tx),
            join: Some(join),
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn call(&self, cmd: DeviceCommand) -> Result<CommandResult, DeviceGone> {
        self.call_timeout(cmd, Duration::from_secs(10))
    }

    pub fn call_timeout(&self, cmd: DeviceCommand, timeout: Duration) -> Result<CommandResult, DeviceGone> {
        let (reply_tx, reply_rx) = mpsc::channel();
        self.tx
            .as_ref()
            .ok_or(DeviceGone)?
            .send((cmd, reply_tx))
            .map_err(|_| DeviceGone)?;
        match reply_rx.recv_timeout(timeout) {
            Ok(r) => Ok(r),
            Err(RecvTimeoutError::Timeout) | Err(RecvTimeoutError::Disconnected) => Err(DeviceGone),
        }
    }

    pub fn snapshot(&self) -> Result<ManagementSnapshot, DeviceGone> {
        match self.call(DeviceCommand::Status)? {
            Ok(DeviceReply::Snapshot(s)) => Ok(*s),
            _ => Err(DeviceGone),
        }
    }

    /// Stops the device thread and returns the device.
    pub fn stop(mut self) -> Option<Device> {
        self.tx = None;
        self.join.take().and_then(|j| j.join().ok())
    }
}

impl Drop for DeviceHandle {
    fn drop(&mut self) {
        self.tx = None;
        if let Some(j) = self.join.take() {
            let _ = j.join();
        }
    }
}
