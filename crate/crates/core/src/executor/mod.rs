//! Time-synchronous cyclic executive.
//!
//! Every cycle `c` starts at `t0 = epoch + c * T`. In the preparation window
//! `[t0 - t_prep, t0)` the executive drains the request queue and applies
//! task, gate and stage changes. From `t0` on it runs stage 1 (input), stage
//! 2 (controllers and gate) and stage 3 (output forwarding) in barrier order
//! on the ring pipeline. Stage-4 tasks read the ring asynchronously.
//!
//! Priority classes: P1 stage-2 tasks run on the executive lane and are on
//! the critical path. P2 stage-2 tasks run on a single dedicated lane; the
//! executive waits for them at most until `t0 + p2_window` and otherwise
//! proceeds without their output. A P2 task that blocks its lane therefore
//! cannot delay stage 3.
//!
//! Two clock modes exist. `WallClock` sleeps to real cycle starts and
//! measures durations. `Deterministic` uses logical time: `t0 = c * T`, and
//! every task contributes its declared logical cost, so P2 lane occupancy,
//! late outputs and overruns are computed rather than measured.

mod lane;
mod request;
mod rt;

use std::fmt;
use std::sync::mpsc::{Receiver, SyncSender, TryRecvError, TrySendError};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::control::{Gate, GateDecision, ServiceId};
use crate::plant::{ActuatorWrite, AssetId, Fieldbus};
use crate::ring::{
    Access, Cycle, PipelineError, RingPipeline, RingReader, SignalFrame, Source, StageGraphDelta, StageId, TaskId,
};
use crate::separation::OperationScope;

use lane::{P2Done, P2Job, P2Thread};
pub use request::{PrepRequest, RequestSender, SubmitError, Ticket, TicketResult, DEFAULT_QUEUE_DEPTH};

pub const INPUT_TASK: &str = "input";
pub const OUTPUT_TASK: &str = "output";

/// Logical cost of the built-in stage-1 input processor.
const INPUT_COST: Duration = Duration::from_micros(2);
/// Logical cost of the gate evaluation at the end of stage 2.
const GATE_COST: Duration = Duration::from_micros(1);
/// Logical cost of the built-in stage-3 output forwarder.
const OUTPUT_COST: Duration = Duration::from_micros(2);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClockMode {
    Deterministic,
    WallClock,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Priority {
    P1,
    P2,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskMode {
    Synchronous,
    Asynchronous,
}

#[derive(Debug, Error)]
pub enum ExecError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error("clock failure: {0}")]
    Clock(String),
    #[error(transparent)]
    Submit(#[from] SubmitError),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CycleSchedule {
    pub period: Duration,
    pub prep_offset: Duration,
    pub clock_mode: ClockMode,
    /// Size of the worker pool. At most one worker ever runs P2 work.
    pub workers: usize,
    /// How long after `t0` stage 2 waits for P2 results.
    pub p2_window: Duration,
    pub queue_depth: usize,
    /// Wall-clock mode: run the cycle thread under `SCHED_FIFO` at this
    /// priority (1..=99). Best effort; see [`CyclicExecutor::realtime`].
    #[serde(default)]
    pub realtime_priority: Option<u8>,
}

impl CycleSchedule {
    /// `t_prep` defaults to 10% of the period and the P2 window to half of it.
    pub fn new(period: Duration, clock_mode: ClockMode) -> Self {
        CycleSchedule {
            period,
            prep_offset: period / 10,
            clock_mode,
            workers: 4,
            p2_window: period / 2,
            queue_depth: DEFAULT_QUEUE_DEPTH,
            realtime_priority: None,
        }
    }

    pub fn with_prep_offset(mut self, prep: Duration) -> Self {
        self.prep_offset = prep;
        self
    }

    pub fn validate(&self) -> Result<(), ExecError> {
        if self.period.is_zero() {
            return Err(ExecError::Config("period must be > 0".into()));
        }
        if self.prep_offset.is_zero() || self.prep_offset >= self.period {
            return Err(ExecError::Config("prep offset must satisfy 0 < t_prep < T".into()));
        }
        if self.workers < 2 {
            return Err(ExecError::Config("need at least 2 workers (P1 + P2)".into()));
        }
        if self.p2_window > self.period {
            return Err(ExecError::Config("p2 window cannot exceed the period".into()));
        }
        if self.queue_depth == 0 {
            return Err(ExecError::Config("queue depth must be >= 1".into()));
        }
        if self.realtime_priority.is_some_and(|p| !(1..=99).contains(&p)) {
            return Err(ExecError::Config("real-time priority must be in 1..=99".into()));
        }
        Ok(())
    }

    fn period_ns(&self) -> u64 {
        self.period.as_nanos() as u64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskEntry {
    pub id: TaskId,
    pub stage: StageId,
    pub priority: Priority,
    pub mode: TaskMode,
    /// Per-cycle execution budget.
    pub budget: Duration,
}

impl TaskEntry {
    /// Validates a raw stage number and the stage/mode pairing.
    pub fn new(
        id: impl Into<TaskId>,
        stage: u8,
        priority: Priority,
        mode: TaskMode,
        budget: Duration,
    ) -> Result<Self, ExecError> {
        let stage = StageId::from_number(stage).ok_or_else(|| ExecError::Config(format!("invalid stage {stage}")))?;
        let entry = TaskEntry {
            id: id.into(),
            stage,
            priority,
            mode,
            budget,
        };
        entry.validate()?;
        Ok(entry)
    }

    pub fn controller(id: impl Into<TaskId>, priority: Priority, budget: Duration) -> Self {
        TaskEntry {
            id: id.into(),
            stage: StageId::Control,
            priority,
            mode: TaskMode::Synchronous,
            budget,
        }
    }

    fn validate(&self) -> Result<(), ExecError> {
        match (self.mode, self.stage) {
            (TaskMode::Synchronous, StageId::Async) => {
                return Err(ExecError::Config("synchronous tasks belong to stages 1-3".into()))
            }
            (TaskMode::Asynchronous, s) if s != StageId::Async => {
                return Err(ExecError::Config("asynchronous tasks belong to stage 4".into()))
            }
            _ => {}
        }
        if self.stage == StageId::Input {
            return Err(ExecError::Config("stage 1 hosts only the producer".into()));
        }
        if self.mode == TaskMode::Synchronous && self.priority == Priority::P2 && self.stage != StageId::Control {
            return Err(ExecError::Config("P2 synchronous tasks must be stage-2 tasks".into()));
        }
        Ok(())
    }

    fn access(&self) -> Access {
        if self.stage.may_write() {
            Access::ReadWrite
        } else {
            Access::Read
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaskFault(pub String);

impl fmt::Display for TaskFault {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// What a synchronous task sees while it runs.
pub struct TaskContext<'a> {
    cycle: Cycle,
    stage: StageId,
    mode: ClockMode,
    frame: &'a mut SignalFrame,
    field: Option<&'a mut Fieldbus>,
    denied_writes: u32,
}

impl<'a> TaskContext<'a> {
    pub fn new(
        cycle: Cycle,
        stage: StageId,
        mode: ClockMode,
        frame: &'a mut SignalFrame,
        field: Option<&'a mut Fieldbus>,
    ) -> Self {
        TaskContext {
            cycle,
            stage,
            mode,
            frame,
            field,
            denied_writes: 0,
        }
    }

    pub fn cycle(&self) -> Cycle {
        self.cycle
    }

    pub fn stage(&self) -> StageId {
        self.stage
    }

    pub fn clock_mode(&self) -> ClockMode {
        self.mode
    }

    pub fn frame(&self) -> &SignalFrame {
        self.frame
    }

    /// Write access to the frame; refused (and counted) after stage 2.
    pub fn frame_mut(&mut self) -> Result<&mut SignalFrame, PipelineError> {
        if self.stage.may_write() {
            Ok(self.frame)
        } else {
            self.denied_writes += 1;
            Err(PipelineError::ReadOnly { stage: self.stage })
        }
    }

    pub fn fieldbus(&mut self) -> Option<&mut Fieldbus> {
        self.field.as_deref_mut()
    }

    pub fn denied_writes(&self) -> u32 {
        self.denied_writes
    }
}

/// A task of stages 1..=3.
pub trait SyncTask: Send {
    fn execute(&mut self, cx: &mut TaskContext<'_>) -> Result<(), TaskFault>;

    /// Duration charged in deterministic mode.
    fn logical_cost(&self, _cycle: Cycle) -> Duration {
        Duration::from_micros(1)
    }
}

/// A stage-4 task: reads the ring transactionally, never writes it.
pub trait AsyncTask: Send {
    fn poll(&mut self, reader: &RingReader);
}

/// Which controller slot a stage-2 task fills.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Binding {
    pub asset: AssetId,
    pub slot: Source,
    pub service: ServiceId,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskStatus {
    Completed,
    Faulted,
    /// Finished after the P2 window; output discarded.
    Late,
    /// Still running a previous cycle; not executed this cycle.
    Busy,
    /// Not started: the cycle began after its P2 window had already
    /// closed, e.g. while catching up after a stall.
    Starved,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TaskTiming {
    pub id: TaskId,
    pub priority: Priority,
    pub duration_ns: u64,
    pub status: TaskStatus,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CycleMetrics {
    pub cycle: Cycle,
    pub t_start_ns: u64,
    pub start_jitter_ns: i64,
    pub stage_ns: [u64; 3],
    pub overrun: bool,
    pub deadline_met: bool,
}

/// What actually reached the actuator of one asset.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct AppliedOutput {
    pub asset: AssetId,
    pub value: f64,
    pub source: Source,
    pub held: bool,
}

/// Everything the management side learns about one cycle.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CycleRecord {
    pub metrics: CycleMetrics,
    pub tasks: Vec<TaskTiming>,
    pub applied: Vec<AppliedOutput>,
    /// Requests applied in this cycle's preparation window.
    pub requests_applied: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct WorkerPlan {
    pub p1_workers: usize,
    pub p2_workers: usize,
}

/// Monotonic time source for wall-clock mode.
pub trait Clock: Send {
    fn now_ns(&mut self) -> Result<u64, String>;
}

pub struct MonotonicClock {
    origin: Instant,
}

impl MonotonicClock {
    pub fn new() -> Self {
        MonotonicClock { origin: Instant::now() }
    }
}

impl Default for MonotonicClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for MonotonicClock {
    fn now_ns(&mut self) -> Result<u64, String> {
        Ok(self.origin.elapsed().as_nanos() as u64)
    }
}

struct TaskSlot {
    entry: TaskEntry,
    /// `None` while the task is away on the P2 lane.
    task: Option<Box<dyn SyncTask>>,
    binding: Option<Binding>,
    wired: bool,
    /// Deterministic mode: logical time at which the task's last run ends.
    busy_until_ns: u64,
    removed: bool,
}

enum P2Lane {
    Logical { busy_until_ns: u64 },
    Threaded(P2Thread),
    Idle,
}

struct AsyncLane {
    stop: Arc<std::sync::atomic::AtomicBool>,
    handle: std::thread::JoinHandle<Vec<(TaskId, Box<dyn AsyncTask>)>>,
}

/// Summary of a `run`.
#[derive(Clone, Debug, Default, Serialize)]
pub struct RunReport {
    pub cycles: Vec<CycleMetrics>,
    pub aborted: Option<String>,
    pub integrity_faults: usize,
    pub write_violations: u64,
    pub metrics_dropped: u64,
}

impl RunReport {
    pub fn overruns(&self) -> usize {
        self.cycles.iter().filter(|m| m.overrun).count()
    }

    pub fn deadline_ratio(&self) -> f64 {
        if self.cycles.is_empty() {
            return 1.0;
        }
        self.cycles.iter().filter(|m| m.deadline_met).count() as f64 / self.cycles.len() as f64
    }

    /// Percentile of absolute start jitter, in nanoseconds.
    pub fn jitter_percentile(&self, p: f64) -> u64 {
        let mut v: Vec<u64> = self.cycles.iter().map(|m| m.start_jitter_ns.unsigned_abs()).collect();
        if v.is_empty() {
            return 0;
        }
        v.sort_unstable();
        let idx = ((p / 100.0) * (v.len() - 1) as f64).round() as usize;
        v[idx.min(v.len() - 1)]
    }

    pub const CSV_HEADER: &'static str = "cycle,start_jitter_ns,stage1_ns,stage2_ns,stage3_ns,overrun,deadline_met";

    pub fn write_csv(&self, mut out: impl std::io::Write) -> std::io::Result<()> {
        writeln!(out, "{}", Self::CSV_HEADER)?;
        for m in &self.cycles {
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                m.cycle, m.start_jitter_ns, m.stage_ns[0], m.stage_ns[1], m.stage_ns[2], m.overrun, m.deadline_met
            )?;
        }
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("write to vec");
        String::from_utf8(buf).expect("ascii csv")
    }
}

pub struct CyclicExecutor {
    schedule: CycleSchedule,
    pipeline: RingPipeline,
    tasks: Vec<TaskSlot>,
    async_tasks: Vec<(TaskId, Box<dyn AsyncTask>)>,
    gate: Gate,
    field: Fieldbus,
    requests: Receiver<request::Pending>,
    sender: RequestSender,
    metrics_tx: Option<SyncSender<CycleRecord>>,
    metrics_dropped: u64,
    lane: P2Lane,
    async_lane: Option<AsyncLane>,
    next_cycle: Cycle,
    clock: Box<dyn Clock>,
    epoch_ns: Option<u64>,
    frame_log: Option<Vec<SignalFrame>>,
    denied_writes: u64,
    spin_margin: Duration,
    event_log: Option<Arc<Mutex<Vec<StageEvent>>>>,
    realtime: Option<Result<Option<rt::RealtimeGuard>, String>>,
}

/// Stage ordering trace entry (test instrumentation).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StageEvent {
    Begin(StageId, Cycle),
    Published(StageId, Cycle),
}

impl CyclicExecutor {
    pub fn new(schedule: CycleSchedule, pipeline: RingPipeline, field: Fieldbus) -> Result<Self, ExecError> {
        schedule.validate()?;
        if pipeline.graph().producer().map(TaskId::as_str) != Some(INPUT_TASK) {
            return Err(ExecError::Config(format!("pipeline producer must be `{INPUT_TASK}`")));
        }
        if field.asset_count() > crate::ring::MAX_ASSETS {
            return Err(ExecError::Config("too many assets for the frame layout".into()));
        }
        let mut pipeline = pipeline;
        if pipeline.graph().stage_of(&TaskId::from(OUTPUT_TASK)).is_none() {
            pipeline.reconfigure(&StageGraphDelta::default().add(StageId::Output, OUTPUT_TASK, Access::Read))?;
        }
        let (sender, requests) = request::queue(schedule.queue_depth);
        let lane = match schedule.clock_mode {
            ClockMode::Deterministic => P2Lane::Logical { busy_until_ns: 0 },
            ClockMode::WallClock => P2Lane::Idle,
        };
        let gate = Gate::new(field.asset_count(), 0.0);
        Ok(CyclicExecutor {
            schedule,
            pipeline,
            tasks: Vec::new(),
            async_tasks: Vec::new(),
            gate,
            field,
            requests,
            sender,
            metrics_tx: None,
            metrics_dropped: 0,
            lane,
            async_lane: None,
            next_cycle: 0,
            clock: Box::new(MonotonicClock::new()),
            epoch_ns: None,
            frame_log: None,
            denied_writes: 0,
            spin_margin: Duration::from_micros(80),
            event_log: None,
            realtime: None,
        })
    }

    /// Convenience: canonical graph with the given ring capacity.
    pub fn with_capacity(schedule: CycleSchedule, capacity: usize, field: Fieldbus) -> Result<Self, ExecError> {
        let graph =
            crate::ring::StageGraph::canonical(INPUT_TASK).with_task(StageId::Output, OUTPUT_TASK, Access::Read);
        Self::new(schedule, RingPipeline::create(capacity, graph)?, field)
    }

    pub fn schedule(&self) -> &CycleSchedule {
        &self.schedule
    }

    pub fn request_sender(&self) -> RequestSender {
        self.sender.clone()
    }

    /// Enqueues a request for the next preparation window.
    pub fn submit_prep_request(&self, request: PrepRequest) -> Result<Ticket, SubmitError> {
        self.sender.submit(request)
    }

    pub fn set_metrics_sink(&mut self, tx: SyncSender<CycleRecord>) {
        self.metrics_tx = Some(tx);
    }

    pub fn set_clock(&mut self, clock: Box<dyn Clock>) {
        self.clock = clock;
    }

    /// How far ahead of `t0` the wall-clock loop stops sleeping and spins.
    pub fn set_spin_margin(&mut self, margin: Duration) {
        self.spin_margin = margin;
    }

    pub fn enable_frame_log(&mut self) {
        self.frame_log = Some(Vec::new());
    }

    pub fn frame_log(&self) -> Option<&[SignalFrame]> {
        self.frame_log.as_deref()
    }

    pub fn enable_event_log(&mut self) -> Arc<Mutex<Vec<StageEvent>>> {
        let log = Arc::new(Mutex::new(Vec::new()));
        self.event_log = Some(Arc::clone(&log));
        log
    }

    pub fn reader(&self) -> RingReader {
        self.pipeline.reader()
    }

    pub fn pipeline(&self) -> &RingPipeline {
        &self.pipeline
    }

    pub fn fieldbus(&self) -> &Fieldbus {
        &self.field
    }

    pub fn gate(&self) -> &Gate {
        &self.gate
    }

    pub fn next_cycle(&self) -> Cycle {
        self.next_cycle
    }

    /// Frame writes refused to read-only stage tasks.
    pub fn denied_writes(&self) -> u64 {
        self.denied_writes + self.pipeline.write_violations()
    }

    pub fn task_entries(&self) -> Vec<TaskEntry> {
        self.tasks
            .iter()
            .filter(|t| !t.removed)
            .map(|t| t.entry.clone())
            .collect()
    }

    pub fn is_registered(&self, id: &TaskId) -> bool {
        self.tasks.iter().any(|t| !t.removed && &t.entry.id == id)
    }

    pub fn worker_plan(&self) -> WorkerPlan {
        let p2 = usize::from(
            self.tasks
                .iter()
                .any(|t| !t.removed && t.entry.priority == Priority::P2),
        );
        WorkerPlan {
            p1_workers: self.schedule.workers - p2,
            p2_workers: p2,
        }
    }

    /// Registers a controller bound to an asset slot directly, before the
    /// first cycle (initial configuration, not a runtime adaptation).
    pub fn install(
        &mut self,
        entry: TaskEntry,
        task: Box<dyn SyncTask>,
        binding: Option<Binding>,
    ) -> Result<(), ExecError> {
        if self.next_cycle != 0 {
            return Err(ExecError::Config(
                "install is only allowed before the first cycle; use a prep request".into(),
            ));
        }
        self.register_task(entry, task, binding, true)
    }

    pub fn install_async(&mut self, id: impl Into<TaskId>, task: Box<dyn AsyncTask>) -> Result<(), ExecError> {
        self.register_async(id.into(), task)
    }

    fn register_async(&mut self, id: TaskId, task: Box<dyn AsyncTask>) -> Result<(), ExecError> {
        if self.pipeline.graph().stage_of(&id).is_some() {
            return Err(ExecError::Config(format!("duplicate task id {id}")));
        }
        self.pipeline
            .reconfigure(&StageGraphDelta::default().add(StageId::Async, id.clone(), Access::Read))?;
        self.async_tasks.push((id, task));
        Ok(())
    }

    fn register_task(
        &mut self,
        entry: TaskEntry,
        task: Box<dyn SyncTask>,
        binding: Option<Binding>,
        wired: bool,
    ) -> Result<(), ExecError> {
        entry.validate()?;
        if entry.mode == TaskMode::Asynchronous {
            return Err(ExecError::Config(
                "asynchronous tasks register through RegisterAsync".into(),
            ));
        }
        if self.pipeline.graph().stage_of(&entry.id).is_some() {
            return Err(ExecError::Config(format!("duplicate task id {}", entry.id)));
        }
        if let Some(b) = binding {
            if b.asset >= self.field.asset_count() || b.slot == Source::Hold {
                return Err(ExecError::Config(format!("invalid binding {b:?}")));
            }
            let taken = self
                .tasks
                .iter()
                .any(|t| !t.removed && t.binding.is_some_and(|o| o.asset == b.asset && o.slot == b.slot));
            if taken {
                return Err(ExecError::Config(format!(
                    "asset {} slot {} already bound",
                    b.asset, b.slot
                )));
            }
        }
        self.pipeline
            .reconfigure(&StageGraphDelta::default().add(entry.stage, entry.id.clone(), entry.access()))?;
        if wired {
            if let Some(b) = binding {
                self.gate
                    .register(b.asset, b.slot, b.service)
                    .map_err(|e| ExecError::Config(e.to_string()))?;
            }
        }
        self.tasks.retain(|t| !(t.removed && t.task.is_some()));
        self.tasks.push(TaskSlot {
            entry,
            task: Some(task),
            binding,
            wired,
            busy_until_ns: 0,
            removed: false,
        });
        Ok(())
    }

    fn deregister_task(&mut self, id: &TaskId) -> Result<(), ExecError> {
        if id.as_str() == INPUT_TASK {
            return Err(ExecError::Config("cannot remove the producer".into()));
        }
        if let Some(pos) = self.async_tasks.iter().position(|(t, _)| t == id) {
            self.pipeline
                .reconfigure(&StageGraphDelta::default().remove(id.clone()))?;
            self.async_tasks.remove(pos);
            return Ok(());
        }
        let slot = self
            .tasks
            .iter_mut()
            .find(|t| !t.removed && &t.entry.id == id)
            .ok_or_else(|| ExecError::Config(format!("unknown task {id}")))?;
        slot.removed = true;
        let binding = slot.binding;
        self.pipeline
            .reconfigure(&StageGraphDelta::default().remove(id.clone()))?;
        if let Some(b) = binding {
            let _ = self.gate.unregister(b.asset, b.slot);
        }
        // Tasks away on the P2 lane are dropped when they come back.
        self.tasks.retain(|t| !(t.removed && t.task.is_some()));
        Ok(())
    }

    fn apply_request(&mut self, request: PrepRequest, cycle: Cycle) -> Result<(), String> {
        match request {
            PrepRequest::Register {
                entry,
                task,
                binding,
                wired,
            } => self
                .register_task(entry, task, binding, wired)
                .map_err(|e| e.to_string()),
            PrepRequest::Deregister { id } => self.deregister_task(&id).map_err(|e| e.to_string()),
            PrepRequest::ConfigureShadow { task } => {
                let slot = self
                    .tasks
                    .iter_mut()
                    .find(|t| !t.removed && t.entry.id == task)
                    .ok_or_else(|| format!("unknown task {task}"))?;
                let b = slot
                    .binding
                    .ok_or_else(|| format!("task {task} has no asset binding"))?;
                slot.wired = true;
                self.gate
                    .register(b.asset, b.slot, b.service)
                    .map_err(|e| e.to_string())
            }
            PrepRequest::ArmSwitch(directive) => self
                .gate
                .arm_switch(&directive, cycle.checked_sub(1))
                .map_err(|e| e.to_string()),
            PrepRequest::CancelSwitch { asset } => self
                .gate
                .cancel_pending(asset, cycle)
                .map(|_| ())
                .map_err(|e| e.to_string()),
            PrepRequest::Reconfigure(delta) => self.pipeline.reconfigure(&delta).map_err(|e| e.to_string()),
            PrepRequest::RegisterAsync { id, task } => self.register_async(id, task).map_err(|e| e.to_string()),
        }
    }

    /// Drains the request queue in FIFO order.
    fn prep_window(&mut self, cycle: Cycle) -> u32 {
        let mut applied = 0;
        loop {
            let pending = match self.requests.try_recv() {
                Ok(p) => p,
                Err(TryRecvError::Empty) | Err(TryRecvError::Disconnected) => break,
            };
            let request::Pending { request, cell } = pending;
            let result = match self.apply_request(request, cycle) {
                Ok(()) => {
                    applied += 1;
                    TicketResult::Applied { cycle }
                }
                Err(reason) => TicketResult::Rejected { cycle, reason },
            };
            let _ = cell.set(result);
        }
        self.rebalance_priorities(cycle);
        applied
    }

    /// The designated controller of every asset runs at P1, the other one at
    /// P2.
    fn rebalance_priorities(&mut self, cycle: Cycle) {
        for slot in self.tasks.iter_mut().filter(|t| !t.removed) {
            if let Some(b) = slot.binding {
                let wanted = if self.gate.designated(b.asset, cycle) == b.slot {
                    Priority::P1
                } else {
                    Priority::P2
                };
                slot.entry.priority = wanted;
            }
        }
    }

    fn log_event(&self, e: StageEvent) {
        if let Some(log) = &self.event_log {
            if let Ok(mut l) = log.lock() {
                l.push(e);
            }
        }
    }

    fn publish(&self, stage: StageId, cycle: Cycle) -> Result<(), ExecError> {
        self.pipeline.publish_stage(stage, cycle)?;
        self.log_event(StageEvent::Published(stage, cycle));
        Ok(())
    }

    fn now_ns(&mut self) -> Result<u64, ExecError> {
        self.clock.now_ns().map_err(ExecError::Clock)
    }

    fn sleep_until(&mut self, target_ns: u64) -> Result<u64, ExecError> {
        let margin = self.spin_margin.as_nanos() as u64;
        loop {
            let now = self.now_ns()?;
            if now >= target_ns {
                return Ok(now);
            }
            let left = target_ns - now;
            if left > margin {
                std::thread::sleep(Duration::from_nanos(left - margin));
            } else {
                std::hint::spin_loop();
            }
        }
    }

    /// Runs one cycle and returns what the management side gets to see.
    pub fn run_cycle(&mut self) -> Result<CycleRecord, ExecError> {
        let cycle = self.next_cycle;
        let period_ns = self.schedule.period_ns();
        let wall = self.schedule.clock_mode == ClockMode::WallClock;

        let t0 = if wall {
            let epoch = match self.epoch_ns {
                Some(e) => e,
                None => {
                    if let Some(p) = self.schedule.realtime_priority {
                        self.realtime = Some(rt::RealtimeGuard::enter(p).map(Some).map_err(|e| e.to_string()));
                    }
                    let e = self.now_ns()? + period_ns;
                    self.epoch_ns = Some(e);
                    e
                }
            };
            epoch + cycle * period_ns
        } else {
            cycle * period_ns
        };

        // Preparation window.
        if wall {
            let prep_start = t0.saturating_sub(self.schedule.prep_offset.as_nanos() as u64);
            self.sleep_until(prep_start)?;
        }
        let requests_applied = self.prep_window(cycle);
        let start = if wall { self.sleep_until(t0)? } else { t0 };
        let start_jitter_ns = start as i64 - t0 as i64;
        let t_start_ns = if wall { start - self.epoch_ns.unwrap_or(0) } else { t0 };

        let _scope = OperationScope::enter();
        let mut timings = Vec::new();

        // Stage 1: input processing.
        self.log_event(StageEvent::Begin(StageId::Input, cycle));
        let s1_start = Instant::now();
        self.pipeline.claim(cycle)?;
        let mut frame = SignalFrame::new(cycle, t_start_ns, self.field.asset_count());
        for asset in 0..self.field.asset_count() {
            let plant = self.field.plant_mut(asset);
            let a = frame.asset_mut(asset);
            a.x = plant.state();
            a.y = plant.sense();
        }
        self.pipeline.store(StageId::Input, cycle, &frame)?;
        self.publish(StageId::Input, cycle)?;
        let s1_ns = if wall {
            s1_start.elapsed().as_nanos() as u64
        } else {
            INPUT_COST.as_nanos() as u64
        };

        // Stage 2: controllers, P2 lane, gate.
        self.log_event(StageEvent::Begin(StageId::Control, cycle));
        let s2_start = Instant::now();
        let t2 = t0 + s1_ns;
        let mut frame = self.pipeline.load(StageId::Control, cycle)?;
        let snapshot = frame;
        let p2_deadline_ns = t0 + self.schedule.p2_window.as_nanos() as u64;

        let mut p2_ids = Vec::new();
        let mut p2_tasks = Vec::new();
        let window_closed = if wall {
            self.now_ns()? >= p2_deadline_ns
        } else {
            t2 >= p2_deadline_ns
        };
        for slot in self.tasks.iter_mut() {
            if slot.removed
                || !slot.wired
                || slot.entry.stage != StageId::Control
                || slot.entry.priority != Priority::P2
            {
                continue;
            }
            if window_closed {
                timings.push(TaskTiming {
                    id: slot.entry.id.clone(),
                    priority: Priority::P2,
                    duration_ns: 0,
                    status: TaskStatus::Starved,
                });
                continue;
            }
            let busy = match slot.task {
                None => true,
                Some(_) => !wall && slot.busy_until_ns > t2,
            };
            if busy {
                timings.push(TaskTiming {
                    id: slot.entry.id.clone(),
                    priority: Priority::P2,
                    duration_ns: 0,
                    status: TaskStatus::Busy,
                });
                continue;
            }
            p2_ids.push(slot.entry.id.clone());
            if wall {
                p2_tasks.push((slot.entry.id.clone(), slot.task.take().expect("checked")));
            }
        }
        if wall && !p2_tasks.is_empty() {
            if matches!(self.lane, P2Lane::Idle) {
                self.lane = P2Lane::Threaded(P2Thread::spawn().map_err(|e| ExecError::Config(e.to_string()))?);
            }
            if let P2Lane::Threaded(t) = &self.lane {
                if let Err(job) = t.dispatch(P2Job {
                    cycle,
                    frame: snapshot,
                    tasks: p2_tasks,
                }) {
                    for (id, task) in job.tasks {
                        self.return_task(&id, task);
                    }
                }
            }
        }

        let mut p1_ns = 0u64;
        for slot in self.tasks.iter_mut() {
            if slot.removed
                || !slot.wired
                || slot.entry.stage != StageId::Control
                || slot.entry.priority != Priority::P1
            {
                continue;
            }
            let Some(task) = slot.task.as_mut() else {
                timings.push(TaskTiming {
                    id: slot.entry.id.clone(),
                    priority: Priority::P1,
                    duration_ns: 0,
                    status: TaskStatus::Busy,
                });
                continue;
            };
            let started = Instant::now();
            let mut cx = TaskContext::new(cycle, StageId::Control, self.schedule.clock_mode, &mut frame, None);
            let result = task.execute(&mut cx);
            self.denied_writes += u64::from(cx.denied_writes());
            let d = if wall {
                started.elapsed().as_nanos() as u64
            } else {
                task.logical_cost(cycle).as_nanos() as u64
            };
            p1_ns += d;
            timings.push(TaskTiming {
                id: slot.entry.id.clone(),
                priority: Priority::P1,
                duration_ns: d,
                status: if result.is_ok() {
                    TaskStatus::Completed
                } else {
                    TaskStatus::Faulted
                },
            });
        }

        let mut stage2_end = t2 + p1_ns;
        if !p2_ids.is_empty() {
            let end = if wall {
                self.collect_p2_wall(cycle, &snapshot, &mut frame, &mut timings, p2_deadline_ns)
            } else {
                self.run_p2_logical(cycle, t2, &p2_ids, &snapshot, &mut frame, &mut timings, p2_deadline_ns)
            };
            stage2_end = stage2_end.max(end);
        }
        if wall {
            self.reclaim_late_p2();
        }

        let mut decisions: Vec<GateDecision> = Vec::with_capacity(self.field.asset_count());
        for asset in 0..self.field.asset_count() {
            let decision = self.gate.apply_gate(asset, cycle, frame.asset(asset));
            let a = frame.asset_mut(asset);
            a.u_applied = decision.value;
            a.source = decision.source;
            a.fault = decision.fault;
            decisions.push(decision);
        }
        self.pipeline.store(StageId::Control, cycle, &frame)?;
        self.publish(StageId::Control, cycle)?;
        let s2_ns = if wall {
            s2_start.elapsed().as_nanos() as u64
        } else {
            stage2_end + GATE_COST.as_nanos() as u64 - t2
        };
        if let Some(log) = self.frame_log.as_mut() {
            log.push(frame);
        }

        // Stage 3: output forwarding (read-only on the ring).
        self.log_event(StageEvent::Begin(StageId::Output, cycle));
        let s3_start = Instant::now();
        let mut frame3 = self.pipeline.load(StageId::Output, cycle)?;
        let mut s3_cost = OUTPUT_COST.as_nanos() as u64;
        for slot in self
            .tasks
            .iter()
            .filter(|t| !t.removed && t.entry.stage == StageId::Output)
        {
            if let Some(task) = &slot.task {
                s3_cost += task.logical_cost(cycle).as_nanos() as u64;
            }
        }
        let deadline = t0 + period_ns;
        let overrun = if wall {
            self.now_ns()? > deadline
        } else {
            t2 + s2_ns + s3_cost > deadline
        };
        let mut applied = Vec::with_capacity(self.field.asset_count());
        for (asset, decision) in decisions.iter().enumerate() {
            let write = if overrun {
                ActuatorWrite {
                    value: self.field.port(asset).last_applied(),
                    source: Source::Hold,
                    service: None,
                    role: None,
                }
            } else {
                ActuatorWrite {
                    value: frame3.asset(asset).u_applied,
                    source: decision.source,
                    service: decision.service,
                    role: decision.service.map(|_| self.gate.role(asset, decision.source, cycle)),
                }
            };
            self.field.forward(cycle, asset, write);
            applied.push(AppliedOutput {
                asset,
                value: write.value,
                source: write.source,
                held: overrun || decision.source == Source::Hold,
            });
        }
        for slot in self.tasks.iter_mut() {
            if slot.removed || !slot.wired || slot.entry.stage != StageId::Output {
                continue;
            }
            if let Some(task) = slot.task.as_mut() {
                let mut cx = TaskContext::new(cycle, StageId::Output, self.schedule.clock_mode, &mut frame3, None);
                let _ = task.execute(&mut cx);
                self.denied_writes += u64::from(cx.denied_writes());
            }
        }
        self.field.check_cycle(cycle);
        self.publish(StageId::Output, cycle)?;
        let (s3_ns, deadline_met) = if wall {
            let s3 = s3_start.elapsed().as_nanos() as u64;
            (s3, self.now_ns()? <= deadline && !overrun)
        } else {
            (s3_cost, !overrun)
        };
        drop(_scope);

        // Stage 4 runs inline only in deterministic mode.
        if !wall {
            self.log_event(StageEvent::Begin(StageId::Async, cycle));
            let reader = self.pipeline.reader();
            for (_, task) in self.async_tasks.iter_mut() {
                task.poll(&reader);
            }
        }

        self.next_cycle += 1;
        let record = CycleRecord {
            metrics: CycleMetrics {
                cycle,
                t_start_ns,
                start_jitter_ns,
                stage_ns: [s1_ns, s2_ns, s3_ns],
                overrun,
                deadline_met,
            },
            tasks: timings,
            applied,
            requests_applied,
        };
        if let Some(tx) = &self.metrics_tx {
            match tx.try_send(record.clone()) {
                Ok(()) => {}
                Err(TrySendError::Full(_)) => self.metrics_dropped += 1,
                Err(TrySendError::Disconnected(_)) => self.metrics_tx = None,
            }
        }
        Ok(record)
    }

    #[allow(clippy::too_many_arguments)]
    fn run_p2_logical(
        &mut self,
        cycle: Cycle,
        t2: u64,
        ids: &[TaskId],
        snapshot: &SignalFrame,
        frame: &mut SignalFrame,
        timings: &mut Vec<TaskTiming>,
        deadline_ns: u64,
    ) -> u64 {
        let P2Lane::Logical { busy_until_ns } = &mut self.lane else {
            return t2;
        };
        let mut waited_until = t2;
        for id in ids {
            let Some(slot) = self.tasks.iter_mut().find(|t| !t.removed && &t.entry.id == id) else {
                continue;
            };
            let task = slot.task.as_mut().expect("logical lane keeps tasks home");
            let begin = t2.max(*busy_until_ns);
            let cost = task.logical_cost(cycle).as_nanos() as u64;
            let finish = begin + cost;
            *busy_until_ns = finish;
            slot.busy_until_ns = finish;
            let mut copy = *snapshot;
            let result = {
                let mut cx = TaskContext::new(cycle, StageId::Control, ClockMode::Deterministic, &mut copy, None);
                task.execute(&mut cx)
            };
            let status = if finish > deadline_ns {
                TaskStatus::Late
            } else if result.is_err() {
                TaskStatus::Faulted
            } else {
                TaskStatus::Completed
            };
            if status != TaskStatus::Late {
                self.denied_writes += u64::from(merge_outputs(slot.binding, snapshot, &copy, frame));
                waited_until = waited_until.max(finish);
            } else {
                waited_until = waited_until.max(deadline_ns);
            }
            timings.push(TaskTiming {
                id: id.clone(),
                priority: Priority::P2,
                duration_ns: cost,
                status,
            });
        }
        waited_until
    }

    fn collect_p2_wall(
        &mut self,
        cycle: Cycle,
        snapshot: &SignalFrame,
        frame: &mut SignalFrame,
        timings: &mut Vec<TaskTiming>,
        deadline_ns: u64,
    ) -> u64 {
        let deadline = Instant::now()
            + Duration::from_nanos(deadline_ns.saturating_sub(self.clock.now_ns().unwrap_or(deadline_ns)));
        loop {
            let done = match &self.lane {
                P2Lane::Threaded(t) => t.recv_until(deadline),
                _ => None,
            };
            let Some(done) = done else {
                break;
            };
            let current = done.cycle == cycle;
            // A result picked up after the window closed (the collector itself
            // got preempted) is late even if it was queued in time.
            let in_time = self.clock.now_ns().is_ok_and(|n| n <= deadline_ns);
            self.absorb_p2(done, (current && in_time).then_some((snapshot, &mut *frame)), timings);
            if current {
                break;
            }
        }
        self.clock.now_ns().unwrap_or(deadline_ns)
    }

    fn reclaim_late_p2(&mut self) {
        loop {
            let done = match &self.lane {
                P2Lane::Threaded(t) => t.try_recv(),
                _ => None,
            };
            let Some(done) = done else { break };
            self.absorb_p2(done, None, &mut Vec::new());
        }
    }

    fn absorb_p2(
        &mut self,
        done: P2Done,
        target: Option<(&SignalFrame, &mut SignalFrame)>,
        timings: &mut Vec<TaskTiming>,
    ) {
        let mut target = target;
        for item in done.items {
            let status = match (&target, &item.result) {
                (None, _) => TaskStatus::Late,
                (Some(_), Ok(())) => TaskStatus::Completed,
                (Some(_), Err(_)) => TaskStatus::Faulted,
            };
            if let Some((snapshot, frame)) = target.as_mut() {
                if status != TaskStatus::Late {
                    let binding = self
                        .tasks
                        .iter()
                        .find(|t| !t.removed && t.entry.id == item.id)
                        .and_then(|t| t.binding);
                    self.denied_writes += u64::from(merge_outputs(binding, snapshot, &item.frame, frame));
                }
            }
            if target.is_some() {
                timings.push(TaskTiming {
                    id: item.id.clone(),
                    priority: Priority::P2,
                    duration_ns: item.duration.as_nanos() as u64,
                    status,
                });
            } else {
                timings.push(TaskTiming {
                    id: item.id.clone(),
                    priority: Priority::P2,
                    duration_ns: item.duration.as_nanos() as u64,
                    status: TaskStatus::Late,
                });
            }
            self.return_task(&item.id, item.task);
        }
    }

    fn return_task(&mut self, id: &TaskId, task: Box<dyn SyncTask>) {
        if let Some(slot) = self.tasks.iter_mut().find(|t| &t.entry.id == id && t.task.is_none()) {
            if slot.removed {
                drop(task);
                self.tasks
                    .retain(|t| !(t.removed && t.task.is_none() && &t.entry.id == id));
            } else {
                slot.task = Some(task);
            }
        }
    }

    /// Wall-clock mode: starts the stage-4 lane. A no-op in deterministic
    /// mode, where stage 4 runs inline after stage 3.
    pub fn start_lanes(&mut self) {
        if self.schedule.clock_mode == ClockMode::WallClock {
            self.start_async_lane();
        }
    }

    /// Stops the P2 and stage-4 lanes and takes their tasks back.
    pub fn stop_lanes(&mut self) {
        self.stop_p2_lane();
        self.stop_async_lane();
        if let Some(Ok(guard)) = self.realtime.as_mut() {
            guard.take();
        }
    }

    /// Whether the cycle thread got real-time scheduling: `None` if it was
    /// not requested (or no wall-clock cycle ran yet), else the outcome.
    pub fn realtime(&self) -> Option<Result<(), &str>> {
        self.realtime
            .as_ref()
            .map(|r| r.as_ref().map(|_| ()).map_err(String::as_str))
    }

    fn start_async_lane(&mut self) {
        if self.async_tasks.is_empty() || self.async_lane.is_some() {
            return;
        }
        let tasks = std::mem::take(&mut self.async_tasks);
        let reader = self.pipeline.reader();
        let stop = Arc::new(std::sync::atomic::AtomicBool::new(false));
        let stop2 = Arc::clone(&stop);
        let period = self.schedule.period;
        let handle = std::thread::Builder::new()
            .name("async-lane".into())
            .spawn(move || {
                let mut tasks = tasks;
                loop {
                    let last = stop2.load(std::sync::atomic::Ordering::Acquire);
                    for (_, t) in tasks.iter_mut() {
                        t.poll(&reader);
                    }
                    if last {
                        break;
                    }
                    std::thread::sleep(period.max(Duration::from_micros(500)));
                }
                tasks
            })
            .expect("spawn async lane");
        self.async_lane = Some(AsyncLane { stop, handle });
    }

    fn stop_async_lane(&mut self) {
        if let Some(lane) = self.async_lane.take() {
            lane.stop.store(true, std::sync::atomic::Ordering::Release);
            if let Ok(tasks) = lane.handle.join() {
                self.async_tasks = tasks;
            }
        }
    }

    fn stop_p2_lane(&mut self) {
        if let P2Lane::Threaded(t) = std::mem::replace(&mut self.lane, P2Lane::Idle) {
            for done in t.shutdown(Duration::from_secs(5)) {
                for item in done.items {
                    self.return_task(&item.id, item.task);
                }
            }
        }
    }

    /// Runs cycles until `until` (exclusive) has been executed, calling
    /// `each` after every cycle.
    pub fn run_with(&mut self, until: Cycle, mut each: impl FnMut(&CycleRecord)) -> RunReport {
        let mut report = RunReport::default();
        self.start_lanes();
        while self.next_cycle < until {
            match self.run_cycle() {
                Ok(rec) => {
                    each(&rec);
                    report.cycles.push(rec.metrics);
                }
                Err(e) => {
                    report.aborted = Some(e.to_string());
                    break;
                }
            }
        }
        self.stop_lanes();
        report.integrity_faults = self.field.faults().len();
        report.write_violations = self.denied_writes();
        report.metrics_dropped = self.metrics_dropped;
        report
    }

    pub fn run(&mut self, until: Cycle) -> RunReport {
        self.run_with(until, |_| {})
    }

    /// Flushes all stage-4 tasks once more (deterministic mode reads inline
    /// already; wall-clock mode uses this after `run`).
    pub fn poll_async(&mut self) {
        let reader = self.pipeline.reader();
        for (_, t) in self.async_tasks.iter_mut() {
            t.poll(&reader);
        }
    }
}

impl Drop for CyclicExecutor {
    fn drop(&mut self) {
        self.stop_async_lane();
        if let P2Lane::Threaded(t) = std::mem::replace(&mut self.lane, P2Lane::Idle) {
            let _ = t.shutdown(Duration::from_millis(100));
        }
    }
}

/// Copies the output a P2 task produced on its private frame copy into the
/// cycle frame. Only the task's own (asset, slot) binding is taken; any
/// other output it changed is dropped and the count of such writes is
/// returned.
fn merge_outputs(binding: Option<Binding>, snapshot: &SignalFrame, copy: &SignalFrame, frame: &mut SignalFrame) -> u32 {
    let mut foreign = 0;
    for i in 0..frame.asset_count {
        for slot in [Source::A, Source::B] {
            let before = snapshot.asset(i).output(slot);
            let after = copy.asset(i).output(slot);
            if before.map(f64::to_bits) == after.map(f64::to_bits) {
                continue;
            }
            if binding.is_some_and(|b| b.asset == i && b.slot == slot) {
                frame.asset_mut(i).set_output(slot, after);
            } else {
                foreign += 1;
            }
        }
    }
    foreign
}
