//! Device-level managing system: shadow deployment state machine, resource
//! monitoring with autonomous abort, and the switch requests.
//!
//! The manager never touches the operation plane directly. It observes
//! [`CycleRecord`]s after the fact and acts only by submitting preparation
//! requests, so every effect lands at a cycle boundary.

use std::collections::VecDeque;
use std::fmt;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::control::{ControllerTask, CostInjection, ServiceDescriptor, SwitchDirection, SwitchDirective};
use crate::executor::{
    Binding, CycleRecord, PrepRequest, Priority, RequestSender, SubmitError, TaskEntry, TaskStatus, Ticket,
    TicketResult,
};
use crate::plant::AssetId;
use crate::ring::{Cycle, Source, TaskId};
use crate::separation::SeparationProbe;

/// Static memory a controller service reserves at deployment.
pub const SERVICE_FOOTPRINT_BYTES: u64 = 4096;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AdaptationState {
    Idle,
    Allocating,
    Configuring,
    Shadow,
    Switching,
    Active,
    RolledBack,
    Aborted,
}

impl AdaptationState {
    pub const ALL: [AdaptationState; 8] = [
        AdaptationState::Idle,
        AdaptationState::Allocating,
        AdaptationState::Configuring,
        AdaptationState::Shadow,
        AdaptationState::Switching,
        AdaptationState::Active,
        AdaptationState::RolledBack,
        AdaptationState::Aborted,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AdaptationState::Idle => "Idle",
            AdaptationState::Allocating => "Allocating",
            AdaptationState::Configuring => "Configuring",
            AdaptationState::Shadow => "Shadow",
            AdaptationState::Switching => "Switching",
            AdaptationState::Active => "Active",
            AdaptationState::RolledBack => "RolledBack",
            AdaptationState::Aborted => "Aborted",
        }
    }

    pub fn is_terminal(self) -> bool {
        matches!(self, AdaptationState::RolledBack | AdaptationState::Aborted)
    }
}

impl fmt::Display for AdaptationState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "detail", rename_all = "snake_case")]
pub enum AbortReason {
    AllocFailed,
    BudgetViolation,
    OverrunRate,
    Operator,
    RequestRejected(String),
}

/// Everything that can move the state machine.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Trigger {
    Deploy,
    Allocated,
    Configured,
    SwitchArmed,
    SwitchReached,
    RollbackReached,
    Abort(AbortReason),
}

impl Trigger {
    /// One representative of every trigger kind, for enumeration.
    pub fn all() -> Vec<Trigger> {
        vec![
            Trigger::Deploy,
            Trigger::Allocated,
            Trigger::Configured,
            Trigger::SwitchArmed,
            Trigger::SwitchReached,
            Trigger::RollbackReached,
            Trigger::Abort(AbortReason::AllocFailed),
            Trigger::Abort(AbortReason::BudgetViolation),
            Trigger::Abort(AbortReason::OverrunRate),
            Trigger::Abort(AbortReason::Operator),
            Trigger::Abort(AbortReason::RequestRejected(String::new())),
        ]
    }
}

/// The legal edges of the adaptation state machine.
pub const LEGAL_TRANSITIONS: [(AdaptationState, AdaptationState); 10] = [
    (AdaptationState::Idle, AdaptationState::Allocating),
    (AdaptationState::Allocating, AdaptationState::Configuring),
    (AdaptationState::Configuring, AdaptationState::Shadow),
    (AdaptationState::Shadow, AdaptationState::Switching),
    (AdaptationState::Switching, AdaptationState::Active),
    (AdaptationState::Shadow, AdaptationState::Aborted),
    (AdaptationState::Switching, AdaptationState::Aborted),
    (AdaptationState::Active, AdaptationState::RolledBack),
    (AdaptationState::Allocating, AdaptationState::Aborted),
    (AdaptationState::Configuring, AdaptationState::Aborted),
];

/// Transition function; `None` means the trigger is refused in `state`.
pub fn next_state(state: AdaptationState, trigger: &Trigger) -> Option<AdaptationState> {
    use AdaptationState::*;
    match (state, trigger) {
        (Idle, Trigger::Deploy) => Some(Allocating),
        (Allocating, Trigger::Allocated) => Some(Configuring),
        (Configuring, Trigger::Configured) => Some(Shadow),
        (Shadow, Trigger::SwitchArmed) => Some(Switching),
        (Switching, Trigger::SwitchReached) => Some(Active),
        (Active, Trigger::RollbackReached) => Some(RolledBack),
        // Budget violations while Active are handled by rolling back.
        (Active, Trigger::Abort(AbortReason::BudgetViolation | AbortReason::OverrunRate)) => Some(RolledBack),
        (Allocating | Configuring | Shadow | Switching, Trigger::Abort(_)) => Some(Aborted),
        _ => None,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ResourceBudget {
    pub max_stage2_us: u64,
    pub violation_threshold: u32,
    pub arena_limit_bytes: u64,
}

impl ResourceBudget {
    pub fn validate(&self) -> Result<(), AdaptationError> {
        if self.violation_threshold == 0 {
            return Err(AdaptationError::Config("violation_threshold must be >= 1".into()));
        }
        Ok(())
    }

    fn max_stage2(&self) -> Duration {
        Duration::from_micros(self.max_stage2_us)
    }
}

impl Default for ResourceBudget {
    fn default() -> Self {
        ResourceBudget {
            max_stage2_us: 200,
            violation_threshold: 5,
            arena_limit_bytes: 64 * 1024,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ManagerConfig {
    /// Cycles after a promotion during which rollback stays possible and A
    /// stays resident.
    pub retention_cycles: u64,
    /// Trailing window, in cycles, that must be free of budget violations
    /// for a promotion to be accepted.
    pub health_window: u64,
    /// Trailing window for the overrun-rate check.
    pub overrun_window: u64,
    /// Tolerated increase of the overrun rate over the pre-deployment rate.
    pub max_overrun_rate_increase: f64,
}

impl Default for ManagerConfig {
    fn default() -> Self {
        ManagerConfig {
            retention_cycles: 1000,
            health_window: 1000,
            overrun_window: 100,
            max_overrun_rate_increase: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub cycle: Cycle,
    pub from: AdaptationState,
    pub to: AdaptationState,
    pub reason: String,
}

/// What to deploy as the shadow service.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeploySpec {
    pub descriptor: ServiceDescriptor,
    pub budget: ResourceBudget,
    /// Declared execution cost, charged in deterministic mode.
    pub cost_us: u64,
    #[serde(default)]
    pub injection: Option<CostInjection>,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AdaptationError {
    #[error("rejected in state {state}: {reason}")]
    Rejected { state: AdaptationState, reason: String },
    #[error("unknown asset {0}")]
    UnknownAsset(AssetId),
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Submit(#[from] SubmitError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum PendingKind {
    Register,
    Configure,
    ArmPromote(Cycle),
    ArmRollback(Cycle),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Armed {
    None,
    Promote(Cycle),
    Rollback(Cycle),
}

#[derive(Clone, Debug, Serialize)]
pub struct AdaptationStatus {
    pub asset: AssetId,
    pub state: AdaptationState,
    pub service_b: Option<ServiceDescriptor>,
    pub budget: Option<ResourceBudget>,
    pub abort_reason: Option<AbortReason>,
    pub switch_cycle: Option<Cycle>,
    pub rollback_cycle: Option<Cycle>,
    pub violations_in_window: u64,
    pub prepared_switch: Option<Cycle>,
    pub history: Vec<Transition>,
    /// Non-transition events such as armed autonomous rollbacks.
    pub notes: Vec<(Cycle, String)>,
}

struct AssetAdaptation {
    asset: AssetId,
    state: AdaptationState,
    active_task: Option<TaskId>,
    active_retired: bool,
    spec: Option<DeploySpec>,
    shadow_task: Option<TaskId>,
    history: Vec<Transition>,
    notes: Vec<(Cycle, String)>,
    abort_reason: Option<AbortReason>,
    pending: Vec<(PendingKind, Ticket)>,
    armed: Armed,
    switch_cycle: Option<Cycle>,
    rollback_cycle: Option<Cycle>,
    consecutive_violations: u32,
    violations: VecDeque<bool>,
    deployed_at: Option<Cycle>,
    prepared: Option<Cycle>,
    removal_requested: bool,
}

impl AssetAdaptation {
    fn new(asset: AssetId, active_task: Option<TaskId>) -> Self {
        AssetAdaptation {
            asset,
            state: AdaptationState::Idle,
            active_task,
            active_retired: false,
            spec: None,
            shadow_task: None,
            history: Vec::new(),
            notes: Vec::new(),
            abort_reason: None,
            pending: Vec::new(),
            armed: Armed::None,
            switch_cycle: None,
            rollback_cycle: None,
            consecutive_violations: 0,
            violations: VecDeque::new(),
            deployed_at: None,
            prepared: None,
            removal_requested: false,
        }
    }

    fn fire(&mut self, cycle: Cycle, trigger: Trigger, reason: impl Into<String>) -> bool {
        let Some(to) = next_state(self.state, &trigger) else {
            return false;
        };
        if let Trigger::Abort(r) = &trigger {
            self.abort_reason = Some(r.clone());
        }
        self.history.push(Transition {
            cycle,
            from: self.state,
            to,
            reason: reason.into(),
        });
        self.state = to;
        true
    }

    fn violation_count(&self) -> u64 {
        self.violations.iter().filter(|v| **v).count() as u64
    }

    fn rejected(&self, reason: impl Into<String>) -> AdaptationError {
        AdaptationError::Rejected {
            state: self.state,
            reason: reason.into(),
        }
    }

    fn within_retention(&self, current: Option<Cycle>, retention: u64) -> bool {
        match (self.switch_cycle, current) {
            (Some(k), Some(c)) => c < k + retention,
            (Some(_), None) => true,
            _ => false,
        }
    }
}

/// Predicate deciding whether the plant is in a state where adaptations are
/// permitted. Receives the last completed cycle.
pub type AdaptationGuard = Box<dyn Fn(Option<Cycle>) -> bool + Send>;

pub struct AdaptationManager {
    sender: RequestSender,
    config: ManagerConfig,
    assets: Vec<AssetAdaptation>,
    current: Option<Cycle>,
    probe: SeparationProbe,
    guard: AdaptationGuard,
    /// Overrun flags of the trailing window, all cycles.
    overruns: VecDeque<(Cycle, bool)>,
    /// Overrun rate over the window before the first deployment.
    baseline_overrun_rate: Option<f64>,
}

impl AdaptationManager {
    /// `active_tasks[i]` is the task id of asset `i`'s baseline service.
    pub fn new(sender: RequestSender, config: ManagerConfig, active_tasks: Vec<Option<TaskId>>) -> Self {
        AdaptationManager {
            sender,
            config,
            assets: active_tasks
                .into_iter()
                .enumerate()
                .map(|(i, t)| AssetAdaptation::new(i, t))
                .collect(),
            current: None,
            probe: SeparationProbe::new(),
            guard: Box::new(|_| true),
            overruns: VecDeque::new(),
            baseline_overrun_rate: None,
        }
    }

    pub fn set_guard(&mut self, guard: AdaptationGuard) {
        self.guard = guard;
    }

    pub fn set_probe(&mut self, probe: SeparationProbe) {
        self.probe = probe;
    }

    pub fn probe(&self) -> &SeparationProbe {
        &self.probe
    }

    pub fn config(&self) -> &ManagerConfig {
        &self.config
    }

    /// Last completed cycle seen by the manager.
    pub fn current_cycle(&self) -> Option<Cycle> {
        self.current
    }

    pub fn asset_count(&self) -> usize {
        self.assets.len()
    }

    pub fn state(&self, asset: AssetId) -> Option<AdaptationState> {
        self.assets.get(asset).map(|a| a.state)
    }

    pub fn history(&self, asset: AssetId) -> &[Transition] {
        self.assets.get(asset).map_or(&[], |a| a.history.as_slice())
    }

    pub fn shadow_task(&self, asset: AssetId) -> Option<&TaskId> {
        self.assets.get(asset).and_then(|a| a.shadow_task.as_ref())
    }

    pub fn status(&self, asset: AssetId) -> Option<AdaptationStatus> {
        self.assets.get(asset).map(|a| AdaptationStatus {
            asset,
            state: a.state,
            service_b: a.spec.as_ref().map(|s| s.descriptor.clone()),
            budget: a.spec.as_ref().map(|s| s.budget),
            abort_reason: a.abort_reason.clone(),
            switch_cycle: a.switch_cycle,
            rollback_cycle: a.rollback_cycle,
            violations_in_window: a.violation_count(),
            prepared_switch: a.prepared,
            history: a.history.clone(),
            notes: a.notes.clone(),
        })
    }

    pub fn statuses(&self) -> Vec<AdaptationStatus> {
        (0..self.assets.len()).filter_map(|a| self.status(a)).collect()
    }

    /// Transition log of every asset as line-delimited JSON.
    pub fn history_ndjson(&self) -> String {
        let mut out = String::new();
        for a in &self.assets {
            for t in &a.history {
                let line = serde_json::json!({
                    "asset": a.asset,
                    "cycle": t.cycle,
                    "from": t.from,
                    "to": t.to,
                    "reason": t.reason,
                });
                out.push_str(&line.to_string());
                out.push('\n');
            }
        }
        out
    }

    fn asset_mut(&mut self, asset: AssetId) -> Result<&mut AssetAdaptation, AdaptationError> {
        self.assets.get_mut(asset).ok_or(AdaptationError::UnknownAsset(asset))
    }

    /// The cycle whose preparation window will see a request submitted now.
    fn next_prep(&self) -> Cycle {
        self.current.map_or(0, |c| c + 1)
    }

    pub fn deploy_shadow(&mut self, spec: DeploySpec) -> Result<Ticket, AdaptationError> {
        self.probe.check("deploy_shadow");
        spec.budget.validate()?;
        spec.descriptor.controller.validate().map_err(AdaptationError::Config)?;
        let asset = spec.descriptor.target_asset;
        let cycle = self.next_prep();
        let permitted = (self.guard)(self.current);
        let sender = self.sender.clone();
        let a = self.asset_mut(asset)?;
        if a.state != AdaptationState::Idle {
            return Err(a.rejected("a shadow deployment already exists for this asset"));
        }
        if !permitted {
            return Err(a.rejected("plant is not in a state that permits adaptation"));
        }
        a.spec = Some(spec.clone());
        a.fire(cycle, Trigger::Deploy, format!("deploy {}", spec.descriptor.name));
        a.deployed_at = Some(cycle);

        if spec.budget.arena_limit_bytes < SERVICE_FOOTPRINT_BYTES {
            a.fire(
                cycle,
                Trigger::Abort(AbortReason::AllocFailed),
                format!(
                    "arena limit {} B below service footprint {} B",
                    spec.budget.arena_limit_bytes, SERVICE_FOOTPRINT_BYTES
                ),
            );
            return Ok(Ticket::resolved(TicketResult::Rejected {
                cycle,
                reason: "allocation failed".into(),
            }));
        }

        let id = TaskId::new(format!("{}@{}", spec.descriptor.name, asset));
        let task = ControllerTask::new(spec.descriptor.clone(), Source::B, Duration::from_micros(spec.cost_us))
            .with_injection(spec.injection);
        let entry = TaskEntry::controller(id.clone(), Priority::P2, spec.budget.max_stage2());
        let request = PrepRequest::Register {
            entry,
            task: Box::new(task),
            binding: Some(Binding {
                asset,
                slot: Source::B,
                service: spec.descriptor.id,
            }),
            wired: false,
        };
        match sender.submit(request) {
            Ok(ticket) => {
                a.shadow_task = Some(id);
                a.pending.push((PendingKind::Register, ticket.clone()));
                Ok(ticket)
            }
            Err(e) => {
                a.fire(
                    cycle,
                    Trigger::Abort(AbortReason::RequestRejected(e.to_string())),
                    e.to_string(),
                );
                Err(e.into())
            }
        }
    }

    /// Promotion precondition without side effects.
    pub fn check_promote(&self, asset: AssetId, k: Cycle) -> Result<(), AdaptationError> {
        let a = self.assets.get(asset).ok_or(AdaptationError::UnknownAsset(asset))?;
        if a.state != AdaptationState::Shadow {
            return Err(a.rejected("promotion requires a shadow service"));
        }
        let earliest = self.next_prep();
        if k < earliest {
            return Err(a.rejected(format!(
                "switch cycle {k} is not after current cycle {}",
                earliest.saturating_sub(1)
            )));
        }
        let violations = a.violation_count();
        if violations > 0 {
            return Err(a.rejected(format!(
                "shadow unhealthy: {violations} budget violations in the last {} cycles",
                self.config.health_window
            )));
        }
        if a.pending.iter().any(|(k, _)| matches!(k, PendingKind::ArmPromote(_))) {
            return Err(a.rejected("a promotion is already pending"));
        }
        Ok(())
    }

    pub fn request_promote(&mut self, asset: AssetId, k: Cycle) -> Result<Ticket, AdaptationError> {
        self.probe.check("request_promote");
        self.check_promote(asset, k)?;
        let a = self.asset_mut(asset)?;
        if let Some(p) = a.prepared {
            if p != k {
                return Err(a.rejected(format!("switch agreement for cycle {p} in progress")));
            }
        }
        self.arm(asset, k, SwitchDirection::Promote)
    }

    pub fn request_rollback(&mut self, asset: AssetId, m: Cycle) -> Result<Ticket, AdaptationError> {
        self.probe.check("request_rollback");
        let earliest = self.next_prep();
        let current = self.current;
        let retention = self.config.retention_cycles;
        let a = self.asset_mut(asset)?;
        if a.state != AdaptationState::Active {
            return Err(a.rejected("rollback requires an active promoted service"));
        }
        if !a.within_retention(current, retention) || a.active_retired {
            return Err(a.rejected("retention window expired"));
        }
        if m < earliest {
            return Err(a.rejected(format!(
                "rollback cycle {m} is not after current cycle {}",
                earliest.saturating_sub(1)
            )));
        }
        if a.armed != Armed::None || !a.pending.is_empty() {
            return Err(a.rejected("a switch is already pending"));
        }
        self.arm(asset, m, SwitchDirection::Rollback)
    }

    fn arm(&mut self, asset: AssetId, at: Cycle, direction: SwitchDirection) -> Result<Ticket, AdaptationError> {
        let ticket = self.sender.submit(PrepRequest::ArmSwitch(SwitchDirective {
            asset,
            switch_cycle: at,
            direction,
        }))?;
        let kind = match direction {
            SwitchDirection::Promote => PendingKind::ArmPromote(at),
            SwitchDirection::Rollback => PendingKind::ArmRollback(at),
        };
        self.asset_mut(asset)?.pending.push((kind, ticket.clone()));
        Ok(ticket)
    }

    /// Operator abort of an ongoing deployment.
    pub fn abort(&mut self, asset: AssetId) -> Result<(), AdaptationError> {
        self.probe.check("abort");
        let a = self.assets.get(asset).ok_or(AdaptationError::UnknownAsset(asset))?;
        if next_state(a.state, &Trigger::Abort(AbortReason::Operator)) != Some(AdaptationState::Aborted) {
            return Err(a.rejected("nothing to abort"));
        }
        self.terminate(asset, AbortReason::Operator, "operator abort".into())
    }

    /// First phase of a multi-device switch: vote on `k`.
    pub fn prepare_switch(&mut self, asset: AssetId, k: Cycle) -> Result<(), AdaptationError> {
        self.probe.check("prepare_switch");
        self.check_promote(asset, k)?;
        let a = self.asset_mut(asset)?;
        if let Some(p) = a.prepared {
            return Err(a.rejected(format!("already prepared for cycle {p}")));
        }
        a.prepared = Some(k);
        Ok(())
    }

    pub fn commit_switch(&mut self, asset: AssetId, k: Cycle) -> Result<Ticket, AdaptationError> {
        self.probe.check("commit_switch");
        let a = self.asset_mut(asset)?;
        if a.prepared != Some(k) {
            return Err(a.rejected(format!("not prepared for cycle {k}")));
        }
        let ticket = self.request_promote(asset, k);
        self.asset_mut(asset)?.prepared = None;
        ticket
    }

    pub fn release_switch(&mut self, asset: AssetId) -> Result<(), AdaptationError> {
        self.probe.check("release_switch");
        self.asset_mut(asset)?.prepared = None;
        Ok(())
    }

    /// Deregisters B (cancelling any armed switch first) and moves to
    /// Aborted.
    fn terminate(&mut self, asset: AssetId, reason: AbortReason, detail: String) -> Result<(), AdaptationError> {
        let cycle = self.next_prep();
        let sender = self.sender.clone();
        let a = self.asset_mut(asset)?;
        let needs_cancel = matches!(a.armed, Armed::Promote(_))
            || a.pending.iter().any(|(k, _)| matches!(k, PendingKind::ArmPromote(_)));
        a.pending.clear();
        a.prepared = None;
        a.armed = Armed::None;
        a.fire(cycle, Trigger::Abort(reason), detail);
        if needs_cancel {
            sender.submit(PrepRequest::CancelSwitch { asset })?;
        }
        if let Some(id) = a.shadow_task.clone() {
            if !a.removal_requested {
                a.removal_requested = true;
                sender.submit(PrepRequest::Deregister { id })?;
            }
        }
        Ok(())
    }

    /// Rolls an active B back to A at the next cycle without operator
    /// involvement.
    fn autonomous_rollback(
        &mut self,
        asset: AssetId,
        reason: AbortReason,
        detail: String,
    ) -> Result<(), AdaptationError> {
        let m = self.next_prep();
        let a = self.asset_mut(asset)?;
        if a.armed != Armed::None || !a.pending.is_empty() {
            return Ok(());
        }
        a.abort_reason = Some(reason);
        a.notes.push((m, format!("autonomous rollback armed: {detail}")));
        self.arm(asset, m, SwitchDirection::Rollback).map(|_| ())
    }

    /// Feeds one completed cycle. Drives pending requests and the budget and
    /// overrun monitors.
    pub fn observe(&mut self, record: &CycleRecord) {
        self.probe.check("observe");
        let cycle = record.metrics.cycle;
        self.current = Some(cycle);

        self.overruns.push_back((cycle, record.metrics.overrun));
        while self.overruns.len() as u64 > self.config.overrun_window.max(1) {
            self.overruns.pop_front();
        }
        let any_deployed = self.assets.iter().any(|a| a.deployed_at.is_some());
        if !any_deployed {
            let n = self.overruns.len().max(1) as f64;
            self.baseline_overrun_rate = Some(self.overruns.iter().filter(|(_, o)| *o).count() as f64 / n);
        }

        for asset in 0..self.assets.len() {
            self.advance(asset, record);
        }
    }

    fn advance(&mut self, asset: AssetId, record: &CycleRecord) {
        let cycle = record.metrics.cycle;
        let sender = self.sender.clone();
        let retention = self.config.retention_cycles;
        let health_window = self.config.health_window;

        // Resolve pending requests in submission order.
        let mut follow_up: Vec<PrepRequest> = Vec::new();
        {
            let a = &mut self.assets[asset];
            let mut still = Vec::new();
            for (kind, ticket) in std::mem::take(&mut a.pending) {
                let Some(result) = ticket.result().cloned() else {
                    still.push((kind, ticket));
                    continue;
                };
                match (kind, result) {
                    (PendingKind::Register, TicketResult::Applied { cycle: at }) => {
                        a.fire(at, Trigger::Allocated, "shadow task registered");
                        if let Some(id) = a.shadow_task.clone() {
                            follow_up.push(PrepRequest::ConfigureShadow { task: id });
                        }
                    }
                    (PendingKind::Configure, TicketResult::Applied { cycle: at }) => {
                        a.fire(
                            at,
                            Trigger::Configured,
                            "shadow wired to sensor signals, output blocked",
                        );
                    }
                    (PendingKind::ArmPromote(k), TicketResult::Applied { cycle: at }) => {
                        if a.fire(at, Trigger::SwitchArmed, format!("promotion armed for cycle {k}")) {
                            a.armed = Armed::Promote(k);
                        }
                    }
                    (PendingKind::ArmRollback(m), TicketResult::Applied { .. }) => {
                        a.armed = Armed::Rollback(m);
                    }
                    (PendingKind::Register | PendingKind::Configure, TicketResult::Rejected { cycle: at, reason }) => {
                        a.fire(at, Trigger::Abort(AbortReason::RequestRejected(reason.clone())), reason);
                        a.shadow_task = a.shadow_task.take().filter(|_| kind == PendingKind::Configure);
                        if let Some(id) = a.shadow_task.clone() {
                            a.removal_requested = true;
                            follow_up.push(PrepRequest::Deregister { id });
                        }
                    }
                    (PendingKind::ArmPromote(_) | PendingKind::ArmRollback(_), TicketResult::Rejected { .. }) => {}
                }
            }
            a.pending = still;
        }
        for request in follow_up {
            let is_configure = matches!(request, PrepRequest::ConfigureShadow { .. });
            match sender.submit(request) {
                Ok(t) if is_configure => self.assets[asset].pending.push((PendingKind::Configure, t)),
                Ok(_) => {}
                Err(e) => {
                    let a = &mut self.assets[asset];
                    a.fire(
                        cycle + 1,
                        Trigger::Abort(AbortReason::RequestRejected(e.to_string())),
                        e.to_string(),
                    );
                }
            }
        }

        // Switch points reached.
        let a = &mut self.assets[asset];
        match a.armed {
            Armed::Promote(k) if cycle >= k => {
                a.fire(k, Trigger::SwitchReached, format!("B applied from cycle {k}"));
                a.switch_cycle = Some(k);
                a.armed = Armed::None;
                a.consecutive_violations = 0;
            }
            Armed::Rollback(m) if cycle >= m => {
                let reason = match &a.abort_reason {
                    Some(r) => format!("A applied from cycle {m} (autonomous: {r:?})"),
                    None => format!("A applied from cycle {m}"),
                };
                a.fire(m, Trigger::RollbackReached, reason);
                a.rollback_cycle = Some(m);
                a.armed = Armed::None;
                if let Some(id) = a.shadow_task.clone() {
                    if !a.removal_requested {
                        a.removal_requested = true;
                        let _ = sender.submit(PrepRequest::Deregister { id });
                    }
                }
            }
            _ => {}
        }

        // Retention expiry retires A.
        if a.state == AdaptationState::Active && !a.active_retired && !a.within_retention(Some(cycle), retention) {
            a.active_retired = true;
            if let Some(id) = a.active_task.clone() {
                a.notes.push((cycle + 1, format!("retention expired, {id} retired")));
                let _ = sender.submit(PrepRequest::Deregister { id });
            }
        }

        // Budget monitor.
        let monitored = matches!(a.state, AdaptationState::Shadow | AdaptationState::Switching)
            || (a.state == AdaptationState::Active && !a.active_retired);
        if !monitored {
            return;
        }
        let (Some(spec), Some(id)) = (a.spec.as_ref(), a.shadow_task.as_ref()) else {
            return;
        };
        let budget = spec.budget;
        // A starved cycle says nothing about B's own usage: it neither counts
        // as a violation nor breaks a streak.
        let violated = record
            .tasks
            .iter()
            .find(|t| &t.id == id && t.status != TaskStatus::Starved)
            .map(|t| {
                matches!(t.status, TaskStatus::Late | TaskStatus::Busy)
                    || t.duration_ns > budget.max_stage2().as_nanos() as u64
            });
        let Some(violated) = violated else {
            return;
        };
        a.violations.push_back(violated);
        while a.violations.len() as u64 > health_window {
            a.violations.pop_front();
        }
        a.consecutive_violations = if violated { a.consecutive_violations + 1 } else { 0 };
        let deployed_at = a.deployed_at;
        let state = a.state;

        let mut verdict = None;
        if a.consecutive_violations >= budget.violation_threshold {
            verdict = Some((
                AbortReason::BudgetViolation,
                format!(
                    "stage-2 budget {} us exceeded for {} consecutive cycles",
                    budget.max_stage2_us, a.consecutive_violations
                ),
            ));
        } else if let Some(from) = deployed_at {
            let since: Vec<bool> = self
                .overruns
                .iter()
                .filter(|(c, _)| *c >= from)
                .map(|(_, o)| *o)
                .collect();
            if since.len() as u64 >= self.config.overrun_window {
                let rate = since.iter().filter(|o| **o).count() as f64 / since.len() as f64;
                let baseline = self.baseline_overrun_rate.unwrap_or(0.0);
                if rate - baseline > self.config.max_overrun_rate_increase {
                    verdict = Some((
                        AbortReason::OverrunRate,
                        format!("overrun rate {rate:.3} exceeds baseline {baseline:.3}"),
                    ));
                }
            }
        }
        if let Some((reason, detail)) = verdict {
            let _ = if state == AdaptationState::Active {
                self.autonomous_rollback(asset, reason, detail)
            } else {
                self.terminate(asset, reason, detail)
            };
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::{BTreeSet, VecDeque};

    #[test]
    fn every_enumerated_transition_is_legal() {
        let legal: BTreeSet<_> = LEGAL_TRANSITIONS.iter().copied().collect();
        for s in AdaptationState::ALL {
            for t in Trigger::all() {
                if let Some(to) = next_state(s, &t) {
                    assert!(legal.contains(&(s, to)), "{s} --{t:?}--> {to}");
                }
            }
        }
    }

    #[test]
    fn reachable_graph_has_no_illegal_edges_and_terminals_absorb() {
        let legal: BTreeSet<_> = LEGAL_TRANSITIONS.iter().copied().collect();
        let mut seen = BTreeSet::from([AdaptationState::Idle]);
        let mut queue = VecDeque::from([AdaptationState::Idle]);
        while let Some(s) = queue.pop_front() {
            for t in Trigger::all() {
                if let Some(to) = next_state(s, &t) {
                    assert!(legal.contains(&(s, to)));
                    if seen.insert(to) {
                        queue.push_back(to);
                    }
                }
            }
        }
        assert_eq!(seen.len(), AdaptationState::ALL.len());
        for s in [AdaptationState::RolledBack, AdaptationState::Aborted] {
            assert!(Trigger::all().iter().all(|t| next_state(s, t).is_none()));
        }
    }

    #[test]
    fn abort_is_refused_in_idle_and_active() {
        let t = Trigger::Abort(AbortReason::Operator);
        assert_eq!(next_state(AdaptationState::Idle, &t), None);
        assert_eq!(next_state(AdaptationState::Active, &t), None);
    }

    #[test]
    fn zero_threshold_budget_rejected() {
        let b = ResourceBudget {
            violation_threshold: 0,
            ..ResourceBudget::default()
        };
        assert!(b.validate().is_err());
    }
}
