//! Bounded preparation-window request queue with resolvable tickets.

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, SyncSender, TrySendError};
use std::sync::{Arc, OnceLock};

use serde::Serialize;
use thiserror::Error;

use super::{AsyncTask, Binding, SyncTask, TaskEntry};
use crate::control::SwitchDirective;
use crate::plant::AssetId;
use crate::ring::{Cycle, StageGraphDelta, TaskId};

pub const DEFAULT_QUEUE_DEPTH: usize = 64;

/// A change to the operation plane, applied at the next preparation window.
pub enum PrepRequest {
    Register {
        entry: TaskEntry,
        task: Box<dyn SyncTask>,
        binding: Option<Binding>,
        /// Unwired tasks are registered but receive no inputs and do not run.
        wired: bool,
    },
    Deregister {
        id: TaskId,
    },
    /// Wires a registered controller to its asset's sensor signals and
    /// enters it in the gate as a blocked (non-designated) service.
    ConfigureShadow {
        task: TaskId,
    },
    ArmSwitch(SwitchDirective),
    /// Drops an armed switch of `asset` that has not taken effect yet.
    CancelSwitch {
        asset: AssetId,
    },
    Reconfigure(StageGraphDelta),
    RegisterAsync {
        id: TaskId,
        task: Box<dyn AsyncTask>,
    },
}

impl PrepRequest {
    pub fn kind(&self) -> &'static str {
        match self {
            PrepRequest::Register { .. } => "register",
            PrepRequest::Deregister { .. } => "deregister",
            PrepRequest::ConfigureShadow { .. } => "configure_shadow",
            PrepRequest::ArmSwitch(_) => "arm_switch",
            PrepRequest::CancelSwitch { .. } => "cancel_switch",
            PrepRequest::Reconfigure(_) => "reconfigure",
            PrepRequest::RegisterAsync { .. } => "register_async",
        }
    }
}

impl fmt::Debug for PrepRequest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PrepRequest::Register {
                entry, binding, wired, ..
            } => f
                .debug_struct("Register")
                .field("entry", entry)
                .field("binding", binding)
                .field("wired", wired)
                .finish(),
            PrepRequest::Deregister { id } => f.debug_struct("Deregister").field("id", id).finish(),
            PrepRequest::ConfigureShadow { task } => f.debug_struct("ConfigureShadow").field("task", task).finish(),
            PrepRequest::ArmSwitch(d) => f.debug_tuple("ArmSwitch").field(d).finish(),
            PrepRequest::CancelSwitch { asset } => f.debug_struct("CancelSwitch").field("asset", asset).finish(),
            PrepRequest::Reconfigure(d) => f.debug_tuple("Reconfigure").field(d).finish(),
            PrepRequest::RegisterAsync { id, .. } => f.debug_struct("RegisterAsync").field("id", id).finish(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum TicketResult {
    /// Applied in the preparation window of `cycle`.
    Applied {
        cycle: Cycle,
    },
    Rejected {
        cycle: Cycle,
        reason: String,
    },
}

impl TicketResult {
    pub fn cycle(&self) -> Cycle {
        match self {
            TicketResult::Applied { cycle } | TicketResult::Rejected { cycle, .. } => *cycle,
        }
    }

    pub fn is_applied(&self) -> bool {
        matches!(self, TicketResult::Applied { .. })
    }
}

/// Handle to the eventual outcome of a submitted request.
#[derive(Clone, Debug)]
pub struct Ticket {
    id: u64,
    cell: Arc<OnceLock<TicketResult>>,
}

impl Ticket {
    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn result(&self) -> Option<&TicketResult> {
        self.cell.get()
    }

    /// A ticket resolved out of band, for requests rejected before queueing.
    pub fn resolved(result: TicketResult) -> Ticket {
        let cell = Arc::new(OnceLock::new());
        let _ = cell.set(result);
        Ticket { id: 0, cell }
    }
}

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
pub enum SubmitError {
    #[error("preparation queue full (depth {depth})")]
    Backpressure { depth: usize },
    #[error("executor has shut down")]
    Closed,
}

pub(crate) struct Pending {
    pub request: PrepRequest,
    pub cell: Arc<OnceLock<TicketResult>>,
}

/// Submission side of the queue; cheap to clone.
#[derive(Clone)]
pub struct RequestSender {
    tx: SyncSender<Pending>,
    depth: usize,
    next_id: Arc<AtomicU64>,
}

impl RequestSender {
    pub fn submit(&self, request: PrepRequest) -> Result<Ticket, SubmitError> {
        let cell = Arc::new(OnceLock::new());
        let pending = Pending {
            request,
            cell: Arc::clone(&cell),
        };
        match self.tx.try_send(pending) {
            Ok(()) => Ok(Ticket {
                id: self.next_id.fetch_add(1, Ordering::Relaxed) + 1,
                cell,
            }),
            Err(TrySendError::Full(_)) => Err(SubmitError::Backpressure { depth: self.depth }),
            Err(TrySendError::Disconnected(_)) => Err(SubmitError::Closed),
        }
    }
}

pub(crate) fn queue(depth: usize) -> (RequestSender, Receiver<Pending>) {
    let (tx, rx) = mpsc::sync_channel(depth);
    (
        RequestSender {
            tx,
            depth,
            next_id: Arc::new(AtomicU64::new(0)),
        },
        rx,
    )
}
