//! Maps protocol requests onto device commands.

use serde_json::{json, Map, Value};

use otshadow_core::adaptation::AdaptationError;
use otshadow_core::device::{
    CommandResult, Device, DeviceCommand, DeviceGone, DeviceHandle, DeviceReply, ExportSection, ManagementSnapshot,
};

use crate::protocol::{
    AbortPayload, DeployPayload, ErrorReason, ManagementMessage, MessageType, StatusPayload, SwitchPayload, SwitchPhase,
};

/// Something that executes device commands: a device in this thread or a
/// device running on its own.
pub trait DeviceBackend: Send {
    fn execute(&mut self, cmd: DeviceCommand) -> Result<CommandResult, DeviceGone>;
}

impl DeviceBackend for Device {
    fn execute(&mut self, cmd: DeviceCommand) -> Result<CommandResult, DeviceGone> {
        Ok(Device::execute(self, cmd))
    }
}

impl DeviceBackend for DeviceHandle {
    fn execute(&mut self, cmd: DeviceCommand) -> Result<CommandResult, DeviceGone> {
        self.call(cmd)
    }
}

/// Answers one request with exactly one `ack` or `error`.
///
/// `subscribe_metrics` needs a streaming transport and is refused here;
/// servers intercept it before dispatching.
pub fn handle(backend: &mut dyn DeviceBackend, msg: &ManagementMessage) -> ManagementMessage {
    match respond(backend, msg) {
        Ok(payload) => ManagementMessage::ack(msg.id.clone(), payload),
        Err((reason, text)) => ManagementMessage::error(msg.id.clone(), reason, text),
    }
}

type Failure = (ErrorReason, String);

fn invalid(e: impl std::fmt::Display) -> Failure {
    (ErrorReason::InvalidPayload, e.to_string())
}

fn run(backend: &mut dyn DeviceBackend, cmd: DeviceCommand) -> Result<DeviceReply, Failure> {
    match backend.execute(cmd) {
        Ok(Ok(reply)) => Ok(reply),
        Ok(Err(e)) => Err(rejected(&e)),
        Err(gone) => Err((ErrorReason::Unavailable, gone.to_string())),
    }
}

fn rejected(e: &AdaptationError) -> Failure {
    (ErrorReason::Rejected, e.to_string())
}

fn reply_value(reply: &DeviceReply) -> Value {
    serde_json::to_value(reply).expect("device replies serialize")
}

fn require_cycle(p: &SwitchPayload) -> Result<u64, Failure> {
    p.cycle.ok_or_else(|| invalid("missing field `cycle`"))
}

fn respond(backend: &mut dyn DeviceBackend, msg: &ManagementMessage) -> Result<Value, Failure> {
    let cmd = match msg.kind {
        MessageType::DeployShadow => {
            let p: DeployPayload = msg.payload_as().map_err(invalid)?;
            DeviceCommand::DeployShadow {
                asset: p.asset,
                spec: p.service,
            }
        }
        MessageType::Promote => {
            let p: SwitchPayload = msg.payload_as().map_err(invalid)?;
            match p.phase {
                None => DeviceCommand::Promote {
                    asset: p.asset,
                    cycle: require_cycle(&p)?,
                },
                Some(SwitchPhase::Prepare) => DeviceCommand::Prepare {
                    asset: p.asset,
                    cycle: require_cycle(&p)?,
                },
                Some(SwitchPhase::Commit) => DeviceCommand::Commit {
                    asset: p.asset,
                    cycle: require_cycle(&p)?,
                },
                Some(SwitchPhase::Release) => DeviceCommand::Release { asset: p.asset },
            }
        }
        MessageType::Rollback => {
            let p: SwitchPayload = msg.payload_as().map_err(invalid)?;
            if p.phase.is_some() {
                return Err(invalid("rollback has no phases"));
            }
            DeviceCommand::Rollback {
                asset: p.asset,
                cycle: require_cycle(&p)?,
            }
        }
        MessageType::Abort => {
            let p: AbortPayload = msg.payload_as().map_err(invalid)?;
            DeviceCommand::Abort { asset: p.asset }
        }
        MessageType::Status => return status(backend, msg),
        MessageType::SubscribeMetrics => {
            return Err((
                ErrorReason::Unavailable,
                "metrics subscriptions need a streaming transport".into(),
            ))
        }
        MessageType::MetricsPush | MessageType::Ack | MessageType::Error => {
            return Err((ErrorReason::NotARequest, format!("{:?} is not a request", msg.kind)))
        }
    };
    run(backend, cmd).map(|r| reply_value(&r))
}

fn status(backend: &mut dyn DeviceBackend, msg: &ManagementMessage) -> Result<Value, Failure> {
    let p: StatusPayload = msg.payload_as().map_err(invalid)?;
    let sections = p
        .include
        .iter()
        .map(|name| {
            serde_json::from_value::<ExportSection>(Value::String(name.clone()))
                .map(|s| (name.clone(), s))
                .map_err(|_| invalid(format!("unknown status section `{name}`")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut value = reply_value(&run(backend, DeviceCommand::Status)?);
    if !sections.is_empty() {
        let mut exports = Map::new();
        for (name, section) in sections {
            if let DeviceReply::Export { content, .. } = run(backend, DeviceCommand::Export(section))? {
                exports.insert(name, Value::String(content));
            }
        }
        value["exports"] = Value::Object(exports);
    }
    Ok(value)
}

/// Payload of a `metrics_push`: the latest cycle's timing plus the
/// per-asset adaptation view and shadow divergence.
pub fn metrics_payload(s: &ManagementSnapshot) -> Value {
    let assets: Vec<Value> = s
        .assets
        .iter()
        .map(|a| {
            json!({
                "asset": a.asset,
                "state": a.state,
                "service_b": a.service_b,
                "violations_in_window": a.violations_in_window,
                "switch_cycle": a.switch_cycle,
            })
        })
        .collect();
    json!({
        "device": s.device,
        "cycle": s.cycle,
        "metrics": s.latest_metrics,
        "cycles_run": s.cycles_run,
        "overruns": s.overruns,
        "integrity_faults": s.integrity_faults,
        "assets": assets,
        "divergence": s.divergence,
        "twin": s.twin,
    })
}

/// Fetches a snapshot and wraps it as a `metrics_push`.
pub fn metrics_push(backend: &mut dyn DeviceBackend, subscription: &str) -> Result<ManagementMessage, DeviceGone> {
    match backend.execute(DeviceCommand::Status)? {
        Ok(DeviceReply::Snapshot(s)) => Ok(ManagementMessage::new(
            MessageType::MetricsPush,
            subscription,
            metrics_payload(&s),
        )),
        _ => Err(DeviceGone),
    }
}
