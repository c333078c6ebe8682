//! Agreement on a common switch cycle across devices.
//!
//! Prepare/commit over the management protocol: every participant must
//! acknowledge `promote` with phase `prepare` for the proposed cycle before
//! anyone is sent `commit`. A single nack or timeout releases everyone that
//! prepared. If a commit fails after others have committed, those are
//! compensated with `abort`, which cancels their armed switch before it
//! takes effect.

use std::time::Duration;

use serde::Serialize;
use serde_json::{json, Value};
use thiserror::Error;

use otshadow_core::plant::AssetId;
use otshadow_core::ring::Cycle;

use crate::client::{Client, ClientError};
use crate::codec;
use crate::dispatch::{self, DeviceBackend};
use crate::protocol::{ManagementMessage, MessageType, ProtocolError, SwitchPhase};

/// Minimum distance between the participants' current cycle and the
/// agreed switch cycle.
pub const MIN_LEAD_CYCLES: Cycle = 10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ParticipantError {
    #[error("timed out")]
    Timeout,
    #[error("transport: {0}")]
    Transport(String),
    #[error("protocol: {0}")]
    Protocol(#[from] ProtocolError),
}

impl From<ClientError> for ParticipantError {
    fn from(e: ClientError) -> Self {
        match e {
            ClientError::Timeout => ParticipantError::Timeout,
            ClientError::Protocol(p) => ParticipantError::Protocol(p),
            other => ParticipantError::Transport(other.to_string()),
        }
    }
}

/// One device taking part in a coordinated switch.
pub trait Participant {
    fn name(&self) -> &str;
    fn request(&mut self, msg: &ManagementMessage, timeout: Duration) -> Result<ManagementMessage, ParticipantError>;
}

/// A device in this process. Requests and replies still go through the
/// line codec, so it exercises the same path as a remote device.
pub struct LocalParticipant<B> {
    name: String,
    backend: B,
}

impl<B: DeviceBackend> LocalParticipant<B> {
    pub fn new(name: impl Into<String>, backend: B) -> Self {
        LocalParticipant {
            name: name.into(),
            backend,
        }
    }

    pub fn backend(&self) -> &B {
        &self.backend
    }

    pub fn backend_mut(&mut self) -> &mut B {
        &mut self.backend
    }

    pub fn into_backend(self) -> B {
        self.backend
    }
}

impl<B: DeviceBackend> Participant for LocalParticipant<B> {
    fn name(&self) -> &str {
        &self.name
    }

    fn request(&mut self, msg: &ManagementMessage, _timeout: Duration) -> Result<ManagementMessage, ParticipantError> {
        let decoded = codec::decode(&codec::encode(msg)).map_err(|(_, e)| e)?;
        let reply = dispatch::handle(&mut self.backend, &decoded);
        codec::decode(&codec::encode(&reply)).map_err(|(_, e)| e.into())
    }
}

/// A device behind a gateway's TCP listener.
pub struct RemoteParticipant {
    name: String,
    client: Client,
}

impl RemoteParticipant {
    pub fn new(name: impl Into<String>, client: Client) -> Self {
        RemoteParticipant {
            name: name.into(),
            client,
        }
    }
}

impl Participant for RemoteParticipant {
    fn name(&self) -> &str {
        &self.name
    }

    fn request(&mut self, msg: &ManagementMessage, timeout: Duration) -> Result<ManagementMessage, ParticipantError> {
        self.client.set_timeout(timeout)?;
        Ok(self.client.send(msg)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "vote", content = "detail", rename_all = "snake_case")]
pub enum Vote {
    Ack,
    Nack(String),
    Timeout,
    Failed(String),
}

impl Vote {
    fn from_reply(r: Result<ManagementMessage, ParticipantError>) -> Vote {
        match r {
            Ok(m) if m.kind == MessageType::Ack => Vote::Ack,
            Ok(m) => Vote::Nack(m.error_payload().map_or_else(|| format!("{:?}", m.kind), |e| e.message)),
            Err(ParticipantError::Timeout) => Vote::Timeout,
            Err(e) => Vote::Failed(e.to_string()),
        }
    }

    pub fn is_ack(&self) -> bool {
        matches!(self, Vote::Ack)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct SwitchOutcome {
    /// Proposed cycle; `None` if no proposal could be made.
    pub cycle: Option<Cycle>,
    pub committed: bool,
    pub prepare_votes: Vec<(String, Vote)>,
    pub commit_votes: Vec<(String, Vote)>,
    pub released: Vec<String>,
    pub compensated: Vec<String>,
    pub reason: Option<String>,
}

pub struct SwitchCoordinator {
    timeout: Duration,
    next_id: u64,
}

impl SwitchCoordinator {
    pub fn new(timeout: Duration) -> Self {
        SwitchCoordinator { timeout, next_id: 1 }
    }

    fn message(&mut self, kind: MessageType, payload: Value) -> ManagementMessage {
        let id = format!("coord-{}", self.next_id);
        self.next_id += 1;
        ManagementMessage::new(kind, id, payload)
    }

    fn switch_msg(&mut self, asset: AssetId, cycle: Option<Cycle>, phase: SwitchPhase) -> ManagementMessage {
        let mut payload = json!({"asset": asset, "phase": phase});
        if let Some(k) = cycle {
            payload["cycle"] = json!(k);
        }
        self.message(MessageType::Promote, payload)
    }

    /// Largest current cycle across participants.
    pub fn current_cycle(&mut self, participants: &mut [&mut dyn Participant]) -> Result<Cycle, (String, String)> {
        let mut current = 0;
        for p in participants.iter_mut() {
            let msg = self.message(MessageType::Status, json!({}));
            let reply = p
                .request(&msg, self.timeout)
                .map_err(|e| (p.name().to_string(), e.to_string()))?;
            if reply.kind != MessageType::Ack {
                return Err((p.name().to_string(), "status refused".into()));
            }
            current = current.max(reply.payload.get("cycle").and_then(Value::as_u64).unwrap_or(0));
        }
        Ok(current)
    }

    /// Switches `asset` on every participant at one common cycle, or on
    /// none. `proposed` defaults to the earliest cycle the lead allows.
    pub fn coordinate(
        &mut self,
        participants: &mut [&mut dyn Participant],
        asset: AssetId,
        proposed: Option<Cycle>,
    ) -> SwitchOutcome {
        let mut out = SwitchOutcome::default();
        let current = match self.current_cycle(participants) {
            Ok(c) => c,
            Err((who, why)) => {
                out.reason = Some(format!("{who}: {why}"));
                return out;
            }
        };
        let earliest = current + MIN_LEAD_CYCLES;
        let k = proposed.unwrap_or(earliest);
        out.cycle = Some(k);
        if k < earliest {
            out.reason = Some(format!(
                "switch cycle {k} is closer than {MIN_LEAD_CYCLES} cycles to {current}"
            ));
            return out;
        }

        for p in participants.iter_mut() {
            let msg = self.switch_msg(asset, Some(k), SwitchPhase::Prepare);
            let vote = Vote::from_reply(p.request(&msg, self.timeout));
            out.prepare_votes.push((p.name().to_string(), vote));
        }
        if let Some((who, vote)) = out.prepare_votes.iter().find(|(_, v)| !v.is_ack()) {
            out.reason = Some(format!("{who} did not prepare: {vote:?}"));
            // Release everyone, including participants that timed out and
            // may have prepared anyway.
            for p in participants.iter_mut() {
                let msg = self.switch_msg(asset, None, SwitchPhase::Release);
                if Vote::from_reply(p.request(&msg, self.timeout)).is_ack() {
                    out.released.push(p.name().to_string());
                }
            }
            return out;
        }

        for p in participants.iter_mut() {
            let msg = self.switch_msg(asset, Some(k), SwitchPhase::Commit);
            let vote = Vote::from_reply(p.request(&msg, self.timeout));
            out.commit_votes.push((p.name().to_string(), vote));
        }
        if let Some((who, vote)) = out.commit_votes.iter().find(|(_, v)| !v.is_ack()) {
            out.reason = Some(format!("{who} did not commit: {vote:?}"));
            let committed: Vec<bool> = out.commit_votes.iter().map(|(_, v)| v.is_ack()).collect();
            for (p, done) in participants.iter_mut().zip(committed) {
                let msg = if done {
                    self.message(MessageType::Abort, json!({"asset": asset}))
                } else {
                    self.switch_msg(asset, None, SwitchPhase::Release)
                };
                if Vote::from_reply(p.request(&msg, self.timeout)).is_ack() {
                    if done {
                        out.compensated.push(p.name().to_string());
                    } else {
                        out.released.push(p.name().to_string());
                    }
                }
            }
            return out;
        }
        out.committed = true;
        out
    }
}
