//! Management wire protocol, version 1.
//!
//! One JSON object per line, UTF-8:
//!
//! ```text
//! {"v":1,"type":"<type>","id":"<correlation id>","payload":{...}}
//! ```
//!
//! Requests: `deploy_shadow`, `promote`, `rollback`, `abort`, `status`,
//! `subscribe_metrics`. Every request is answered by exactly one `ack` or
//! `error` carrying the request's `id`. `metrics_push` is sent by the server
//! with `id` set to the subscription id.

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use otshadow_core::adaptation::DeploySpec;
use otshadow_core::plant::AssetId;
use otshadow_core::ring::Cycle;

pub const PROTOCOL_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MessageType {
    DeployShadow,
    Promote,
    Rollback,
    Abort,
    Status,
    SubscribeMetrics,
    MetricsPush,
    Ack,
    Error,
}

impl MessageType {
    pub fn is_request(self) -> bool {
        !matches!(self, MessageType::MetricsPush | MessageType::Ack | MessageType::Error)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManagementMessage {
    pub v: u32,
    #[serde(rename = "type")]
    pub kind: MessageType,
    pub id: String,
    #[serde(default = "empty_object")]
    pub payload: Value,
}

fn empty_object() -> Value {
    Value::Object(Default::default())
}

impl ManagementMessage {
    pub fn new(kind: MessageType, id: impl Into<String>, payload: Value) -> Self {
        ManagementMessage {
            v: PROTOCOL_VERSION,
            kind,
            id: id.into(),
            payload,
        }
    }

    pub fn ack(id: impl Into<String>, payload: Value) -> Self {
        Self::new(MessageType::Ack, id, payload)
    }

    pub fn error(id: impl Into<String>, reason: ErrorReason, message: impl Into<String>) -> Self {
        let payload = serde_json::to_value(ErrorPayload {
            reason,
            message: message.into(),
        })
        .expect("error payload serializes");
        Self::new(MessageType::Error, id, payload)
    }

    /// Typed view of the payload.
    pub fn payload_as<T: for<'de> Deserialize<'de>>(&self) -> Result<T, ProtocolError> {
        serde_json::from_value(self.payload.clone()).map_err(|e| ProtocolError::Payload(e.to_string()))
    }

    pub fn error_payload(&self) -> Option<ErrorPayload> {
        (self.kind == MessageType::Error)
            .then(|| self.payload_as().ok())
            .flatten()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorReason {
    Parse,
    Version,
    InvalidPayload,
    NotARequest,
    Rejected,
    Unavailable,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorPayload {
    pub reason: ErrorReason,
    pub message: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeployPayload {
    #[serde(default)]
    pub asset: AssetId,
    /// Service to deploy; the device's configured shadow when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub service: Option<DeploySpec>,
}

/// Phases of a coordinated switch; a plain promote has no phase.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SwitchPhase {
    Prepare,
    Commit,
    Release,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SwitchPayload {
    #[serde(default)]
    pub asset: AssetId,
    /// Required except for `release`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cycle: Option<Cycle>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phase: Option<SwitchPhase>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AbortPayload {
    #[serde(default)]
    pub asset: AssetId,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StatusPayload {
    /// Extra sections: `"twin_csv"` adds the level-2 twin as CSV text,
    /// `"history"` the transition log as line-delimited JSON.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub include: Vec<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubscribePayload {
    /// Push interval; the server's configured rate when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub interval_ms: Option<u64>,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProtocolError {
    #[error("parse: {0}")]
    Parse(String),
    #[error("unsupported protocol version {0}")]
    Version(u32),
    #[error("invalid payload: {0}")]
    Payload(String),
}

impl ProtocolError {
    pub fn reason(&self) -> ErrorReason {
        match self {
            ProtocolError::Parse(_) => ErrorReason::Parse,
            ProtocolError::Version(_) => ErrorReason::Version,
            ProtocolError::Payload(_) => ErrorReason::InvalidPayload,
        }
    }
}
