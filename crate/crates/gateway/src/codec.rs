//! Line codec for [`ManagementMessage`].

use serde_json::Value;

use crate::protocol::{ManagementMessage, ProtocolError, PROTOCOL_VERSION};

/// Serializes a message as one line, newline included.
pub fn encode(msg: &ManagementMessage) -> String {
    let mut line = serde_json::to_string(msg).expect("message serializes");
    line.push('\n');
    line
}

/// Parses one line. On failure also returns the correlation id if the line
/// was a JSON object carrying one, so the error can still be correlated.
pub fn decode(line: &str) -> Result<ManagementMessage, (Option<String>, ProtocolError)> {
    let line = line.trim_end_matches(['\r', '\n']);
    let value: Value = serde_json::from_str(line).map_err(|e| (None, ProtocolError::Parse(e.to_string())))?;
    let id = value.get("id").and_then(Value::as_str).map(str::to_string);
    if let Some(v) = value.get("v").and_then(Value::as_u64) {
        if v != u64::from(PROTOCOL_VERSION) {
            return Err((id, ProtocolError::Version(v as u32)));
        }
    }
    serde_json::from_value(value).map_err(|e| (id, ProtocolError::Parse(e.to_string())))
}
