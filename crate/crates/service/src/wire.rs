//! Frames exchanged with supervisor clients over the event stream.
//!
//! Every frame is one JSON text message:
//! `{"type": ..., "seq": n, "session_id": "...", "version": 1, "payload": ...}`.

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use bimtwin_core::workflow::{SupervisorCommand, WorkflowEvent, WorkflowState};

pub const WIRE_VERSION: u32 = 1;

/// One workflow event with its position in the session log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventPayload {
    /// Zero-based index among the session's events.
    pub index: u64,
    /// Simulated time (s).
    pub time: f64,
    pub event: WorkflowEvent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HelloPayload {
    pub supported_versions: Vec<u32>,
    pub state: Option<WorkflowState>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AckPayload {
    /// Sequence number of the acknowledged client frame.
    pub ack_seq: u64,
    pub state: WorkflowState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorPayload {
    /// Sequence number of the offending client frame, when it could be read.
    pub in_reply_to: Option<u64>,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq)]
pub enum WireBody {
    Hello(HelloPayload),
    Event(EventPayload),
    Command(SupervisorCommand),
    Ack(AckPayload),
    Error(ErrorPayload),
}

impl WireBody {
    pub fn type_tag(&self) -> &'static str {
        match self {
            WireBody::Hello(_) => "hello",
            WireBody::Event(_) => "event",
            WireBody::Command(_) => "command",
            WireBody::Ack(_) => "ack",
            WireBody::Error(_) => "error",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WireMessage {
    pub seq: u64,
    pub session_id: String,
    pub version: u32,
    pub body: WireBody,
}

#[derive(Debug, Error)]
pub enum WireError {
    #[error("frame is not valid JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unknown frame type '{0}'")]
    UnknownType(String),
    #[error("invalid '{kind}' payload: {source}")]
    Payload { kind: String, source: serde_json::Error },
    #[error("unsupported protocol version {0}")]
    Version(u32),
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawFrame {
    #[serde(rename = "type")]
    kind: String,
    seq: u64,
    session_id: String,
    version: u32,
    payload: Value,
}

impl WireMessage {
    pub fn new(seq: u64, session_id: impl Into<String>, body: WireBody) -> Self {
        Self { seq, session_id: session_id.into(), version: WIRE_VERSION, body }
    }

    pub fn to_json(&self) -> String {
        let payload = match &self.body {
            WireBody::Hello(p) => serde_json::to_value(p),
            WireBody::Event(p) => serde_json::to_value(p),
            WireBody::Command(p) => serde_json::to_value(p),
            WireBody::Ack(p) => serde_json::to_value(p),
            WireBody::Error(p) => serde_json::to_value(p),
        }
        .expect("wire payloads always serialize");
        let raw = RawFrame {
            kind: self.body.type_tag().to_string(),
            seq: self.seq,
            session_id: self.session_id.clone(),
            version: self.version,
            payload,
        };
        serde_json::to_string(&raw).expect("wire frames always serialize")
    }

    /// Parses a frame, recovering the sequence number of malformed frames
    /// where possible so errors can refer to them.
    pub fn parse(text: &str) -> Result<Self, (Option<u64>, WireError)> {
        let raw: RawFrame = serde_json::from_str(text).map_err(|e| {
            let seq = serde_json::from_str::<Value>(text).ok().and_then(|v| v.get("seq")?.as_u64());
            (seq, WireError::from(e))
        })?;
        let seq = Some(raw.seq);
        if raw.version != WIRE_VERSION {
            return Err((seq, WireError::Version(raw.version)));
        }
        fn payload<T: serde::de::DeserializeOwned>(kind: &str, v: Value) -> Result<T, WireError> {
            serde_json::from_value(v).map_err(|source| WireError::Payload { kind: kind.to_string(), source })
        }
        let body = match raw.kind.as_str() {
            "hello" => payload(&raw.kind, raw.payload).map(WireBody::Hello),
            "event" => payload(&raw.kind, raw.payload).map(WireBody::Event),
            "command" => payload(&raw.kind, raw.payload).map(WireBody::Command),
            "ack" => payload(&raw.kind, raw.payload).map(WireBody::Ack),
            "error" => payload(&raw.kind, raw.payload).map(WireBody::Error),
            other => Err(WireError::UnknownType(other.to_string())),
        }
        .map_err(|e| (seq, e))?;
        Ok(Self { seq: raw.seq, session_id: raw.session_id, version: raw.version, body })
    }
}
