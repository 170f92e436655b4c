//! Interaction event logging.
//!
//! Every event, whether reported by the browser or observed by the server,
//! goes through one [`EventLog`]: it is checked against the
//! [`EventTypeRegistry`], stamped with a server timestamp and a global
//! sequence number, and appended to the on-disk journal before the caller
//! gets an acknowledgment.

mod journal;
mod registry;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::session::SessionId;

pub use journal::{replay_journal, segment_file_name, EventLog, Replay, JOURNAL_PREFIX};
pub use registry::{builtin_event_types, EventTypeRegistration, EventTypeRegistry, Origin};

/// Names of the built-in event types.
pub mod types {
    pub const SESSION_START: &str = "session_start";
    pub const SESSION_END: &str = "session_end";
    pub const SETTINGS_CHANGED: &str = "settings_changed";
    pub const MESSAGE_SENT: &str = "message_sent";
    pub const REPLY_RECEIVED: &str = "reply_received";
    pub const REPLY_DISCARDED: &str = "reply_discarded";
    pub const FLAG_UP_CLICK: &str = "flag_up_click";
    pub const FLAG_DOWN_CLICK: &str = "flag_down_click";
    pub const FLAG_CLEARED: &str = "flag_cleared";
    pub const BUBBLE_HOVER_START: &str = "bubble_hover_start";
    pub const BUBBLE_HOVER_END: &str = "bubble_hover_end";
    pub const DISPLAY_START: &str = "display_start";
    pub const DISPLAY_END: &str = "display_end";
}

/// A scalar payload value. Nested structures are not allowed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PayloadValue {
    Bool(bool),
    Number(serde_json::Number),
    Text(String),
}

impl PayloadValue {
    pub fn as_str(&self) -> Option<&str> {
        match self {
            PayloadValue::Text(s) => Some(s),
            _ => None,
        }
    }

    pub fn as_i64(&self) -> Option<i64> {
        match self {
            PayloadValue::Number(n) => n.as_i64(),
            _ => None,
        }
    }

    pub fn as_u64(&self) -> Option<u64> {
        match self {
            PayloadValue::Number(n) => n.as_u64(),
            _ => None,
        }
    }

    pub fn as_f64(&self) -> Option<f64> {
        match self {
            PayloadValue::Number(n) => n.as_f64(),
            _ => None,
        }
    }
}

impl From<&str> for PayloadValue {
    fn from(s: &str) -> Self {
        PayloadValue::Text(s.to_owned())
    }
}

impl From<String> for PayloadValue {
    fn from(s: String) -> Self {
        PayloadValue::Text(s)
    }
}

impl From<bool> for PayloadValue {
    fn from(b: bool) -> Self {
        PayloadValue::Bool(b)
    }
}

impl From<i64> for PayloadValue {
    fn from(n: i64) -> Self {
        PayloadValue::Number(n.into())
    }
}

impl From<u64> for PayloadValue {
    fn from(n: u64) -> Self {
        PayloadValue::Number(n.into())
    }
}

impl From<u32> for PayloadValue {
    fn from(n: u32) -> Self {
        PayloadValue::Number(n.into())
    }
}

impl From<f64> for PayloadValue {
    fn from(n: f64) -> Self {
        match serde_json::Number::from_f64(n) {
            Some(n) => PayloadValue::Number(n),
            None => PayloadValue::Text(n.to_string()),
        }
    }
}

/// Event payload. Keys are kept sorted so the serialized form is canonical.
pub type Payload = BTreeMap<String, PayloadValue>;

/// Builds a [`Payload`] from `key => value` pairs.
#[macro_export]
macro_rules! payload {
    () => { $crate::eventlog::Payload::new() };
    ($($key:expr => $value:expr),+ $(,)?) => {{
        let mut p = $crate::eventlog::Payload::new();
        $( p.insert(String::from($key), $crate::eventlog::PayloadValue::from($value)); )+
        p
    }};
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EventSource {
    Client,
    Server,
}

/// One journaled event.
///
/// Field order is the on-disk field order; do not reorder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub event_id: String,
    pub session_id: SessionId,
    pub type_name: String,
    pub source: EventSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_client_ms: Option<i64>,
    pub t_server_ms: i64,
    pub server_seq: u64,
    pub payload: Payload,
}

impl EventRecord {
    pub fn payload_str(&self, key: &str) -> Option<&str> {
        self.payload.get(key).and_then(PayloadValue::as_str)
    }
}

/// An event as reported by the browser, before the server stamps it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientEvent {
    pub type_name: String,
    pub t_client_ms: i64,
    #[serde(default)]
    pub payload: Payload,
}

#[derive(Debug, Error)]
pub enum EventLogError {
    #[error("event {index}: type `{type_name}` is not registered")]
    UnregisteredEventType { index: usize, type_name: String },
    #[error("event {index}: payload is missing required key `{key}`")]
    MissingPayloadKey { index: usize, key: String },
    #[error("event type `{0}` is already registered")]
    DuplicateEventType(String),
    #[error("event type `{0}` collides with a built-in event type")]
    ReservedName(String),
    #[error("event type name must be non-empty and free of whitespace and control characters")]
    InvalidTypeName,
    #[error("journal {path}: line {line}: {reason}")]
    CorruptJournal {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("journal i/o on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl EventLogError {
    pub fn code(&self) -> &'static str {
        match self {
            EventLogError::UnregisteredEventType { .. } => "UnregisteredEventType",
            EventLogError::MissingPayloadKey { .. } => "MissingPayloadKey",
            EventLogError::DuplicateEventType(_) => "DuplicateEventType",
            EventLogError::ReservedName(_) => "ReservedName",
            EventLogError::InvalidTypeName => "InvalidTypeName",
            EventLogError::CorruptJournal { .. } => "CorruptJournal",
            EventLogError::Io { .. } => "IoError",
        }
    }

    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        EventLogError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}
