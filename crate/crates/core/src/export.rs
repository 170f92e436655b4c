//! Researcher-facing export bundles.
//!
//! Sessions and messages are rebuilt from the journal's server events, so a
//! live server and an offline replay of the same data directory produce the
//! same bundle.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::warn;

use crate::conversation::{ConversationState, Flag, Message, Role};
use crate::eventlog::{types, EventRecord, EventSource};
use crate::session::{EffectiveSettings, Session, SessionId, SessionStatus};

pub const SESSIONS_FILE: &str = "sessions.jsonl";
pub const MESSAGES_FILE: &str = "messages.jsonl";
pub const EVENTS_FILE: &str = "events.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Conjunctive filter; an absent field matches everything.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExportFilter {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub experiment_code: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub username: Option<String>,
}

impl ExportFilter {
    pub fn matches(&self, session: &Session) -> bool {
        self.experiment_code
            .as_ref()
            .is_none_or(|c| *c == session.experiment_code)
            && self
                .username
                .as_ref()
                .is_none_or(|u| *u == session.username)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportBundle {
    pub generated_at_ms: i64,
    pub filter: ExportFilter,
    pub sessions: Vec<Session>,
    pub messages: Vec<Message>,
    pub events: Vec<EventRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub generated_at_ms: i64,
    pub filter: ExportFilter,
    pub session_count: usize,
    pub message_count: usize,
    pub event_count: usize,
}

#[derive(Debug, Error)]
pub enum ExportError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}:{line}: {message}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
}

impl ExportError {
    pub fn code(&self) -> &'static str {
        match self {
            ExportError::Io { .. } => "IoError",
            ExportError::Parse { .. } => "ParseError",
        }
    }
}

fn settings_from(record: &EventRecord, prefix: &str) -> Option<EffectiveSettings> {
    let p = &record.payload;
    Some(EffectiveSettings {
        provider_id: p.get(&format!("{prefix}provider_id"))?.as_str()?.to_owned(),
        font_size_px: u32::try_from(p.get(&format!("{prefix}font_size_px"))?.as_u64()?).ok()?,
        line_spacing: p.get(&format!("{prefix}line_spacing"))?.as_f64()?,
    })
}

fn message_from(record: &EventRecord, role: Role) -> Option<Message> {
    Some(Message {
        id: record.payload_str("message_id")?.to_owned(),
        session_id: record.session_id.clone(),
        role,
        text: record.payload_str("text")?.to_owned(),
        provider_id: match role {
            Role::User => None,
            Role::Assistant => Some(record.payload_str("provider_id")?.to_owned()),
        },
        flag: Flag::None,
        t_server_ms: record.t_server_ms,
        seq: record.payload.get("seq")?.as_u64()?,
    })
}

/// Rebuilds every session and its conversation from server events, in
/// session creation order. Client events never change this state.
pub fn reconstruct(records: &[EventRecord]) -> Vec<(Session, ConversationState)> {
    let mut order: Vec<SessionId> = Vec::new();
    let mut state: HashMap<SessionId, (Session, ConversationState)> = HashMap::new();

    for record in records.iter().filter(|r| r.source == EventSource::Server) {
        let applied = match record.type_name.as_str() {
            types::SESSION_START => (|| {
                let session = Session {
                    id: record.session_id.clone(),
                    username: record.payload_str("username")?.to_owned(),
                    experiment_code: record.payload_str("experiment_code")?.to_owned(),
                    created_wall_ms: record.t_server_ms,
                    created_seq: record.server_seq,
                    settings: settings_from(record, "")?,
                    status: SessionStatus::Active,
                };
                order.push(session.id.clone());
                let conversation = ConversationState::new(session.id.clone());
                state.insert(session.id.clone(), (session, conversation));
                Some(())
            })(),
            types::SETTINGS_CHANGED => (|| {
                let (session, _) = state.get_mut(&record.session_id)?;
                session.settings = settings_from(record, "new_")?;
                Some(())
            })(),
            types::SESSION_END => state.get_mut(&record.session_id).map(|(session, _)| {
                session.status = SessionStatus::Ended;
            }),
            types::MESSAGE_SENT | types::REPLY_RECEIVED => (|| {
                let role = if record.type_name == types::MESSAGE_SENT {
                    Role::User
                } else {
                    Role::Assistant
                };
                let message = message_from(record, role)?;
                let (_, conversation) = state.get_mut(&record.session_id)?;
                conversation.messages.push(message);
                Some(())
            })(),
            types::FLAG_UP_CLICK | types::FLAG_DOWN_CLICK | types::FLAG_CLEARED => (|| {
                let flag = Flag::parse(record.payload_str("flag")?)?;
                let id = record.payload_str("message_id")?;
                let (_, conversation) = state.get_mut(&record.session_id)?;
                let message = conversation.messages.iter_mut().find(|m| m.id == id)?;
                message.flag = flag;
                Some(())
            })(),
            _ => Some(()),
        };
        if applied.is_none() {
            warn!(
                server_seq = record.server_seq,
                type_name = %record.type_name,
                "server event could not be applied during reconstruction"
            );
        }
    }

    order
        .into_iter()
        .filter_map(|id| state.remove(&id))
        .collect()
}

/// Builds a bundle from journal records. `generated_at_ms` is the server
/// timestamp of the journal head, so equal journals give equal bundles.
pub fn build_bundle(records: &[EventRecord], filter: &ExportFilter) -> ExportBundle {
    let mut sessions = Vec::new();
    let mut messages = Vec::new();
    for (session, conversation) in reconstruct(records) {
        if filter.matches(&session) {
            sessions.push(session);
            messages.extend(conversation.messages);
        }
    }
    let included: BTreeSet<&SessionId> = sessions.iter().map(|s| &s.id).collect();
    let mut events: Vec<EventRecord> = records
        .iter()
        .filter(|r| included.contains(&r.session_id))
        .cloned()
        .collect();
    events.sort_by_key(|r| r.server_seq);

    ExportBundle {
        generated_at_ms: records.last().map_or(0, |r| r.t_server_ms),
        filter: filter.clone(),
        sessions,
        messages,
        events,
    }
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), ExportError> {
    let io = |source| ExportError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut buf = Vec::new();
    for item in items {
        serde_json::to_writer(&mut buf, item).expect("bundle items always serialize");
        buf.push(b'\n');
    }
    let mut file = fs::File::create(path).map_err(io)?;
    file.write_all(&buf).map_err(io)?;
    file.sync_all().map_err(io)
}

/// Writes the three entity files and the manifest into `out_dir`.
pub fn write_bundle(bundle: &ExportBundle, out_dir: &Path) -> Result<Vec<PathBuf>, ExportError> {
    fs::create_dir_all(out_dir).map_err(|source| ExportError::Io {
        path: out_dir.to_path_buf(),
        source,
    })?;
    let sessions = out_dir.join(SESSIONS_FILE);
    let messages = out_dir.join(MESSAGES_FILE);
    let events = out_dir.join(EVENTS_FILE);
    let manifest_path = out_dir.join(MANIFEST_FILE);
    write_jsonl(&sessions, &bundle.sessions)?;
    write_jsonl(&messages, &bundle.messages)?;
    write_jsonl(&events, &bundle.events)?;

    let manifest = Manifest {
        generated_at_ms: bundle.generated_at_ms,
        filter: bundle.filter.clone(),
        session_count: bundle.sessions.len(),
        message_count: bundle.messages.len(),
        event_count: bundle.events.len(),
    };
    let mut text = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    text.push(b'\n');
    fs::write(&manifest_path, text).map_err(|source| ExportError::Io {
        path: manifest_path.clone(),
        source,
    })?;
    Ok(vec![sessions, messages, events, manifest_path])
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, ExportError> {
    let text = fs::read_to_string(path).map_err(|source| ExportError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    text.lines()
        .enumerate()
        .map(|(i, line)| {
            serde_json::from_str(line).map_err(|e| ExportError::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

/// Reads a bundle written by [`write_bundle`].
pub fn read_bundle(dir: &Path) -> Result<ExportBundle, ExportError> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path).map_err(|source| ExportError::Io {
        path: manifest_path.clone(),
        source,
    })?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| ExportError::Parse {
        path: manifest_path.clone(),
        line: e.line(),
        message: e.to_string(),
    })?;
    Ok(ExportBundle {
        generated_at_ms: manifest.generated_at_ms,
        filter: manifest.filter,
        sessions: read_jsonl(&dir.join(SESSIONS_FILE))?,
        messages: read_jsonl(&dir.join(MESSAGES_FILE))?,
        events: read_jsonl(&dir.join(EVENTS_FILE))?,
    })
}
