//! Participant sessions and their effective settings.

use std::collections::HashMap;
use std::fmt;
use std::ops::RangeInclusive;
use std::sync::{Arc, Mutex, MutexGuard, PoisonError, RwLock};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use uuid::Uuid;

use crate::config::{resolve_effective_settings, ConfigError, ServerConfig, MAX_CODE_LEN};
use crate::conversation::ConversationState;
use crate::eventlog::{types, EventLog, EventLogError, EventRecord, Payload};
use crate::payload;
use crate::providers::ProviderRegistry;

pub const FONT_SIZE_RANGE_PX: RangeInclusive<u32> = 8..=72;
pub const LINE_SPACING_RANGE: RangeInclusive<f64> = 1.0..=3.0;

pub fn font_size_in_range(px: u32) -> bool {
    FONT_SIZE_RANGE_PX.contains(&px)
}

pub fn line_spacing_in_range(ratio: f64) -> bool {
    ratio.is_finite() && LINE_SPACING_RANGE.contains(&ratio)
}

/// URL-safe opaque session identifier.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SessionId(String);

impl SessionId {
    pub fn generate() -> Self {
        SessionId(Uuid::new_v4().simple().to_string())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl From<String> for SessionId {
    fn from(s: String) -> Self {
        SessionId(s)
    }
}

impl From<&str> for SessionId {
    fn from(s: &str) -> Self {
        SessionId(s.to_owned())
    }
}

impl fmt::Display for SessionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectiveSettings {
    pub provider_id: String,
    pub font_size_px: u32,
    pub line_spacing: f64,
}

/// A partial settings update. Absent fields are left unchanged.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SettingsPatch {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provider_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub font_size_px: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub line_spacing: Option<f64>,
}

impl EffectiveSettings {
    /// Overlays `patch` without any validation.
    pub fn overlay(&self, patch: &SettingsPatch) -> EffectiveSettings {
        EffectiveSettings {
            provider_id: patch
                .provider_id
                .clone()
                .unwrap_or_else(|| self.provider_id.clone()),
            font_size_px: patch.font_size_px.unwrap_or(self.font_size_px),
            line_spacing: patch.line_spacing.unwrap_or(self.line_spacing),
        }
    }

    pub(crate) fn to_payload(&self) -> Payload {
        payload! {
            "provider_id" => self.provider_id.as_str(),
            "font_size_px" => self.font_size_px,
            "line_spacing" => self.line_spacing,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SessionStatus {
    Active,
    Ended,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub id: SessionId,
    pub username: String,
    pub experiment_code: String,
    pub created_wall_ms: i64,
    pub created_seq: u64,
    pub settings: EffectiveSettings,
    pub status: SessionStatus,
}

impl Session {
    pub fn is_active(&self) -> bool {
        self.status == SessionStatus::Active
    }
}

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("`{0}` must not be empty")]
    EmptyField(&'static str),
    #[error("`{field}` {reason}")]
    InvalidField { field: &'static str, reason: String },
    #[error("no experiment with code `{0}` is loaded")]
    UnknownExperiment(String),
    #[error("no session with id `{0}`")]
    UnknownSession(String),
    #[error("provider `{0}` is not registered")]
    UnknownProvider(String),
    #[error("provider `{0}` is not allowed in this experiment")]
    ProviderNotAllowed(String),
    #[error("`{field}` = {value} is outside [{min}, {max}]")]
    OutOfRange {
        field: &'static str,
        value: String,
        min: String,
        max: String,
    },
    #[error("session has ended")]
    SessionEnded,
    #[error("session was already ended")]
    AlreadyEnded,
    #[error(transparent)]
    Journal(#[from] EventLogError),
}

impl SessionError {
    pub fn code(&self) -> &'static str {
        match self {
            SessionError::EmptyField(_) => "EmptyField",
            SessionError::InvalidField { .. } => "InvalidField",
            SessionError::UnknownExperiment(_) => "UnknownExperiment",
            SessionError::UnknownSession(_) => "UnknownSession",
            SessionError::UnknownProvider(_) => "UnknownProvider",
            SessionError::ProviderNotAllowed(_) => "ProviderNotAllowed",
            SessionError::OutOfRange { .. } => "OutOfRange",
            SessionError::SessionEnded => "SessionEnded",
            SessionError::AlreadyEnded => "AlreadyEnded",
            SessionError::Journal(e) => e.code(),
        }
    }
}

impl From<ConfigError> for SessionError {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::ProviderNotAllowed { provider_id, .. } => {
                SessionError::ProviderNotAllowed(provider_id)
            }
            other => SessionError::InvalidField {
                field: "experiment_code",
                reason: other.to_string(),
            },
        }
    }
}

fn check_label(field: &'static str, value: &str) -> Result<(), SessionError> {
    if value.trim().is_empty() {
        return Err(SessionError::EmptyField(field));
    }
    if value.chars().count() > MAX_CODE_LEN {
        return Err(SessionError::InvalidField {
            field,
            reason: format!("must be at most {MAX_CODE_LEN} characters"),
        });
    }
    if value.chars().any(char::is_control) {
        return Err(SessionError::InvalidField {
            field,
            reason: "must not contain control characters".into(),
        });
    }
    Ok(())
}

/// Checks a patch against the registry, the experiment's allow-list and the
/// numeric bounds. Nothing is applied here.
pub fn validate_patch(
    patch: &SettingsPatch,
    registry: &ProviderRegistry,
    allowed: impl Fn(&str) -> bool,
) -> Result<(), SessionError> {
    if let Some(id) = &patch.provider_id {
        if !registry.contains(id) {
            return Err(SessionError::UnknownProvider(id.clone()));
        }
        if !allowed(id) {
            return Err(SessionError::ProviderNotAllowed(id.clone()));
        }
    }
    if let Some(px) = patch.font_size_px {
        if !font_size_in_range(px) {
            return Err(SessionError::OutOfRange {
                field: "font_size_px",
                value: px.to_string(),
                min: FONT_SIZE_RANGE_PX.start().to_string(),
                max: FONT_SIZE_RANGE_PX.end().to_string(),
            });
        }
    }
    if let Some(ratio) = patch.line_spacing {
        if !line_spacing_in_range(ratio) {
            return Err(SessionError::OutOfRange {
                field: "line_spacing",
                value: ratio.to_string(),
                min: LINE_SPACING_RANGE.start().to_string(),
                max: LINE_SPACING_RANGE.end().to_string(),
            });
        }
    }
    Ok(())
}

/// Live state of one session. All mutations happen under its mutex, so the
/// order of journaled events for a session is the order of its operations.
#[derive(Debug, Clone)]
pub struct SessionEntry {
    pub session: Session,
    pub conversation: ConversationState,
    pub pending_generation: bool,
}

/// Everything a session operation needs from the rest of the server.
pub struct SessionContext<'a> {
    pub config: &'a ServerConfig,
    pub registry: &'a ProviderRegistry,
    pub log: &'a EventLog,
    pub now_ms: i64,
}

#[derive(Default)]
pub struct SessionStore {
    sessions: RwLock<HashMap<SessionId, Arc<Mutex<SessionEntry>>>>,
}

pub(crate) fn lock_entry(entry: &Mutex<SessionEntry>) -> MutexGuard<'_, SessionEntry> {
    entry.lock().unwrap_or_else(PoisonError::into_inner)
}

impl SessionStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Rebuilds the store from sessions and conversations recovered from the
    /// journal. No generation is pending after a restart.
    pub fn restore(entries: impl IntoIterator<Item = SessionEntry>) -> Self {
        let map = entries
            .into_iter()
            .map(|e| (e.session.id.clone(), Arc::new(Mutex::new(e))))
            .collect();
        Self {
            sessions: RwLock::new(map),
        }
    }

    pub fn len(&self) -> usize {
        self.sessions
            .read()
            .unwrap_or_else(PoisonError::into_inner)
            .len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn entry(&self, id: &SessionId) -> Result<Arc<Mutex<SessionEntry>>, SessionError> {
        self.sessions
            .read()
            .unwrap_or_else(PoisonError::into_inner)
            .get(id)
            .cloned()
            .ok_or_else(|| SessionError::UnknownSession(id.to_string()))
    }

    pub fn get(&self, id: &SessionId) -> Result<Session, SessionError> {
        let entry = self.entry(id)?;
        let session = lock_entry(&entry).session.clone();
        Ok(session)
    }

    pub fn create_session(
        &self,
        ctx: &SessionContext<'_>,
        username: &str,
        experiment_code: &str,
        client_clock_ms: Option<i64>,
    ) -> Result<Session, SessionError> {
        check_label("username", username)?;
        check_label("experiment_code", experiment_code)?;
        let exp = ctx
            .config
            .experiment(experiment_code)
            .ok_or_else(|| SessionError::UnknownExperiment(experiment_code.to_owned()))?;
        let settings = resolve_effective_settings(exp, &ctx.config.defaults)?;

        let id = SessionId::generate();
        let mut payload = settings.to_payload();
        payload.insert("username".into(), username.into());
        payload.insert("experiment_code".into(), experiment_code.into());
        if let Some(client_ms) = client_clock_ms {
            payload.insert("client_clock_ms".into(), client_ms.into());
            payload.insert("clock_offset_ms".into(), (ctx.now_ms - client_ms).into());
        }
        let record = ctx.log.emit_server(&id, types::SESSION_START, payload)?;

        let session = Session {
            id: id.clone(),
            username: username.to_owned(),
            experiment_code: experiment_code.to_owned(),
            created_wall_ms: record.t_server_ms,
            created_seq: record.server_seq,
            settings,
            status: SessionStatus::Active,
        };
        let entry = SessionEntry {
            session: session.clone(),
            conversation: ConversationState::new(id.clone()),
            pending_generation: false,
        };
        self.sessions
            .write()
            .unwrap_or_else(PoisonError::into_inner)
            .insert(id, Arc::new(Mutex::new(entry)));
        Ok(session)
    }

    pub fn update_settings(
        &self,
        ctx: &SessionContext<'_>,
        id: &SessionId,
        patch: &SettingsPatch,
    ) -> Result<EffectiveSettings, SessionError> {
        let entry = self.entry(id)?;
        let mut entry = lock_entry(&entry);
        if !entry.session.is_active() {
            return Err(SessionError::SessionEnded);
        }
        let exp = ctx
            .config
            .experiment(&entry.session.experiment_code)
            .ok_or_else(|| {
                SessionError::UnknownExperiment(entry.session.experiment_code.clone())
            })?;
        validate_patch(patch, ctx.registry, |p| exp.allows(p))?;

        let old = entry.session.settings.clone();
        let new = old.overlay(patch);
        ctx.log.emit_server(
            id,
            types::SETTINGS_CHANGED,
            settings_changed_payload(&old, &new),
        )?;
        entry.session.settings = new.clone();
        Ok(new)
    }

    pub fn end_session(
        &self,
        ctx: &SessionContext<'_>,
        id: &SessionId,
    ) -> Result<Session, SessionError> {
        let entry = self.entry(id)?;
        let mut entry = lock_entry(&entry);
        if !entry.session.is_active() {
            return Err(SessionError::AlreadyEnded);
        }
        ctx.log.emit_server(id, types::SESSION_END, payload! {})?;
        entry.session.status = SessionStatus::Ended;
        Ok(entry.session.clone())
    }

    /// Journals a batch of client events. Ended sessions still accept late
    /// flushes.
    pub fn ingest_client_events(
        &self,
        log: &EventLog,
        id: &SessionId,
        batch: Vec<crate::eventlog::ClientEvent>,
    ) -> Result<Vec<EventRecord>, SessionError> {
        let entry = self.entry(id)?;
        let _guard = lock_entry(&entry);
        Ok(log.ingest_client(id, batch)?)
    }

    pub fn snapshot(&self) -> Vec<SessionEntry> {
        let map = self.sessions.read().unwrap_or_else(PoisonError::into_inner);
        let mut entries: Vec<SessionEntry> = map.values().map(|e| lock_entry(e).clone()).collect();
        entries.sort_by_key(|e| e.session.created_seq);
        entries
    }
}

fn settings_changed_payload(old: &EffectiveSettings, new: &EffectiveSettings) -> Payload {
    payload! {
        "old_provider_id" => old.provider_id.as_str(),
        "new_provider_id" => new.provider_id.as_str(),
        "old_font_size_px" => old.font_size_px,
        "new_font_size_px" => new.font_size_px,
        "old_line_spacing" => old.line_spacing,
        "new_line_spacing" => new.line_spacing,
    }
}
