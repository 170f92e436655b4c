use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::{info, warn};

use crate::clock::{Clock, SystemClock};
use crate::config::{ConfigReport, ServerConfig};
use crate::conversation::{validate_user_text, ConversationError, Flag, Message};
use crate::eventlog::{types, ClientEvent, EventLog, EventLogError, EventTypeRegistry};
use crate::export::{build_bundle, reconstruct, ExportBundle, ExportFilter};
use crate::payload;
use crate::providers::{ProviderDescriptor, ProviderError, ProviderRegistry, ProviderReply};
use crate::session::{
    lock_entry, EffectiveSettings, Session, SessionContext, SessionEntry, SessionError, SessionId,
    SessionStore, SettingsPatch,
};

/// Any error a request can end with.
#[derive(Debug, Error)]
pub enum ServiceError {
    #[error(transparent)]
    Session(#[from] SessionError),
    #[error(transparent)]
    Conversation(#[from] ConversationError),
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error(transparent)]
    EventLog(#[from] EventLogError),
    #[error("internal error: {0}")]
    Internal(String),
}

impl ServiceError {
    pub fn code(&self) -> &'static str {
        match self {
            ServiceError::Session(e) => e.code(),
            ServiceError::Conversation(e) => e.code(),
            ServiceError::Provider(e) => e.code(),
            ServiceError::EventLog(e) => e.code(),
            ServiceError::Internal(_) => "Internal",
        }
    }
}

#[derive(Debug, Error)]
pub enum StartupError {
    #[error("{0}")]
    Config(#[from] ConfigReport),
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error(transparent)]
    EventLog(#[from] EventLogError),
}

/// A completed round trip: the participant's message and the reply.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exchange {
    pub user_message: Message,
    pub assistant_message: Message,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StartupReport {
    pub replayed_records: usize,
    pub torn_records: usize,
    pub restored_sessions: usize,
}

/// The running experiment server, independent of transport.
pub struct Platform {
    config: ServerConfig,
    registry: ProviderRegistry,
    log: EventLog,
    sessions: SessionStore,
    clock: Arc<dyn Clock>,
    startup: StartupReport,
}

impl Platform {
    /// Opens the journal in `config.defaults.data_dir`, replays it and
    /// restores every session it describes.
    pub fn open(
        config: ServerConfig,
        registry: ProviderRegistry,
        clock: Arc<dyn Clock>,
    ) -> Result<Self, StartupError> {
        let mut event_types = EventTypeRegistry::with_builtins();
        for custom in &config.defaults.custom_events {
            event_types.register_event_type(&custom.type_name, &custom.required_payload_keys)?;
        }
        Self::open_with_event_types(config, registry, event_types, clock)
    }

    pub fn open_with_event_types(
        config: ServerConfig,
        registry: ProviderRegistry,
        event_types: EventTypeRegistry,
        clock: Arc<dyn Clock>,
    ) -> Result<Self, StartupError> {
        let (log, replay) = EventLog::open(&config.defaults.data_dir, event_types, clock.clone())?;
        let restored: Vec<SessionEntry> = reconstruct(&replay.records)
            .into_iter()
            .map(|(session, conversation)| SessionEntry {
                session,
                conversation,
                pending_generation: false,
            })
            .collect();
        let startup = StartupReport {
            replayed_records: replay.records.len(),
            torn_records: replay.torn_records,
            restored_sessions: restored.len(),
        };
        if startup.torn_records > 0 {
            warn!(torn = startup.torn_records, "journal had a torn tail");
        }
        info!(
            records = startup.replayed_records,
            sessions = startup.restored_sessions,
            "journal replayed"
        );
        Ok(Self {
            config,
            registry,
            log,
            sessions: SessionStore::restore(restored),
            clock,
            startup,
        })
    }

    /// Built-in mocks plus configured remotes, wall clock.
    pub fn from_config(config: ServerConfig) -> Result<Self, StartupError> {
        let clock: Arc<dyn Clock> = Arc::new(SystemClock);
        let registry = ProviderRegistry::from_defaults(&config.defaults, clock.clone())?;
        Self::open(config, registry, clock)
    }

    pub fn config(&self) -> &ServerConfig {
        &self.config
    }

    pub fn registry(&self) -> &ProviderRegistry {
        &self.registry
    }

    pub fn event_log(&self) -> &EventLog {
        &self.log
    }

    pub fn startup_report(&self) -> StartupReport {
        self.startup
    }

    fn ctx(&self) -> SessionContext<'_> {
        SessionContext {
            config: &self.config,
            registry: &self.registry,
            log: &self.log,
            now_ms: self.clock.now_ms(),
        }
    }

    /// Providers the experiment allows, in registry order.
    pub fn providers_for(&self, experiment_code: &str) -> Vec<ProviderDescriptor> {
        match self.config.experiment(experiment_code) {
            Some(exp) => self
                .registry
                .list_providers()
                .into_iter()
                .filter(|p| exp.allows(&p.id))
                .collect(),
            None => Vec::new(),
        }
    }

    pub fn create_session(
        &self,
        username: &str,
        experiment_code: &str,
        client_clock_ms: Option<i64>,
    ) -> Result<Session, ServiceError> {
        Ok(self
            .sessions
            .create_session(&self.ctx(), username, experiment_code, client_clock_ms)?)
    }

    pub fn update_settings(
        &self,
        id: &SessionId,
        patch: &SettingsPatch,
    ) -> Result<EffectiveSettings, ServiceError> {
        Ok(self.sessions.update_settings(&self.ctx(), id, patch)?)
    }

    pub fn end_session(&self, id: &SessionId) -> Result<Session, ServiceError> {
        Ok(self.sessions.end_session(&self.ctx(), id)?)
    }

    pub fn session(&self, id: &SessionId) -> Result<SessionEntry, ServiceError> {
        let entry = self.sessions.entry(id)?;
        let e = lock_entry(&entry).clone();
        Ok(e)
    }

    pub fn sessions(&self) -> Vec<SessionEntry> {
        self.sessions.snapshot()
    }

    /// Appends the user's message, asks the session's current provider for
    /// a reply and records it.
    ///
    /// The provider is fixed when the request is dispatched; a settings
    /// change while it runs applies to the next message. The generation runs
    /// on its own task, so it completes and clears the pending state even if
    /// the caller goes away.
    pub async fn send_message(
        self: &Arc<Self>,
        id: &SessionId,
        text: &str,
    ) -> Result<Exchange, ServiceError> {
        let entry = self.sessions.entry(id)?;
        let (user_message, request, provider_id) = {
            let mut e = lock_entry(&entry);
            if !e.session.is_active() {
                return Err(ConversationError::SessionEnded.into());
            }
            if e.pending_generation {
                return Err(ConversationError::GenerationPending.into());
            }
            validate_user_text(text)?;
            let exp = self
                .config
                .experiment(&e.session.experiment_code)
                .ok_or_else(|| {
                    SessionError::UnknownExperiment(e.session.experiment_code.clone())
                })?;
            let user = e.conversation.append_user_message(&self.log, text)?;
            let request = e.conversation.build_provider_request(exp)?;
            e.pending_generation = true;
            (user, request, e.session.settings.provider_id.clone())
        };

        let platform = Arc::clone(self);
        let task = tokio::spawn(async move {
            let result = platform.registry.generate(&provider_id, &request).await;
            tokio::task::spawn_blocking(move || {
                platform.finish_generation(&entry, &provider_id, result)
            })
            .await
            .map_err(|e| ServiceError::Internal(e.to_string()))?
        });
        let assistant_message = task
            .await
            .map_err(|e| ServiceError::Internal(e.to_string()))??;
        Ok(Exchange {
            user_message,
            assistant_message,
        })
    }

    fn finish_generation(
        &self,
        entry: &Mutex<SessionEntry>,
        provider_id: &str,
        result: Result<ProviderReply, ProviderError>,
    ) -> Result<Message, ServiceError> {
        let mut e = lock_entry(entry);
        e.pending_generation = false;
        let session_id = e.session.id.clone();
        match result {
            Ok(reply) if e.session.is_active() => {
                Ok(e.conversation.record_assistant_reply(&self.log, &reply)?)
            }
            Ok(reply) => {
                self.log.emit_server(
                    &session_id,
                    types::REPLY_DISCARDED,
                    payload! {
                        "provider_id" => provider_id,
                        "reason" => "SessionEnded",
                        "text" => reply.text.as_str(),
                        "latency_ms" => reply.latency_ms(),
                    },
                )?;
                Err(ConversationError::SessionEnded.into())
            }
            Err(err) => {
                self.log.emit_server(
                    &session_id,
                    types::REPLY_DISCARDED,
                    payload! {
                        "provider_id" => provider_id,
                        "reason" => err.code(),
                        "message" => err.to_string(),
                    },
                )?;
                Err(err.into())
            }
        }
    }

    pub fn set_flag(
        &self,
        id: &SessionId,
        message_id: &str,
        flag: Flag,
    ) -> Result<Message, ServiceError> {
        let entry = self.sessions.entry(id)?;
        let mut e = lock_entry(&entry);
        Ok(e.conversation.set_flag(&self.log, message_id, flag)?)
    }

    /// Returns the server sequence numbers assigned to the batch.
    pub fn ingest_client_events(
        &self,
        id: &SessionId,
        batch: Vec<ClientEvent>,
    ) -> Result<Vec<u64>, ServiceError> {
        Ok(self
            .sessions
            .ingest_client_events(&self.log, id, batch)?
            .into_iter()
            .map(|r| r.server_seq)
            .collect())
    }

    pub fn export(&self, filter: &ExportFilter) -> ExportBundle {
        build_bundle(&self.log.snapshot(), filter)
    }

    pub fn journal_seq(&self) -> u64 {
        self.log.head_seq()
    }
}
