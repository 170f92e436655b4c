//! Experiment-instrumentation chatbot server.
//!
//! Participants log in with a username and an experiment code, chat with
//! any of the registered response providers (switching between them at
//! will), and every interaction is written to a crash-safe journal that
//! researchers export and cross-reference afterwards.

pub mod api;
pub mod clock;
pub mod config;
pub mod conversation;
pub mod eventlog;
pub mod export;
pub mod platform;
pub mod providers;
pub mod session;

pub use clock::{Clock, ManualClock, SystemClock};
pub use config::{DefaultsConfig, ExperimentConfig, ServerConfig};
pub use conversation::{ConversationState, Flag, Message, Role};
pub use eventlog::{ClientEvent, EventLog, EventRecord, EventSource, Payload, PayloadValue};
pub use export::{ExportBundle, ExportFilter};
pub use platform::{Exchange, Platform, ServiceError, StartupError};
pub use providers::{
    Provider, ProviderDescriptor, ProviderError, ProviderRegistry, ProviderReply, ProviderRequest,
};
pub use session::{EffectiveSettings, Session, SessionId, SessionStatus, SettingsPatch};
