//! Response generators behind one uniform boundary.
//!
//! The conversation never talks to a model directly; it hands a
//! [`ProviderRequest`] to the [`ProviderRegistry`] together with the id of
//! the provider the session currently has selected.

mod mock;
mod remote;

use std::sync::Arc;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::Clock;
use crate::config::DefaultsConfig;

pub use mock::{EchoProvider, ReverseProvider, ECHO_ID, REVERSE_ID};
pub use remote::{RemoteProvider, DEFAULT_REPLY_PATH};

/// Ids of the providers compiled into the server, in registration order.
pub const BUILTIN_PROVIDER_IDS: [&str; 2] = [ECHO_ID, REVERSE_ID];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProviderKind {
    Builtin,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProviderDescriptor {
    pub id: String,
    pub display_name: String,
    pub kind: ProviderKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChatRole {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: ChatRole,
    pub text: String,
}

impl ChatMessage {
    pub fn new(role: ChatRole, text: impl Into<String>) -> Self {
        Self {
            role,
            text: text.into(),
        }
    }
}

/// Provider-agnostic request: system prompts followed by the full dialogue.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProviderRequest {
    pub messages: Vec<ChatMessage>,
}

impl ProviderRequest {
    /// Text of the final user turn, if the request is well formed.
    pub fn last_user_text(&self) -> Option<&str> {
        match self.messages.last() {
            Some(m) if m.role == ChatRole::User => Some(&m.text),
            _ => None,
        }
    }

    pub fn assistant_count(&self) -> usize {
        self.messages
            .iter()
            .filter(|m| m.role == ChatRole::Assistant)
            .count()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProviderReply {
    pub provider_id: String,
    pub text: String,
    pub t_request_ms: i64,
    pub t_response_ms: i64,
}

impl ProviderReply {
    pub fn latency_ms(&self) -> i64 {
        self.t_response_ms - self.t_request_ms
    }
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum ProviderError {
    #[error("provider `{0}` is not registered")]
    UnknownProvider(String),
    #[error("provider `{0}` is already registered")]
    DuplicateProviderId(String),
    #[error("request must end with a user message")]
    InvalidRequest,
    #[error("provider `{provider_id}` did not answer within {timeout_ms} ms")]
    UpstreamTimeout {
        provider_id: String,
        timeout_ms: u64,
    },
    #[error("provider `{provider_id}` failed: {message}")]
    UpstreamError {
        provider_id: String,
        message: String,
    },
}

impl ProviderError {
    pub fn code(&self) -> &'static str {
        match self {
            ProviderError::UnknownProvider(_) => "UnknownProvider",
            ProviderError::DuplicateProviderId(_) => "DuplicateProviderId",
            ProviderError::InvalidRequest => "NoPendingUserMessage",
            ProviderError::UpstreamTimeout { .. } => "UpstreamTimeout",
            ProviderError::UpstreamError { .. } => "UpstreamError",
        }
    }
}

/// Generation behavior of one provider. Implementations return only the
/// reply text; timing is recorded by the registry.
#[async_trait]
pub trait Provider: Send + Sync {
    async fn generate(&self, request: &ProviderRequest) -> Result<String, ProviderError>;
}

struct Entry {
    descriptor: ProviderDescriptor,
    adapter: Arc<dyn Provider>,
}

/// Registered providers in registration order. Filled at startup and
/// read-only afterwards.
pub struct ProviderRegistry {
    entries: Vec<Entry>,
    clock: Arc<dyn Clock>,
}

impl ProviderRegistry {
    pub fn new(clock: Arc<dyn Clock>) -> Self {
        Self {
            entries: Vec::new(),
            clock,
        }
    }

    pub fn with_builtins(clock: Arc<dyn Clock>) -> Self {
        let mut registry = Self::new(clock);
        registry
            .register_provider(
                ProviderDescriptor {
                    id: ECHO_ID.into(),
                    display_name: "Echo (mock)".into(),
                    kind: ProviderKind::Builtin,
                },
                Arc::new(EchoProvider),
            )
            .expect("fresh registry");
        registry
            .register_provider(
                ProviderDescriptor {
                    id: REVERSE_ID.into(),
                    display_name: "Reverse (mock)".into(),
                    kind: ProviderKind::Builtin,
                },
                Arc::new(ReverseProvider),
            )
            .expect("fresh registry");
        registry
    }

    /// Built-in mocks followed by every remote endpoint in the defaults file.
    pub fn from_defaults(
        defaults: &DefaultsConfig,
        clock: Arc<dyn Clock>,
    ) -> Result<Self, ProviderError> {
        let mut registry = Self::with_builtins(clock);
        for remote in &defaults.providers {
            registry.register_provider(
                ProviderDescriptor {
                    id: remote.id.clone(),
                    display_name: remote
                        .display_name
                        .clone()
                        .unwrap_or_else(|| remote.model_name.clone()),
                    kind: ProviderKind::Remote,
                },
                Arc::new(RemoteProvider::new(remote.clone())),
            )?;
        }
        Ok(registry)
    }

    pub fn register_provider(
        &mut self,
        descriptor: ProviderDescriptor,
        adapter: Arc<dyn Provider>,
    ) -> Result<(), ProviderError> {
        if self.contains(&descriptor.id) {
            return Err(ProviderError::DuplicateProviderId(descriptor.id));
        }
        self.entries.push(Entry {
            descriptor,
            adapter,
        });
        Ok(())
    }

    pub fn list_providers(&self) -> Vec<ProviderDescriptor> {
        self.entries.iter().map(|e| e.descriptor.clone()).collect()
    }

    pub fn contains(&self, id: &str) -> bool {
        self.entries.iter().any(|e| e.descriptor.id == id)
    }

    pub fn ids(&self) -> Vec<String> {
        self.entries
            .iter()
            .map(|e| e.descriptor.id.clone())
            .collect()
    }

    /// Runs one generation and timestamps it. No retries.
    pub async fn generate(
        &self,
        provider_id: &str,
        request: &ProviderRequest,
    ) -> Result<ProviderReply, ProviderError> {
        let entry = self
            .entries
            .iter()
            .find(|e| e.descriptor.id == provider_id)
            .ok_or_else(|| ProviderError::UnknownProvider(provider_id.to_owned()))?;
        if request.last_user_text().is_none() {
            return Err(ProviderError::InvalidRequest);
        }
        let t_request_ms = self.clock.now_ms();
        let text = entry.adapter.generate(request).await?;
        let t_response_ms = self.clock.now_ms().max(t_request_ms);
        Ok(ProviderReply {
            provider_id: provider_id.to_owned(),
            text,
            t_request_ms,
            t_response_ms,
        })
    }
}
