//! Dialogue state kept above the provider layer, so any provider can
//! continue any conversation.

use serde::{Deserialize, Serialize};
use thiserror::Error;
use uuid::Uuid;

use crate::config::ExperimentConfig;
use crate::eventlog::{types, EventLog, EventLogError};
use crate::payload;
use crate::providers::{ChatMessage, ChatRole, ProviderReply, ProviderRequest};
use crate::session::SessionId;

pub const MAX_USER_TEXT_CHARS: usize = 8192;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    User,
    Assistant,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Flag {
    #[default]
    None,
    Up,
    Down,
}

impl Flag {
    pub fn event_type(self) -> &'static str {
        match self {
            Flag::Up => types::FLAG_UP_CLICK,
            Flag::Down => types::FLAG_DOWN_CLICK,
            Flag::None => types::FLAG_CLEARED,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Flag::None => "none",
            Flag::Up => "up",
            Flag::Down => "down",
        }
    }

    pub fn parse(s: &str) -> Option<Flag> {
        match s {
            "none" => Some(Flag::None),
            "up" => Some(Flag::Up),
            "down" => Some(Flag::Down),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub id: String,
    pub session_id: SessionId,
    pub role: Role,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provider_id: Option<String>,
    pub flag: Flag,
    pub t_server_ms: i64,
    pub seq: u64,
}

#[derive(Debug, Error)]
pub enum ConversationError {
    #[error("message text is empty")]
    EmptyMessage,
    #[error("message text exceeds {MAX_USER_TEXT_CHARS} characters")]
    MessageTooLong,
    #[error("session has ended")]
    SessionEnded,
    #[error("a reply is still being generated for this session")]
    GenerationPending,
    #[error("the last message is not a user turn")]
    NoPendingUserMessage,
    #[error("no message with id `{0}` in this session")]
    UnknownMessage(String),
    #[error("only assistant messages can be flagged")]
    NotFlaggable,
    #[error(transparent)]
    Journal(#[from] EventLogError),
}

impl ConversationError {
    pub fn code(&self) -> &'static str {
        match self {
            ConversationError::EmptyMessage => "EmptyMessage",
            ConversationError::MessageTooLong => "MessageTooLong",
            ConversationError::SessionEnded => "SessionEnded",
            ConversationError::GenerationPending => "GenerationPending",
            ConversationError::NoPendingUserMessage => "NoPendingUserMessage",
            ConversationError::UnknownMessage(_) => "UnknownMessage",
            ConversationError::NotFlaggable => "NotFlaggable",
            ConversationError::Journal(e) => e.code(),
        }
    }
}

/// Checks user text: non-empty once trailing whitespace is trimmed, and at
/// most [`MAX_USER_TEXT_CHARS`] characters.
pub fn validate_user_text(text: &str) -> Result<(), ConversationError> {
    if text.trim_end().is_empty() {
        return Err(ConversationError::EmptyMessage);
    }
    if text.chars().count() > MAX_USER_TEXT_CHARS {
        return Err(ConversationError::MessageTooLong);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConversationState {
    pub session_id: SessionId,
    pub messages: Vec<Message>,
}

impl ConversationState {
    pub fn new(session_id: SessionId) -> Self {
        Self {
            session_id,
            messages: Vec::new(),
        }
    }

    fn next_seq(&self) -> u64 {
        self.messages.last().map_or(1, |m| m.seq + 1)
    }

    pub fn message(&self, id: &str) -> Option<&Message> {
        self.messages.iter().find(|m| m.id == id)
    }

    pub fn append_user_message(
        &mut self,
        log: &EventLog,
        text: &str,
    ) -> Result<Message, ConversationError> {
        validate_user_text(text)?;
        let id = Uuid::new_v4().simple().to_string();
        let seq = self.next_seq();
        let record = log.emit_server(
            &self.session_id,
            types::MESSAGE_SENT,
            payload! { "message_id" => id.as_str(), "seq" => seq, "text" => text },
        )?;
        let message = Message {
            id,
            session_id: self.session_id.clone(),
            role: Role::User,
            text: text.to_owned(),
            provider_id: None,
            flag: Flag::None,
            t_server_ms: record.t_server_ms,
            seq,
        };
        self.messages.push(message.clone());
        Ok(message)
    }

    /// System prompts in configured order, then every message in `seq`
    /// order. Replies from other providers are passed through unchanged.
    pub fn build_provider_request(
        &self,
        exp: &ExperimentConfig,
    ) -> Result<ProviderRequest, ConversationError> {
        match self.messages.last() {
            Some(m) if m.role == Role::User => {}
            _ => return Err(ConversationError::NoPendingUserMessage),
        }
        let prompts = exp
            .system_prompts
            .iter()
            .map(|p| ChatMessage::new(ChatRole::System, p.clone()));
        let dialogue = self.messages.iter().map(|m| {
            let role = match m.role {
                Role::User => ChatRole::User,
                Role::Assistant => ChatRole::Assistant,
            };
            ChatMessage::new(role, m.text.clone())
        });
        Ok(ProviderRequest {
            messages: prompts.chain(dialogue).collect(),
        })
    }

    pub fn record_assistant_reply(
        &mut self,
        log: &EventLog,
        reply: &ProviderReply,
    ) -> Result<Message, ConversationError> {
        let id = Uuid::new_v4().simple().to_string();
        let seq = self.next_seq();
        let record = log.emit_server(
            &self.session_id,
            types::REPLY_RECEIVED,
            payload! {
                "message_id" => id.as_str(),
                "seq" => seq,
                "text" => reply.text.as_str(),
                "provider_id" => reply.provider_id.as_str(),
                "latency_ms" => reply.latency_ms(),
                "t_request_ms" => reply.t_request_ms,
                "t_response_ms" => reply.t_response_ms,
            },
        )?;
        let message = Message {
            id,
            session_id: self.session_id.clone(),
            role: Role::Assistant,
            text: reply.text.clone(),
            provider_id: Some(reply.provider_id.clone()),
            flag: Flag::None,
            t_server_ms: record.t_server_ms,
            seq,
        };
        self.messages.push(message.clone());
        Ok(message)
    }

    /// Overwrites the flag of an assistant message; `Flag::None` clears it.
    pub fn set_flag(
        &mut self,
        log: &EventLog,
        message_id: &str,
        flag: Flag,
    ) -> Result<Message, ConversationError> {
        let index = self
            .messages
            .iter()
            .position(|m| m.id == message_id)
            .ok_or_else(|| ConversationError::UnknownMessage(message_id.to_owned()))?;
        if self.messages[index].role != Role::Assistant {
            return Err(ConversationError::NotFlaggable);
        }
        log.emit_server(
            &self.session_id,
            flag.event_type(),
            payload! { "message_id" => message_id, "flag" => flag.as_str() },
        )?;
        self.messages[index].flag = flag;
        Ok(self.messages[index].clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::ManualClock;
    use crate::eventlog::EventTypeRegistry;
    use std::sync::Arc;

    fn log() -> (tempfile::TempDir, EventLog) {
        let dir = tempfile::tempdir().unwrap();
        let (log, _) = EventLog::open(
            dir.path(),
            EventTypeRegistry::with_builtins(),
            Arc::new(ManualClock::new(1_000)),
        )
        .unwrap();
        (dir, log)
    }

    fn exp(prompts: &[&str]) -> ExperimentConfig {
        ExperimentConfig {
            code: "EXP-A".into(),
            system_prompts: prompts.iter().map(|p| (*p).to_owned()).collect(),
            allowed_provider_ids: vec!["mock-echo".into()],
            overrides: None,
        }
    }

    fn reply(provider: &str, text: &str, t_request_ms: i64, t_response_ms: i64) -> ProviderReply {
        ProviderReply {
            provider_id: provider.into(),
            text: text.into(),
            t_request_ms,
            t_response_ms,
        }
    }

    #[test]
    fn first_user_message_gets_seq_one() {
        let (_d, log) = log();
        let mut state = ConversationState::new("s".into());
        let m = state.append_user_message(&log, "hello").unwrap();
        assert_eq!((m.role, m.text.as_str(), m.seq), (Role::User, "hello", 1));
        assert_eq!(log.snapshot()[0].type_name, "message_sent");
    }

    #[test]
    fn blank_and_oversize_text_rejected() {
        let (_d, log) = log();
        let mut state = ConversationState::new("s".into());
        assert_eq!(
            state.append_user_message(&log, "   ").unwrap_err().code(),
            "EmptyMessage"
        );
        assert_eq!(
            state.append_user_message(&log, "").unwrap_err().code(),
            "EmptyMessage"
        );
        let long = "a".repeat(MAX_USER_TEXT_CHARS + 1);
        assert_eq!(
            state.append_user_message(&log, &long).unwrap_err().code(),
            "MessageTooLong"
        );
        state
            .append_user_message(&log, &"é".repeat(MAX_USER_TEXT_CHARS))
            .unwrap();
        assert_eq!(log.head_seq(), 1);
    }

    #[test]
    fn request_prepends_prompts() {
        let (_d, log) = log();
        let mut state = ConversationState::new("s".into());
        state.append_user_message(&log, "hi").unwrap();
        let req = state.build_provider_request(&exp(&["Be brief."])).unwrap();
        assert_eq!(
            req.messages,
            vec![
                ChatMessage::new(ChatRole::System, "Be brief."),
                ChatMessage::new(ChatRole::User, "hi"),
            ]
        );
    }

    #[test]
    fn request_needs_trailing_user_turn() {
        let (_d, log) = log();
        let mut state = ConversationState::new("s".into());
        assert_eq!(
            state.build_provider_request(&exp(&[])).unwrap_err().code(),
            "NoPendingUserMessage"
        );
        state.append_user_message(&log, "hi").unwrap();
        state
            .record_assistant_reply(&log, &reply("mock-echo", "ECHO(1): hi", 0, 1))
            .unwrap();
        assert_eq!(
            state.build_provider_request(&exp(&[])).unwrap_err().code(),
            "NoPendingUserMessage"
        );
    }

    #[test]
    fn reply_latency_is_response_minus_request() {
        let (_d, log) = log();
        let mut state = ConversationState::new("s".into());
        state.append_user_message(&log, "hi").unwrap();
        let m = state
            .record_assistant_reply(&log, &reply("mock-echo", "ECHO(1): hi", 1000, 1250))
            .unwrap();
        assert_eq!(m.role, Role::Assistant);
        assert_eq!(m.provider_id.as_deref(), Some("mock-echo"));
        assert_eq!(m.flag, Flag::None);
        assert_eq!(m.seq, 2);
        let ev = log.snapshot().pop().unwrap();
        assert_eq!(ev.type_name, "reply_received");
        assert_eq!(ev.payload["latency_ms"].as_i64(), Some(250));
        assert_eq!(ev.payload_str("provider_id"), Some("mock-echo"));
    }

    #[test]
    fn flags_overwrite_and_clear() {
        let (_d, log) = log();
        let mut state = ConversationState::new("s".into());
        let u = state.append_user_message(&log, "hi").unwrap();
        let a = state
            .record_assistant_reply(&log, &reply("mock-echo", "x", 0, 0))
            .unwrap();
        assert_eq!(
            state.set_flag(&log, &a.id, Flag::Up).unwrap().flag,
            Flag::Up
        );
        assert_eq!(
            state.set_flag(&log, &a.id, Flag::Down).unwrap().flag,
            Flag::Down
        );
        assert_eq!(
            state.set_flag(&log, &a.id, Flag::None).unwrap().flag,
            Flag::None
        );
        assert_eq!(
            state.set_flag(&log, &u.id, Flag::Up).unwrap_err().code(),
            "NotFlaggable"
        );
        assert_eq!(
            state.set_flag(&log, "nope", Flag::Up).unwrap_err().code(),
            "UnknownMessage"
        );
        let kinds: Vec<_> = log
            .snapshot()
            .into_iter()
            .map(|r| r.type_name)
            .skip(2)
            .collect();
        assert_eq!(kinds, ["flag_up_click", "flag_down_click", "flag_cleared"]);
    }

    #[test]
    fn request_length_and_purity() {
        let (_d, log) = log();
        let mut state = ConversationState::new("s".into());
        let e = exp(&["a", "b"]);
        for i in 0..4 {
            state.append_user_message(&log, &format!("u{i}")).unwrap();
            let r1 = state.build_provider_request(&e).unwrap();
            let r2 = state.build_provider_request(&e).unwrap();
            assert_eq!(r1, r2);
            assert_eq!(r1.messages.len(), 2 + state.messages.len());
            if i % 2 == 0 {
                state
                    .record_assistant_reply(&log, &reply("mock-echo", "r", 0, 0))
                    .unwrap();
            }
        }
        let seqs: Vec<u64> = state.messages.iter().map(|m| m.seq).collect();
        assert_eq!(seqs, (1..=seqs.len() as u64).collect::<Vec<_>>());
    }
}
