use serde::{Deserialize, Serialize};

use super::{types, ClientEvent, EventLogError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Builtin,
    Custom,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventTypeRegistration {
    pub type_name: String,
    pub required_payload_keys: Vec<String>,
    pub origin: Origin,
    /// False for types only the server emits as a side effect of a state
    /// change; clients cannot submit those.
    pub client_submittable: bool,
}

impl EventTypeRegistration {
    fn builtin(name: &str, keys: &[&str], client_submittable: bool) -> Self {
        Self {
            type_name: name.to_owned(),
            required_payload_keys: keys.iter().map(|k| (*k).to_owned()).collect(),
            origin: Origin::Builtin,
            client_submittable,
        }
    }
}

/// The default event set. Hover and display events are analyzed per answer
/// bubble, so they must name the message.
pub fn builtin_event_types() -> Vec<EventTypeRegistration> {
    use types::*;
    vec![
        EventTypeRegistration::builtin(SESSION_START, &[], false),
        EventTypeRegistration::builtin(SESSION_END, &[], false),
        EventTypeRegistration::builtin(SETTINGS_CHANGED, &[], false),
        EventTypeRegistration::builtin(MESSAGE_SENT, &[], false),
        EventTypeRegistration::builtin(REPLY_RECEIVED, &[], false),
        EventTypeRegistration::builtin(REPLY_DISCARDED, &[], false),
        EventTypeRegistration::builtin(FLAG_UP_CLICK, &[], false),
        EventTypeRegistration::builtin(FLAG_DOWN_CLICK, &[], false),
        EventTypeRegistration::builtin(FLAG_CLEARED, &[], false),
        EventTypeRegistration::builtin(BUBBLE_HOVER_START, &["message_id"], true),
        EventTypeRegistration::builtin(BUBBLE_HOVER_END, &["message_id"], true),
        EventTypeRegistration::builtin(DISPLAY_START, &["message_id"], true),
        EventTypeRegistration::builtin(DISPLAY_END, &["message_id"], true),
    ]
}

/// Known event types, built-ins first, then custom types in registration
/// order. Mutable only until it is handed to an `EventLog`.
#[derive(Debug, Clone)]
pub struct EventTypeRegistry {
    types: Vec<EventTypeRegistration>,
}

impl Default for EventTypeRegistry {
    fn default() -> Self {
        Self::with_builtins()
    }
}

impl EventTypeRegistry {
    pub fn with_builtins() -> Self {
        Self {
            types: builtin_event_types(),
        }
    }

    pub fn register_event_type(
        &mut self,
        type_name: &str,
        required_payload_keys: &[String],
    ) -> Result<(), EventLogError> {
        if type_name.is_empty()
            || type_name
                .chars()
                .any(|c| c.is_whitespace() || c.is_control())
        {
            return Err(EventLogError::InvalidTypeName);
        }
        if let Some(existing) = self.get(type_name) {
            return Err(match existing.origin {
                Origin::Builtin => EventLogError::ReservedName(type_name.to_owned()),
                Origin::Custom => EventLogError::DuplicateEventType(type_name.to_owned()),
            });
        }
        self.types.push(EventTypeRegistration {
            type_name: type_name.to_owned(),
            required_payload_keys: required_payload_keys.to_vec(),
            origin: Origin::Custom,
            client_submittable: true,
        });
        Ok(())
    }

    pub fn get(&self, type_name: &str) -> Option<&EventTypeRegistration> {
        self.types.iter().find(|t| t.type_name == type_name)
    }

    pub fn contains(&self, type_name: &str) -> bool {
        self.get(type_name).is_some()
    }

    pub fn list(&self) -> &[EventTypeRegistration] {
        &self.types
    }

    /// Checks a whole batch; the first offending event fails it. Server-only
    /// types count as unregistered for clients.
    pub fn validate_batch(&self, batch: &[ClientEvent]) -> Result<(), EventLogError> {
        for (index, event) in batch.iter().enumerate() {
            let reg = self
                .get(&event.type_name)
                .filter(|r| r.client_submittable)
                .ok_or_else(|| EventLogError::UnregisteredEventType {
                    index,
                    type_name: event.type_name.clone(),
                })?;
            if let Some(key) = reg
                .required_payload_keys
                .iter()
                .find(|k| !event.payload.contains_key(k.as_str()))
            {
                return Err(EventLogError::MissingPayloadKey {
                    index,
                    key: key.clone(),
                });
            }
        }
        Ok(())
    }
}
