use async_trait::async_trait;

use super::{Provider, ProviderError, ProviderRequest};

pub const ECHO_ID: &str = "mock-echo";
pub const REVERSE_ID: &str = "mock-reverse";

/// Replies `ECHO(k): <last user text>`, where `k` is one more than the
/// number of assistant turns already in the request.
#[derive(Debug, Default, Clone, Copy)]
pub struct EchoProvider;

impl EchoProvider {
    pub fn reply_for(request: &ProviderRequest) -> Option<String> {
        let text = request.last_user_text()?;
        Some(format!("ECHO({}): {text}", request.assistant_count() + 1))
    }
}

#[async_trait]
impl Provider for EchoProvider {
    async fn generate(&self, request: &ProviderRequest) -> Result<String, ProviderError> {
        Self::reply_for(request).ok_or(ProviderError::InvalidRequest)
    }
}

/// Replies with the last user text reversed by code point.
#[derive(Debug, Default, Clone, Copy)]
pub struct ReverseProvider;

impl ReverseProvider {
    pub fn reverse(text: &str) -> String {
        text.chars().rev().collect()
    }
}

#[async_trait]
impl Provider for ReverseProvider {
    async fn generate(&self, request: &ProviderRequest) -> Result<String, ProviderError> {
        request
            .last_user_text()
            .map(Self::reverse)
            .ok_or(ProviderError::InvalidRequest)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::providers::{ChatMessage, ChatRole};
    use proptest::prelude::*;

    fn req(messages: Vec<ChatMessage>) -> ProviderRequest {
        ProviderRequest { messages }
    }

    #[tokio::test]
    async fn echo_counts_prior_assistant_turns() {
        let first = req(vec![ChatMessage::new(ChatRole::User, "hello")]);
        assert_eq!(
            EchoProvider.generate(&first).await.unwrap(),
            "ECHO(1): hello"
        );

        let later = req(vec![
            ChatMessage::new(ChatRole::System, "Be brief."),
            ChatMessage::new(ChatRole::User, "a"),
            ChatMessage::new(ChatRole::Assistant, "ECHO(1): a"),
            ChatMessage::new(ChatRole::User, "b"),
            ChatMessage::new(ChatRole::Assistant, "b"),
            ChatMessage::new(ChatRole::User, "c"),
        ]);
        assert_eq!(EchoProvider.generate(&later).await.unwrap(), "ECHO(3): c");
    }

    #[tokio::test]
    async fn reverse_is_by_code_point() {
        let r = req(vec![ChatMessage::new(ChatRole::User, "abc")]);
        assert_eq!(ReverseProvider.generate(&r).await.unwrap(), "cba");
        assert_eq!(ReverseProvider::reverse("héllo→😀"), "😀→olléh");
    }

    proptest! {
        #[test]
        fn reverse_is_an_involution(s in "\\PC*") {
            prop_assert_eq!(ReverseProvider::reverse(&ReverseProvider::reverse(&s)), s);
        }

        #[test]
        fn mocks_are_deterministic(texts in proptest::collection::vec("\\PC{1,20}", 1..6)) {
            let mut messages = Vec::new();
            for (i, t) in texts.iter().enumerate() {
                if i > 0 {
                    messages.push(ChatMessage::new(ChatRole::Assistant, "x"));
                }
                messages.push(ChatMessage::new(ChatRole::User, t.clone()));
            }
            let r = req(messages);
            prop_assert_eq!(EchoProvider::reply_for(&r), EchoProvider::reply_for(&r.clone()));
            prop_assert_eq!(
                EchoProvider::reply_for(&r).unwrap(),
                format!("ECHO({}): {}", texts.len(), texts.last().unwrap())
            );
        }
    }
}
