use std::collections::{HashMap, VecDeque};
use std::sync::Mutex;

use super::{digest_text, ChatBackend, ChatMessage, ChatRequest, ChatResponse, LlmError};

/// Serves completions recorded in a transcript back to identical prompts,
/// in recorded order per prompt.
pub struct ReplayBackend {
    id: String,
    role: String,
    recorded: Mutex<HashMap<String, VecDeque<String>>>,
}

impl ReplayBackend {
    pub fn new(
        role: impl Into<String>,
        exchanges: impl IntoIterator<Item = (Vec<ChatMessage>, String)>,
    ) -> Self {
        let mut recorded: HashMap<String, VecDeque<String>> = HashMap::new();
        for (messages, completion) in exchanges {
            let prompt = messages
                .iter()
                .map(|m| m.content.as_str())
                .collect::<Vec<_>>()
                .join("\n\n");
            recorded.entry(prompt).or_default().push_back(completion);
        }
        let role = role.into();
        Self {
            id: format!("replay:{role}"),
            role,
            recorded: Mutex::new(recorded),
        }
    }
}

impl ChatBackend for ReplayBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError> {
        let prompt = request.rendered();
        let mut recorded = self.recorded.lock().unwrap_or_else(|p| p.into_inner());
        let text = recorded
            .get_mut(&prompt)
            .and_then(VecDeque::pop_front)
            .ok_or_else(|| LlmError::ReplayExhausted {
                role: self.role.clone(),
                digest: digest_text(&prompt),
            })?;
        Ok(ChatResponse {
            text,
            backend_id: self.id.clone(),
            latency_ms: 0,
        })
    }
}
