use std::collections::BTreeMap;
use std::path::Path;
use std::sync::{Arc, Mutex};

use regex::Regex;
use serde::Deserialize;

use super::builtin::{BuiltinResponder, KeywordTable};
use super::{ChatBackend, ChatRequest, ChatResponse, LlmError};

/// Pure function from request to completion text.
pub type Responder = Arc<dyn Fn(&ChatRequest) -> String + Send + Sync>;

#[derive(Debug, Clone)]
pub enum Matcher {
    /// Matches every prompt.
    Any,
    Substring(String),
    Pattern(Regex),
}

impl Matcher {
    pub fn matches(&self, prompt: &str) -> bool {
        match self {
            Matcher::Any => true,
            Matcher::Substring(s) => prompt.contains(s.as_str()),
            Matcher::Pattern(re) => re.is_match(prompt),
        }
    }
}

#[derive(Clone)]
pub struct ScriptRule {
    pub matcher: Matcher,
    pub responder: Responder,
}

impl ScriptRule {
    pub fn new(
        matcher: Matcher,
        responder: impl Fn(&ChatRequest) -> String + Send + Sync + 'static,
    ) -> Self {
        Self {
            matcher,
            responder: Arc::new(responder),
        }
    }

    /// Rule answering with fixed text whenever `needle` occurs in the prompt.
    pub fn reply(needle: &str, text: &str) -> Self {
        let text = text.to_string();
        Self::new(Matcher::Substring(needle.into()), move |_| text.clone())
    }
}

/// Deterministic backend: the first rule whose matcher accepts the rendered
/// prompt produces the completion.
pub struct ScriptedBackend {
    id: String,
    rules: Vec<ScriptRule>,
    // Calls are serialized so transcripts stay ordered.
    gate: Mutex<()>,
}

pub fn register_script(rules: Vec<ScriptRule>) -> Result<ScriptedBackend, LlmError> {
    ScriptedBackend::new("scripted", rules)
}

impl ScriptedBackend {
    pub fn new(id: impl Into<String>, rules: Vec<ScriptRule>) -> Result<Self, LlmError> {
        if rules.is_empty() {
            return Err(LlmError::InvalidConfig("script has no rules".into()));
        }
        Ok(Self {
            id: id.into(),
            rules,
            gate: Mutex::new(()),
        })
    }
}

impl ChatBackend for ScriptedBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError> {
        request.validate()?;
        let _gate = self.gate.lock().unwrap_or_else(|p| p.into_inner());
        let prompt = request.rendered();
        let rule = self
            .rules
            .iter()
            .find(|r| r.matcher.matches(&prompt))
            .ok_or_else(|| LlmError::NoScriptMatch {
                digest: super::digest_text(&prompt),
            })?;
        let text = (rule.responder)(request);
        if text.trim().is_empty() {
            return Err(LlmError::EmptyCompletion);
        }
        Ok(ChatResponse {
            text,
            backend_id: self.id.clone(),
            latency_ms: 0,
        })
    }
}

/// On-disk script: an ordered rule list in TOML.
///
/// ```toml
/// [keywords]
/// Theory = "lemma"
///
/// [[rule]]
/// contains = "You are the PREDICTOR"
/// responder = "keyword-predictor"
///
/// [[rule]]
/// pattern = "(?i)hello"
/// reply = "world"
/// ```
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptFile {
    #[serde(default)]
    pub keywords: BTreeMap<String, String>,
    #[serde(default = "default_word_cap")]
    pub summary_word_cap: usize,
    #[serde(rename = "rule", default)]
    pub rules: Vec<RuleSpec>,
}

fn default_word_cap() -> usize {
    200
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RuleSpec {
    pub contains: Option<String>,
    pub pattern: Option<String>,
    pub reply: Option<String>,
    pub responder: Option<BuiltinResponder>,
}

impl ScriptFile {
    pub fn load(path: &Path) -> Result<Self, LlmError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| LlmError::InvalidConfig(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| LlmError::InvalidConfig(format!("{}: {e}", path.display())))
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    pub fn into_backend(self) -> Result<ScriptedBackend, LlmError> {
        let table = Arc::new(KeywordTable::new(self.keywords, self.summary_word_cap));
        let mut rules = Vec::with_capacity(self.rules.len());
        for (i, spec) in self.rules.into_iter().enumerate() {
            let matcher = match (spec.contains, spec.pattern) {
                (Some(_), Some(_)) => {
                    return Err(LlmError::InvalidConfig(format!(
                        "rule {i}: give either `contains` or `pattern`, not both"
                    )))
                }
                (Some(s), None) => Matcher::Substring(s),
                (None, Some(p)) => Matcher::Pattern(
                    Regex::new(&p)
                        .map_err(|e| LlmError::InvalidConfig(format!("rule {i}: {e}")))?,
                ),
                (None, None) => Matcher::Any,
            };
            let responder: Responder = match (spec.reply, spec.responder) {
                (Some(text), None) => Arc::new(move |_: &ChatRequest| text.clone()),
                (None, Some(builtin)) => {
                    let table = Arc::clone(&table);
                    Arc::new(move |req: &ChatRequest| builtin.respond(&table, req))
                }
                _ => {
                    return Err(LlmError::InvalidConfig(format!(
                        "rule {i}: give exactly one of `reply` or `responder`"
                    )))
                }
            };
            rules.push(ScriptRule { matcher, responder });
        }
        ScriptedBackend::new("scripted", rules)
    }
}
