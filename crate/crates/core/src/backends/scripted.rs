//! Replay of recorded model traffic keyed by request fingerprint.

use std::collections::{HashMap, VecDeque};
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{fingerprint, Message, ModelBackend};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptEntry {
    pub fingerprint: String,
    pub response: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct Script {
    pub strict: bool,
    /// Response for unknown requests when not strict.
    pub default_response: Option<String>,
    pub entries: Vec<ScriptEntry>,
}

impl Script {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Schema {
            line: e.line(),
            message: format!("script: {e}"),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Parse(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Serves canned responses. Repeated fingerprints are answered in
/// recording order.
#[derive(Debug)]
pub struct ScriptedBackend {
    strict: bool,
    default_response: Option<String>,
    queues: Mutex<HashMap<String, VecDeque<String>>>,
}

impl ScriptedBackend {
    pub fn new(script: Script) -> Self {
        let mut queues: HashMap<String, VecDeque<String>> = HashMap::new();
        for entry in script.entries {
            queues
                .entry(entry.fingerprint)
                .or_default()
                .push_back(entry.response);
        }
        Self {
            strict: script.strict,
            default_response: script.default_response,
            queues: Mutex::new(queues),
        }
    }

    /// Helper for tests: script keyed directly by message lists.
    pub fn from_pairs(
        strict: bool,
        pairs: impl IntoIterator<Item = (Vec<Message>, u32, String)>,
    ) -> Self {
        Self::new(Script {
            strict,
            default_response: None,
            entries: pairs
                .into_iter()
                .map(|(messages, max_tokens, response)| ScriptEntry {
                    fingerprint: fingerprint(&messages, max_tokens),
                    response,
                })
                .collect(),
        })
    }

    /// Number of responses not consumed yet.
    pub fn remaining(&self) -> usize {
        let queues = self.queues.lock().unwrap_or_else(|e| e.into_inner());
        queues.values().map(VecDeque::len).sum()
    }
}

impl ModelBackend for ScriptedBackend {
    fn generate(&self, messages: &[Message], max_tokens: u32) -> Result<String> {
        let key = fingerprint(messages, max_tokens);
        let mut queues = self.queues.lock().unwrap_or_else(|e| e.into_inner());
        if let Some(response) = queues.get_mut(&key).and_then(VecDeque::pop_front) {
            return Ok(response);
        }
        match (&self.default_response, self.strict) {
            (Some(default), false) => Ok(default.clone()),
            _ => Err(Error::backend(
                None,
                format!("script has no response for request {key}"),
            )),
        }
    }

    fn name(&self) -> &str {
        "scripted"
    }
}

/// Wraps a backend and records every exchange as a script entry.
pub struct RecordingBackend<B> {
    inner: B,
    recorded: Mutex<Vec<ScriptEntry>>,
}

impl<B: ModelBackend> RecordingBackend<B> {
    pub fn new(inner: B) -> Self {
        Self {
            inner,
            recorded: Mutex::new(Vec::new()),
        }
    }

    pub fn to_script(&self, strict: bool) -> Script {
        Script {
            strict,
            default_response: None,
            entries: self
                .recorded
                .lock()
                .unwrap_or_else(|e| e.into_inner())
                .clone(),
        }
    }
}

impl<B: ModelBackend> ModelBackend for RecordingBackend<B> {
    fn generate(&self, messages: &[Message], max_tokens: u32) -> Result<String> {
        let response = self.inner.generate(messages, max_tokens)?;
        self.recorded
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .push(ScriptEntry {
                fingerprint: fingerprint(messages, max_tokens),
                response: response.clone(),
            });
        Ok(response)
    }

    fn supports_images(&self) -> bool {
        self.inner.supports_images()
    }

    fn name(&self) -> &str {
        self.inner.name()
    }
}
