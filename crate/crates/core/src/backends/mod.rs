//! Model and embedding providers.
//!
//! The pipelines only see the [`ModelBackend`] and [`EmbeddingBackend`]
//! traits. Concrete providers:
//!
//! - [`http`]: chat-completions and embeddings endpoints over HTTP
//! - [`mock`]: deterministic offline stand-ins
//! - [`scripted`]: replay of recorded request/response pairs

use std::sync::{Condvar, Mutex};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::Result;
use crate::knowledge_base::Embedding;

pub mod http;
pub mod mock;
pub mod scripted;

pub use http::{HttpChatBackend, HttpEmbeddingBackend, HttpEndpoint};
pub use mock::{KeywordScore, MockEmbedder, MockModel, MockModelConfig};
pub use scripted::{RecordingBackend, Script, ScriptEntry, ScriptedBackend};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

impl Role {
    pub fn as_str(&self) -> &'static str {
        match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
    /// Path or URI of an image attachment, sent only to backends that
    /// accept images.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_ref: Option<String>,
}

impl Message {
    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: Role::System,
            content: content.into(),
            image_ref: None,
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: Role::User,
            content: content.into(),
            image_ref: None,
        }
    }

    pub fn with_image(mut self, image_ref: impl Into<String>) -> Self {
        self.image_ref = Some(image_ref.into());
        self
    }
}

pub trait ModelBackend: Send + Sync {
    fn generate(&self, messages: &[Message], max_tokens: u32) -> Result<String>;

    /// Whether image attachments are forwarded to the model.
    fn supports_images(&self) -> bool {
        false
    }

    fn name(&self) -> &str;
}

pub trait EmbeddingBackend: Send + Sync {
    fn embed(&self, text: &str) -> Result<Embedding>;

    fn dim(&self) -> usize;
}

impl<T: ModelBackend + ?Sized> ModelBackend for std::sync::Arc<T> {
    fn generate(&self, messages: &[Message], max_tokens: u32) -> Result<String> {
        (**self).generate(messages, max_tokens)
    }

    fn supports_images(&self) -> bool {
        (**self).supports_images()
    }

    fn name(&self) -> &str {
        (**self).name()
    }
}

impl<T: EmbeddingBackend + ?Sized> EmbeddingBackend for std::sync::Arc<T> {
    fn embed(&self, text: &str) -> Result<Embedding> {
        (**self).embed(text)
    }

    fn dim(&self) -> usize {
        (**self).dim()
    }
}

fn normalize_whitespace(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Stable request fingerprint: sorted-key JSON of the messages with
/// whitespace collapsed, hashed with SHA-256.
pub fn fingerprint(messages: &[Message], max_tokens: u32) -> String {
    let messages: Vec<serde_json::Value> = messages
        .iter()
        .map(|m| {
            serde_json::json!({
                "role": m.role.as_str(),
                "content": normalize_whitespace(&m.content),
                "image_ref": m.image_ref,
            })
        })
        .collect();
    let canonical = serde_json::json!({ "max_tokens": max_tokens, "messages": messages });
    hex::encode(Sha256::digest(canonical.to_string().as_bytes()))
}

/// Counting semaphore bounding concurrent requests.
#[derive(Debug)]
pub struct InFlightLimit {
    max: usize,
    active: Mutex<usize>,
    freed: Condvar,
}

pub struct InFlightGuard<'a>(&'a InFlightLimit);

impl InFlightLimit {
    pub fn new(max: usize) -> Self {
        Self {
            max: max.max(1),
            active: Mutex::new(0),
            freed: Condvar::new(),
        }
    }

    pub fn acquire(&self) -> InFlightGuard<'_> {
        let mut active = self.active.lock().unwrap_or_else(|e| e.into_inner());
        while *active >= self.max {
            active = self.freed.wait(active).unwrap_or_else(|e| e.into_inner());
        }
        *active += 1;
        InFlightGuard(self)
    }

    pub fn max(&self) -> usize {
        self.max
    }
}

impl Drop for InFlightGuard<'_> {
    fn drop(&mut self) {
        let mut active = self.0.active.lock().unwrap_or_else(|e| e.into_inner());
        *active -= 1;
        self.0.freed.notify_one();
    }
}
