//! Reasoning agent and judge agent.
//!
//! The reasoning agent sends the guidance prompt and the meme to a model
//! backend and parses a `SCORE:` line and a `RATIONALE:` block from the
//! reply. Its embedding is taken over a canonical text serialization of
//! (OCR text, prompt, rationale).
//!
//! The judge computes the scalar error locally as `label - score`; the
//! model only supplies the textual critique, whose embedding prefix becomes
//! the feedback vector.

use regex::{Regex, RegexBuilder};
use serde::{Deserialize, Serialize};

use crate::backends::{EmbeddingBackend, Message, ModelBackend};
use crate::controller::FeedbackVector;
use crate::error::{Error, Result};
use crate::harness::MemeRecord;
use crate::knowledge_base::Embedding;
use crate::prompt_mapper::GuidancePrompt;

/// Fixed line prefixes of the user messages. Offline backends rely on them
/// to tell reasoning requests from judge requests.
pub mod layout {
    pub const IMAGE: &str = "IMAGE: ";
    pub const OCR: &str = "OCR: ";
    pub const PREDICTED_SCORE: &str = "PREDICTED SCORE: ";
    pub const TRUE_LABEL: &str = "TRUE LABEL: ";
    pub const RATIONALE: &str = "RATIONALE: ";
    pub const IMAGE_UNAVAILABLE: &str = "[image unavailable]";
    pub const IMAGE_ATTACHED: &str = "[attached]";
}

pub const DEFAULT_JUDGE_PROMPT: &str = "You are a strict judge of meme-humor reasoning. \
You are given a meme, an agent's predicted humor score and rationale, and the true label \
(1 = humorous, 0 = not humorous). Critique the reasoning in at most three sentences: say what \
the agent missed or over-read, referring to irony or sarcasm, narrative setup and twist, and \
visual layout where relevant.";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputFormat {
    pub score_key: String,
    pub rationale_key: String,
}

impl Default for OutputFormat {
    fn default() -> Self {
        Self {
            score_key: "SCORE".into(),
            rationale_key: "RATIONALE".into(),
        }
    }
}

impl OutputFormat {
    pub fn validate(&self) -> Result<()> {
        let (s, r) = (self.score_key.trim(), self.rationale_key.trim());
        if s.is_empty() || r.is_empty() {
            return Err(Error::Config("output format keys must be non-empty".into()));
        }
        if s.eq_ignore_ascii_case(r) {
            return Err(Error::Config(
                "score_key and rationale_key must differ".into(),
            ));
        }
        Ok(())
    }

    fn key_regex(key: &str, tail: &str) -> Regex {
        RegexBuilder::new(&format!(r"^\s*{}\s*:\s*{tail}", regex::escape(key.trim())))
            .case_insensitive(true)
            .build()
            .expect("escaped key forms a valid regex")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentConfig {
    /// Generation cap for rationales and critiques.
    pub max_tokens: u32,
    pub format: OutputFormat,
    pub judge_prompt: String,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            max_tokens: 128,
            format: OutputFormat::default(),
            judge_prompt: DEFAULT_JUDGE_PROMPT.into(),
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_tokens == 0 {
            return Err(Error::Config("max_tokens must be positive".into()));
        }
        if self.judge_prompt.trim().is_empty() {
            return Err(Error::Config("judge prompt must not be empty".into()));
        }
        self.format.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub score: f64,
    pub rationale: String,
    pub raw_output: String,
    /// The model's number fell outside [0, 1] and was clamped.
    pub score_clamped: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeVerdict {
    pub error: f64,
    pub critique: String,
    pub f: FeedbackVector,
}

fn parse_number(s: &str) -> Option<f64> {
    s.parse::<f64>().ok().filter(|v| v.is_finite())
}

/// Finds the score number before clamping, with its line index.
fn find_score(raw: &str, fmt: &OutputFormat) -> Option<(f64, usize)> {
    let keyed = OutputFormat::key_regex(&fmt.score_key, r"([-+]?(?:\d+(?:\.\d*)?|\.\d+))");
    for (i, line) in raw.lines().enumerate() {
        if let Some(value) = keyed.captures(line).and_then(|c| parse_number(&c[1])) {
            return Some((value, i));
        }
    }
    // fallback: a bare number in [0, 1] alone on its line
    raw.lines().enumerate().find_map(|(i, line)| {
        parse_number(line.trim())
            .filter(|v| (0.0..=1.0).contains(v))
            .map(|v| (v, i))
    })
}

pub fn parse_score(raw: &str, fmt: &OutputFormat) -> Result<f64> {
    find_score(raw, fmt)
        .map(|(v, _)| v.clamp(0.0, 1.0))
        .ok_or_else(|| Error::Parse(format!("no `{}:` line in model output", fmt.score_key)))
}

pub fn parse_prediction(raw: &str, fmt: &OutputFormat) -> Result<Prediction> {
    let (value, score_line) = find_score(raw, fmt)
        .ok_or_else(|| Error::Parse(format!("no `{}:` line in model output", fmt.score_key)))?;
    let score = value.clamp(0.0, 1.0);

    let keyed = OutputFormat::key_regex(&fmt.rationale_key, "(.*)$");
    let lines: Vec<&str> = raw.lines().collect();
    let rationale = match lines.iter().position(|l| keyed.is_match(l)) {
        Some(start) => {
            let first = keyed
                .captures(lines[start])
                .map(|c| c[1].to_string())
                .unwrap_or_default();
            std::iter::once(first.as_str())
                .chain(lines[start + 1..].iter().copied())
                .collect::<Vec<_>>()
                .join("\n")
        }
        None => lines
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != score_line)
            .map(|(_, l)| *l)
            .collect::<Vec<_>>()
            .join("\n"),
    };
    let rationale = rationale.trim().to_string();
    if rationale.is_empty() {
        return Err(Error::Parse("model output has no rationale".into()));
    }
    Ok(Prediction {
        score,
        rationale,
        raw_output: raw.to_string(),
        score_clamped: score != value,
    })
}

fn image_line(meme: &MemeRecord, with_image: bool) -> String {
    let marker = if with_image && !meme.image_ref.is_empty() {
        layout::IMAGE_ATTACHED
    } else {
        layout::IMAGE_UNAVAILABLE
    };
    format!("{}{marker}", layout::IMAGE)
}

fn attach(message: Message, meme: &MemeRecord, with_image: bool) -> Message {
    if with_image && !meme.image_ref.is_empty() {
        message.with_image(meme.image_ref.clone())
    } else {
        message
    }
}

pub fn reasoning_messages(
    meme: &MemeRecord,
    prompt: &GuidancePrompt,
    with_image: bool,
) -> Vec<Message> {
    let user = format!(
        "{}\n{}{}",
        image_line(meme, with_image),
        layout::OCR,
        meme.ocr_text
    );
    vec![
        Message::system(prompt.text.clone()),
        attach(Message::user(user), meme, with_image),
    ]
}

pub fn judge_messages(
    meme: &MemeRecord,
    pred: &Prediction,
    label: u8,
    cfg: &AgentConfig,
    with_image: bool,
) -> Vec<Message> {
    let user = format!(
        "{}{:.4}\n{}{label}\n{}\n{}{}\n{}{}",
        layout::PREDICTED_SCORE,
        pred.score,
        layout::TRUE_LABEL,
        image_line(meme, with_image),
        layout::OCR,
        meme.ocr_text,
        layout::RATIONALE,
        pred.rationale,
    );
    vec![
        Message::system(cfg.judge_prompt.clone()),
        attach(Message::user(user), meme, with_image),
    ]
}

/// Text embedded as the experience representation.
pub fn embedding_text(meme: &MemeRecord, prompt: &GuidancePrompt, rationale: &str) -> String {
    format!(
        "OCR: {}\nPROMPT: {}\nRATIONALE: {rationale}",
        meme.ocr_text, prompt.text
    )
}

/// Keeps at most `max_tokens` whitespace-separated tokens.
pub fn truncate_tokens(text: &str, max_tokens: usize) -> &str {
    let mut count = 0;
    let mut in_token = false;
    for (i, ch) in text.char_indices() {
        if ch.is_whitespace() {
            in_token = false;
        } else if !in_token {
            if count == max_tokens {
                return text[..i].trim_end();
            }
            count += 1;
            in_token = true;
        }
    }
    text
}

fn embed(embedder: &dyn EmbeddingBackend, text: &str) -> Result<Embedding> {
    embedder.embed(text).map_err(|e| match e {
        Error::Embedding(_) => e,
        other => Error::Embedding(other.to_string()),
    })
}

pub fn reason(
    meme: &MemeRecord,
    prompt: &GuidancePrompt,
    backend: &dyn ModelBackend,
    embedder: &dyn EmbeddingBackend,
    cfg: &AgentConfig,
) -> Result<(Prediction, Embedding)> {
    let messages = reasoning_messages(meme, prompt, backend.supports_images());
    let raw = backend.generate(&messages, cfg.max_tokens)?;
    let prediction = parse_prediction(&raw, &cfg.format)?;
    if prediction.score_clamped {
        log::debug!("{}: score clamped into [0, 1]", meme.id);
    }
    let emb = embed(
        embedder,
        &embedding_text(meme, prompt, &prediction.rationale),
    )?;
    Ok((prediction, emb))
}

pub fn judge(
    meme: &MemeRecord,
    pred: &Prediction,
    backend: &dyn ModelBackend,
    embedder: &dyn EmbeddingBackend,
    cfg: &AgentConfig,
) -> Result<JudgeVerdict> {
    let label = meme.label.ok_or_else(|| Error::MissingLabel {
        id: meme.id.clone(),
        line: meme.line,
    })?;
    let error = f64::from(label) - pred.score;
    let messages = judge_messages(meme, pred, label, cfg, backend.supports_images());
    let raw = backend.generate(&messages, cfg.max_tokens)?;
    let critique = truncate_tokens(raw.trim(), cfg.max_tokens as usize).to_string();
    let emb = embed(embedder, &critique)?;
    let f = FeedbackVector::from_prefix(emb.values())
        .map_err(|e| Error::Embedding(format!("feedback vector: {e}")))?;
    Ok(JudgeVerdict { error, critique, f })
}
