//! Deterministic offline backends.
//!
//! [`MockModel`] scores the OCR text with a keyword table and reacts to
//! exactly one directive: when the system prompt contains the `u_low`
//! phrase it subtracts `delta` from the score. That gives the control loop
//! a known causal path from prompt to score. Judge requests get a
//! templated critique derived from the prediction and the label.
//!
//! [`MockEmbedder`] expands a SHA-256 of `(seed, text)` through ChaCha8
//! into a unit vector.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{EmbeddingBackend, Message, ModelBackend, Role};
use crate::agents::layout;
use crate::error::{Error, Result};
use crate::knowledge_base::Embedding;
use crate::prompt_mapper::DirectiveTag;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KeywordScore {
    pub keyword: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MockModelConfig {
    /// Checked in order against the lowercased OCR text; first match wins.
    pub keywords: Vec<KeywordScore>,
    pub default_score: f64,
    pub delta: f64,
    /// Phrase whose presence in the system prompt triggers the `delta` shift.
    pub u_low_phrase: String,
}

impl Default for MockModelConfig {
    fn default() -> Self {
        let keywords = [
            ("ironic", 0.8),
            ("sarcasm", 0.85),
            ("lol", 0.9),
            ("joke", 0.75),
            ("pun", 0.7),
            ("protest", 0.2),
            ("rights", 0.25),
            ("memorial", 0.1),
        ]
        .into_iter()
        .map(|(keyword, score)| KeywordScore {
            keyword: keyword.into(),
            score,
        })
        .collect();
        Self {
            keywords,
            default_score: 0.5,
            delta: 0.2,
            u_low_phrase: DirectiveTag::ULow.default_text().into(),
        }
    }
}

impl MockModelConfig {
    pub fn validate(&self) -> Result<()> {
        let scores = self
            .keywords
            .iter()
            .map(|k| k.score)
            .chain([self.default_score]);
        for s in scores {
            if !(0.0..=1.0).contains(&s) {
                return Err(Error::Config(format!("mock score {s} outside [0, 1]")));
            }
        }
        if !self.delta.is_finite() {
            return Err(Error::Config("mock delta must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default)]
pub struct MockModel {
    cfg: MockModelConfig,
}

impl MockModel {
    pub fn new(cfg: MockModelConfig) -> Self {
        Self { cfg }
    }

    pub fn config(&self) -> &MockModelConfig {
        &self.cfg
    }

    /// Score and matched keywords for a prompt/OCR pair, before formatting.
    pub fn score(&self, system_prompt: &str, ocr_text: &str) -> (f64, Vec<&str>) {
        let lowered = ocr_text.to_lowercase();
        let matched: Vec<&KeywordScore> = self
            .cfg
            .keywords
            .iter()
            .filter(|k| lowered.contains(&k.keyword.to_lowercase()))
            .collect();
        let mut score = matched.first().map_or(self.cfg.default_score, |k| k.score);
        if !self.cfg.u_low_phrase.is_empty() && system_prompt.contains(&self.cfg.u_low_phrase) {
            score -= self.cfg.delta;
        }
        (
            score.clamp(0.0, 1.0),
            matched.iter().map(|k| k.keyword.as_str()).collect(),
        )
    }

    fn reasoning_reply(&self, system_prompt: &str, user: &str) -> String {
        let ocr = user
            .find(layout::OCR)
            .map(|i| &user[i + layout::OCR.len()..])
            .unwrap_or(user);
        let (score, matched) = self.score(system_prompt, ocr);
        let rationale = if matched.is_empty() {
            "no humor cues matched in the caption; neutral reading".to_string()
        } else {
            format!("caption cues suggest humor intent: {}", matched.join(", "))
        };
        format!("SCORE: {score:.2}\nRATIONALE: {rationale}")
    }

    fn judge_reply(&self, user: &str) -> String {
        let field = |prefix: &str| {
            user.lines()
                .find_map(|l| l.strip_prefix(prefix))
                .map(str::trim)
                .unwrap_or("")
                .to_string()
        };
        let predicted: f64 = field(layout::PREDICTED_SCORE).parse().unwrap_or(0.5);
        let label: f64 = field(layout::TRUE_LABEL).parse().unwrap_or(0.0);
        let ocr: String = field(layout::OCR).chars().take(60).collect();
        let error = label - predicted;
        let verdict = if error > 0.25 {
            "The reasoning missed humorous intent; look for irony and a setup-to-twist structure."
        } else if error < -0.25 {
            "The reasoning over-read humor from surface tone; check whether the intent is sincere."
        } else {
            "The judgment is close to the target; the cues were read correctly."
        };
        format!(
            "CRITIQUE: predicted {predicted:.2} for a label-{label:.0} meme (\"{ocr}\"). {verdict}"
        )
    }
}

impl ModelBackend for MockModel {
    fn generate(&self, messages: &[Message], _max_tokens: u32) -> Result<String> {
        let system = messages
            .iter()
            .filter(|m| m.role == Role::System)
            .map(|m| m.content.as_str())
            .collect::<Vec<_>>()
            .join("\n");
        let user = messages
            .iter()
            .rev()
            .find(|m| m.role == Role::User)
            .map(|m| m.content.as_str())
            .ok_or_else(|| Error::backend(None, "mock: request has no user message"))?;
        if user.starts_with(layout::PREDICTED_SCORE) {
            Ok(self.judge_reply(user))
        } else {
            Ok(self.reasoning_reply(&system, user))
        }
    }

    fn name(&self) -> &str {
        "mock"
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MockEmbedder {
    dim: usize,
    seed: u64,
}

impl MockEmbedder {
    pub fn new(dim: usize, seed: u64) -> Self {
        Self {
            dim: dim.max(1),
            seed,
        }
    }

    pub fn embed_text(&self, text: &str) -> Embedding {
        let mut hasher = Sha256::new();
        hasher.update(self.seed.to_le_bytes());
        hasher.update(text.as_bytes());
        let digest: [u8; 32] = hasher.finalize().into();
        let mut rng = ChaCha8Rng::from_seed(digest);
        // 53 random mantissa bits mapped onto [-1, 1)
        let mut values: Vec<f64> = (0..self.dim)
            .map(|_| (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64) * 2.0 - 1.0)
            .collect();
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            values[0] = 1.0;
        } else {
            values.iter_mut().for_each(|v| *v /= norm);
        }
        Embedding::new(values).expect("finite unit vector")
    }
}

impl EmbeddingBackend for MockEmbedder {
    fn embed(&self, text: &str) -> Result<Embedding> {
        Ok(self.embed_text(text))
    }

    fn dim(&self) -> usize {
        self.dim
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::knowledge_base::cosine_sim;

    fn ask(model: &MockModel, system: &str, ocr: &str) -> String {
        let user = format!(
            "{}{}\n{}{ocr}",
            layout::IMAGE,
            layout::IMAGE_UNAVAILABLE,
            layout::OCR
        );
        model
            .generate(&[Message::system(system), Message::user(user)], 128)
            .unwrap()
    }

    #[test]
    fn keyword_table_lookup() {
        let m = MockModel::default();
        let out = ask(&m, "base", "so IRONIC right");
        assert!(out.starts_with("SCORE: 0.80\nRATIONALE: "), "{out}");
        assert!(out.contains("ironic"));
    }

    #[test]
    fn u_low_directive_shifts_score() {
        let m = MockModel::default();
        let prompt = format!("base\n\nGuidance:\n- {}", DirectiveTag::ULow.default_text());
        assert!(ask(&m, &prompt, "ironic").starts_with("SCORE: 0.60"));
    }

    #[test]
    fn default_score_without_keywords() {
        assert!(ask(&MockModel::default(), "base", "a plain caption").starts_with("SCORE: 0.50"));
    }

    #[test]
    fn directive_text_does_not_leak_into_keyword_matching() {
        // "sarcasm" appears in a directive phrase but not in the OCR text
        let m = MockModel::default();
        let prompt = format!("base\n- {}", DirectiveTag::FIrony.default_text());
        assert!(ask(&m, &prompt, "plain").starts_with("SCORE: 0.50"));
    }

    #[test]
    fn judge_requests_get_critiques() {
        let m = MockModel::default();
        let user = format!(
            "{}0.9000\n{}0\n{}{}\n{}plain\n{}r",
            layout::PREDICTED_SCORE,
            layout::TRUE_LABEL,
            layout::IMAGE,
            layout::IMAGE_UNAVAILABLE,
            layout::OCR,
            layout::RATIONALE
        );
        let out = m
            .generate(&[Message::system("judge"), Message::user(user)], 128)
            .unwrap();
        assert!(out.starts_with("CRITIQUE: predicted 0.90 for a label-0 meme"));
        assert!(out.contains("over-read"));
    }

    #[test]
    fn embedder_is_deterministic_and_unit() {
        let e = MockEmbedder::new(64, 0);
        let a = e.embed_text("hello");
        assert_eq!(a, e.embed_text("hello"));
        assert!((a.norm() - 1.0).abs() < 1e-9);
        assert_eq!(a.dim(), 64);
        assert_ne!(a, MockEmbedder::new(64, 1).embed_text("hello"));
    }

    #[test]
    fn embedder_frozen_value() {
        // pins cross-platform stability of the hash expansion
        let v = MockEmbedder::new(4, 0).embed_text("meme");
        assert_eq!(
            v.values().iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            [
                13827997465284918268u64,
                13818486158534652723,
                13826058559282597862,
                13825280848636385449
            ]
        );
        assert!((v.values()[0] - -0.7161170417620037).abs() < 1e-15);
    }

    #[test]
    fn distinct_long_strings_are_dissimilar() {
        let e = MockEmbedder::new(64, 0);
        let mut worst = f64::MIN;
        for i in 0..1000 {
            let a = e.embed_text(&format!(
                "a long caption about topic {i} with several words in it"
            ));
            let b = e.embed_text(&format!(
                "another long caption about subject {i} and more words here"
            ));
            worst = worst.max(cosine_sim(&a, &b).unwrap());
        }
        assert!(worst < 0.9, "max cosine {worst}");
    }

    #[test]
    fn config_validation() {
        assert!(MockModelConfig::default().validate().is_ok());
        let cfg = MockModelConfig {
            default_score: 1.5,
            ..MockModelConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
