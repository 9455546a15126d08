//! Maps a control vector to guidance text.
//!
//! Each control channel owns one directive. A directive fires when its
//! channel's magnitude crosses the activation threshold, and fired
//! directives are appended to the base prompt in a fixed order
//! (`u`, `f1`, `f2`, `f3`, `k`). The zero vector yields the base prompt
//! unchanged.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::controller::ControlVector;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DirectiveTag {
    ULow,
    UHigh,
    FIrony,
    FNarrative,
    FLayout,
    KCaution,
}

impl DirectiveTag {
    /// Firing order.
    pub const ALL: [DirectiveTag; 6] = [
        DirectiveTag::ULow,
        DirectiveTag::UHigh,
        DirectiveTag::FIrony,
        DirectiveTag::FNarrative,
        DirectiveTag::FLayout,
        DirectiveTag::KCaution,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            DirectiveTag::ULow => "u_low",
            DirectiveTag::UHigh => "u_high",
            DirectiveTag::FIrony => "f_irony",
            DirectiveTag::FNarrative => "f_narrative",
            DirectiveTag::FLayout => "f_layout",
            DirectiveTag::KCaution => "k_caution",
        }
    }

    pub fn default_text(&self) -> &'static str {
        match self {
            DirectiveTag::ULow => "Be conservative about calling memes humorous.",
            DirectiveTag::UHigh => "Lean toward recognizing subtle humor.",
            DirectiveTag::FIrony => "Check for irony or sarcasm.",
            DirectiveTag::FNarrative => "Verify a setup→twist narrative structure.",
            DirectiveTag::FLayout => "Attend to visual layout and image–text placement cues.",
            DirectiveTag::KCaution => {
                "Similar past cases were misjudged; re-examine intent vs. surface tone."
            }
        }
    }
}

impl fmt::Display for DirectiveTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

pub const DEFAULT_BASE_PROMPT: &str = "You are analyzing a meme for humor. \
Read the OCR text and consider the image, then decide how likely it is that the meme is humorous.\n\
Respond in exactly this format:\n\
SCORE: <a number between 0 and 1>\n\
RATIONALE: <one or two sentences explaining your reasoning>";

/// Separator between the base prompt and the appended guidance block.
const GUIDANCE_HEADER: &str = "\n\nGuidance:";

/// Directive phrases, one per tag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DirectiveTexts {
    pub u_low: String,
    pub u_high: String,
    pub f_irony: String,
    pub f_narrative: String,
    pub f_layout: String,
    pub k_caution: String,
}

impl Default for DirectiveTexts {
    fn default() -> Self {
        Self {
            u_low: DirectiveTag::ULow.default_text().into(),
            u_high: DirectiveTag::UHigh.default_text().into(),
            f_irony: DirectiveTag::FIrony.default_text().into(),
            f_narrative: DirectiveTag::FNarrative.default_text().into(),
            f_layout: DirectiveTag::FLayout.default_text().into(),
            k_caution: DirectiveTag::KCaution.default_text().into(),
        }
    }
}

impl DirectiveTexts {
    pub fn get(&self, tag: DirectiveTag) -> &str {
        match tag {
            DirectiveTag::ULow => &self.u_low,
            DirectiveTag::UHigh => &self.u_high,
            DirectiveTag::FIrony => &self.f_irony,
            DirectiveTag::FNarrative => &self.f_narrative,
            DirectiveTag::FLayout => &self.f_layout,
            DirectiveTag::KCaution => &self.k_caution,
        }
    }

    pub fn set(&mut self, tag: DirectiveTag, text: impl Into<String>) {
        let slot = match tag {
            DirectiveTag::ULow => &mut self.u_low,
            DirectiveTag::UHigh => &mut self.u_high,
            DirectiveTag::FIrony => &mut self.f_irony,
            DirectiveTag::FNarrative => &mut self.f_narrative,
            DirectiveTag::FLayout => &mut self.f_layout,
            DirectiveTag::KCaution => &mut self.k_caution,
        };
        *slot = text.into();
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MapperConfig {
    pub threshold: f64,
    pub base_prompt: String,
    pub directives: DirectiveTexts,
}

impl Default for MapperConfig {
    fn default() -> Self {
        Self {
            threshold: 0.25,
            base_prompt: DEFAULT_BASE_PROMPT.to_string(),
            directives: DirectiveTexts::default(),
        }
    }
}

impl MapperConfig {
    pub fn validate(&self) -> Result<()> {
        if self.threshold.is_nan() || self.threshold <= 0.0 || !self.threshold.is_finite() {
            return Err(Error::Config(format!(
                "mapper.threshold must be a positive finite number, got {}",
                self.threshold
            )));
        }
        if self.base_prompt.trim().is_empty() {
            return Err(Error::Config("mapper.base_prompt must not be empty".into()));
        }
        for tag in DirectiveTag::ALL {
            let text = self.directives.get(tag);
            if text.trim().is_empty() {
                return Err(Error::Config(format!("mapper.directives.{tag} is empty")));
            }
            // a phrase inside the base prompt would make the neutral prompt non-neutral
            if self.base_prompt.contains(text) {
                return Err(Error::Config(format!(
                    "mapper.base_prompt contains the {tag} directive phrase"
                )));
            }
        }
        Ok(())
    }

    pub fn directive_text(&self, tag: DirectiveTag) -> &str {
        self.directives.get(tag)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GuidancePrompt {
    pub text: String,
    pub directives: Vec<DirectiveTag>,
}

impl GuidancePrompt {
    pub fn is_neutral(&self) -> bool {
        self.directives.is_empty()
    }
}

pub fn fired_directives(c: &ControlVector, threshold: f64) -> Vec<DirectiveTag> {
    let [f1, f2, f3] = c.f.components();
    let k_max =
        c.k.components()
            .iter()
            .fold(0.0f64, |acc, v| acc.max(v.abs()));
    DirectiveTag::ALL
        .into_iter()
        .filter(|tag| match tag {
            DirectiveTag::ULow => c.u < -threshold,
            DirectiveTag::UHigh => c.u > threshold,
            DirectiveTag::FIrony => f1.abs() > threshold,
            DirectiveTag::FNarrative => f2.abs() > threshold,
            DirectiveTag::FLayout => f3.abs() > threshold,
            DirectiveTag::KCaution => k_max > threshold,
        })
        .collect()
}

pub fn map_control_to_prompt(c: &ControlVector, cfg: &MapperConfig) -> Result<GuidancePrompt> {
    if !c.is_finite() {
        return Err(Error::InvalidControl("non-finite component".into()));
    }
    let directives = fired_directives(c, cfg.threshold);
    let mut text = cfg.base_prompt.clone();
    if !directives.is_empty() {
        text.push_str(GUIDANCE_HEADER);
        for tag in &directives {
            text.push_str("\n- ");
            text.push_str(cfg.directive_text(*tag));
        }
    }
    Ok(GuidancePrompt { text, directives })
}

/// Same as [`map_control_to_prompt`] for a raw flattened vector.
pub fn map_slice_to_prompt(values: &[f64], cfg: &MapperConfig) -> Result<GuidancePrompt> {
    map_control_to_prompt(&ControlVector::from_slice(values)?, cfg)
}

pub fn neutral_prompt(cfg: &MapperConfig) -> GuidancePrompt {
    GuidancePrompt {
        text: cfg.base_prompt.clone(),
        directives: Vec::new(),
    }
}

pub fn directive_report(prompt: &GuidancePrompt) -> Vec<DirectiveTag> {
    prompt.directives.clone()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cv(values: [f64; 7]) -> ControlVector {
        ControlVector::from_slice(&values).unwrap()
    }

    #[test]
    fn zero_vector_is_neutral() {
        let cfg = MapperConfig::default();
        let p = map_control_to_prompt(&ControlVector::ZERO, &cfg).unwrap();
        assert_eq!(p.text, cfg.base_prompt);
        assert!(p.directives.is_empty());
        assert!(directive_report(&p).is_empty());
        for tag in DirectiveTag::ALL {
            assert!(!p.text.contains(cfg.directive_text(tag)));
        }
        assert_eq!(p, neutral_prompt(&cfg));
    }

    #[test]
    fn negative_u_fires_u_low() {
        let cfg = MapperConfig::default();
        let p = map_control_to_prompt(&cv([-0.8, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]), &cfg).unwrap();
        assert_eq!(p.directives, vec![DirectiveTag::ULow]);
        assert_eq!(directive_report(&p), vec![DirectiveTag::ULow]);
        assert!(p.text.starts_with(&cfg.base_prompt));
        assert!(p.text.contains(DirectiveTag::ULow.default_text()));
    }

    #[test]
    fn irony_and_caution_fire_in_order() {
        let cfg = MapperConfig::default();
        let p = map_control_to_prompt(&cv([0.0, 0.5, 0.0, 0.0, 0.3, 0.0, 0.0]), &cfg).unwrap();
        assert_eq!(
            p.directives,
            vec![DirectiveTag::FIrony, DirectiveTag::KCaution]
        );
        let irony = p.text.find(DirectiveTag::FIrony.default_text()).unwrap();
        let caution = p.text.find(DirectiveTag::KCaution.default_text()).unwrap();
        assert!(irony < caution);
    }

    #[test]
    fn threshold_is_strict() {
        let cfg = MapperConfig::default();
        let p =
            map_control_to_prompt(&cv([0.25, -0.25, 0.25, 0.25, -0.25, 0.0, 0.0]), &cfg).unwrap();
        assert!(p.directives.is_empty());
    }

    #[test]
    fn all_channels_fire_in_fixed_order() {
        let cfg = MapperConfig::default();
        let p = map_control_to_prompt(&cv([1.0, 1.0, -1.0, 1.0, 0.0, -1.0, 0.0]), &cfg).unwrap();
        assert_eq!(
            p.directives,
            vec![
                DirectiveTag::UHigh,
                DirectiveTag::FIrony,
                DirectiveTag::FNarrative,
                DirectiveTag::FLayout,
                DirectiveTag::KCaution
            ]
        );
    }

    #[test]
    fn bad_slices_are_rejected() {
        let cfg = MapperConfig::default();
        assert!(matches!(
            map_slice_to_prompt(&[0.0; 5], &cfg),
            Err(Error::InvalidControl(_))
        ));
        assert!(matches!(
            map_slice_to_prompt(&[f64::INFINITY, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0], &cfg),
            Err(Error::InvalidControl(_))
        ));
    }

    #[test]
    fn config_validation() {
        assert!(MapperConfig::default().validate().is_ok());
        let mut cfg = MapperConfig::default();
        cfg.directives.set(DirectiveTag::FLayout, "  ");
        assert!(cfg.validate().is_err());
        let cfg = MapperConfig {
            threshold: 0.0,
            ..MapperConfig::default()
        };
        assert!(cfg.validate().is_err());
        let mut cfg = MapperConfig::default();
        cfg.base_prompt
            .push_str(DirectiveTag::FIrony.default_text());
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn directive_phrases_come_from_config() {
        let mut cfg = MapperConfig::default();
        cfg.directives.set(DirectiveTag::ULow, "CAREFUL");
        let p = map_control_to_prompt(&cv([-1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]), &cfg).unwrap();
        assert!(p.text.ends_with("- CAREFUL"));
    }

    proptest! {
        #[test]
        fn mapping_is_deterministic(values in proptest::array::uniform7(-2.0f64..2.0)) {
            let cfg = MapperConfig::default();
            let a = map_control_to_prompt(&cv(values), &cfg).unwrap();
            let b = map_control_to_prompt(&cv(values), &cfg).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn single_channel_activation_is_monotone(channel in 0usize..7, magnitude in 0.26f64..5.0, sign in proptest::bool::ANY) {
            let cfg = MapperConfig::default();
            let mut values = [0.0; 7];
            values[channel] = if sign { magnitude } else { -magnitude };
            let p = map_control_to_prompt(&cv(values), &cfg).unwrap();
            let expected = match channel {
                0 if sign => DirectiveTag::UHigh,
                0 => DirectiveTag::ULow,
                1 => DirectiveTag::FIrony,
                2 => DirectiveTag::FNarrative,
                3 => DirectiveTag::FLayout,
                _ => DirectiveTag::KCaution,
            };
            prop_assert_eq!(p.directives, vec![expected]);
        }
    }
}
