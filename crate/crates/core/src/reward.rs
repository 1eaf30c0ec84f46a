//! Brier rewards and the guard-rail scorer.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{ContentToken, Response};

/// Charged when no probability could be parsed during training.
pub const STRICT_MISSING_REWARD: f64 = -1.0;
/// Charged when no probability could be parsed during evaluation.
pub const SOFT_MISSING_LOSS: f64 = 0.25;

/// `-(p_hat - y)^2`.
pub fn brier_reward(p_hat: f64, y: u8) -> Result<f64> {
    if !(0.0..=1.0).contains(&p_hat) {
        return Err(Error::Domain(p_hat));
    }
    let d = p_hat - f64::from(y);
    Ok(-(d * d))
}

pub fn strict_reward(parsed: Option<f64>, y: u8) -> f64 {
    match parsed {
        Some(p) => brier_reward(p, y).unwrap_or(STRICT_MISSING_REWARD),
        None => STRICT_MISSING_REWARD,
    }
}

pub fn soft_brier_loss(parsed: Option<f64>, y: u8) -> f64 {
    match parsed.and_then(|p| brier_reward(p, y).ok()) {
        Some(r) => -r,
        None => SOFT_MISSING_LOSS,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GuardrailAssessment {
    pub contains_non_english: bool,
    pub contains_gibberish: bool,
    pub explains_answer: bool,
    pub non_english_proportion: f64,
    pub gibberish_proportion: f64,
    pub explanation_quality: f64,
}

impl GuardrailAssessment {
    /// Builds an assessment from proportions, deriving the flags.
    pub fn from_proportions(non_english: f64, gibberish: f64, explanation: f64) -> Self {
        Self {
            contains_non_english: non_english > 0.0,
            contains_gibberish: gibberish > 0.0,
            explains_answer: explanation > 0.0,
            non_english_proportion: non_english,
            gibberish_proportion: gibberish,
            explanation_quality: explanation,
        }
    }
}

pub fn assess_guardrails(r: &Response) -> GuardrailAssessment {
    let len = r.content.len();
    if len == 0 {
        return GuardrailAssessment::from_proportions(0.0, 0.0, 0.0);
    }
    let frac = |t| r.count(t) as f64 / len as f64;
    GuardrailAssessment::from_proportions(
        frac(ContentToken::NonEnglish),
        frac(ContentToken::Gibberish),
        frac(ContentToken::Rationale),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PenaltyConfig {
    pub lambda_lang: f64,
    pub lambda_gib: f64,
    pub lambda_miss: f64,
    pub lambda_exp: f64,
    pub input_truncation_chars: usize,
}

impl Default for PenaltyConfig {
    fn default() -> Self {
        Self {
            lambda_lang: 0.3,
            lambda_gib: 0.3,
            lambda_miss: 0.1,
            lambda_exp: 0.05,
            input_truncation_chars: 16_000,
        }
    }
}

impl PenaltyConfig {
    /// All penalties off; the total reward reduces to the strict Brier reward.
    pub fn disabled() -> Self {
        Self {
            lambda_lang: 0.0,
            lambda_gib: 0.0,
            lambda_miss: 0.0,
            lambda_exp: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let lambdas = [self.lambda_lang, self.lambda_gib, self.lambda_miss, self.lambda_exp];
        if lambdas.iter().any(|l| !(*l >= 0.0) || !l.is_finite()) {
            return Err(Error::InvalidArgument("penalty lambdas must be finite and >= 0".into()));
        }
        if self.input_truncation_chars == 0 {
            return Err(Error::InvalidArgument("input_truncation_chars must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub brier_reward: f64,
    pub lang_penalty: f64,
    pub gib_penalty: f64,
    pub miss_penalty: f64,
    pub exp_bonus: f64,
    pub zeroed: bool,
    pub total: f64,
}

/// Training reward: strict Brier plus guard-rail terms, or exactly zero when
/// the response failed schema validation.
pub fn total_reward(
    parsed: Option<f64>,
    y: u8,
    g: &GuardrailAssessment,
    cfg: &PenaltyConfig,
    schema_valid: bool,
) -> RewardBreakdown {
    let brier = strict_reward(parsed, y);
    if !schema_valid {
        return RewardBreakdown {
            brier_reward: brier,
            lang_penalty: 0.0,
            gib_penalty: 0.0,
            miss_penalty: 0.0,
            exp_bonus: 0.0,
            zeroed: true,
            total: 0.0,
        };
    }
    let lang_penalty = -cfg.lambda_lang * g.non_english_proportion;
    let gib_penalty = -cfg.lambda_gib * g.gibberish_proportion;
    let miss_penalty = if g.explains_answer { 0.0 } else { -cfg.lambda_miss };
    let exp_bonus = cfg.lambda_exp * g.explanation_quality;
    RewardBreakdown {
        brier_reward: brier,
        lang_penalty,
        gib_penalty,
        miss_penalty,
        exp_bonus,
        zeroed: false,
        total: brier + lang_penalty + gib_penalty + miss_penalty + exp_bonus,
    }
}

/// Keeps at most `input_truncation_chars` characters (not bytes).
pub fn truncate_input<'a>(payload: &'a str, cfg: &PenaltyConfig) -> &'a str {
    match payload.char_indices().nth(cfg.input_truncation_chars) {
        Some((byte, _)) => &payload[..byte],
        None => payload,
    }
}
