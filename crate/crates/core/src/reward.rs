//! Verifiable rewards: answer accuracy, tag format, and their weighted sum
//! `R = R_acc + alpha * R_format`.
//!
//! A completion is well formed when it is exactly
//! `<think> body </think> <answer> body </answer>` with an optional trailing
//! `<eos>`, every structural tag appears once, bodies contain no tags or
//! `<eos>`, and the answer body is non-empty.
//!
//! Accuracy extraction only needs a single `<answer> ... </answer>` pair in
//! order, so a broken think structure still earns accuracy credit.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::tasks::{TokenId, Vocab};
use crate::{LabError, Result};

pub const DEFAULT_ALPHA: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardWeights {
    pub alpha: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
        }
    }
}

impl RewardWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(LabError::Config(format!(
                "reward alpha must be finite and >= 0, got {}",
                self.alpha
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub acc: f64,
    pub format: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ParsedCompletion {
    /// Body between `<think>` and `</think>`, exclusive of the tags.
    pub think_span: Option<Range<usize>>,
    /// Body between `<answer>` and `</answer>`, exclusive of the tags.
    pub answer_span: Option<Range<usize>>,
    pub well_formed: bool,
}

fn single(tokens: &[TokenId], tag: TokenId) -> Option<usize> {
    let mut hits = tokens
        .iter()
        .enumerate()
        .filter(|(_, &t)| t == tag)
        .map(|(i, _)| i);
    match (hits.next(), hits.next()) {
        (Some(i), None) => Some(i),
        _ => None,
    }
}

fn pair(tokens: &[TokenId], open: TokenId, close: TokenId) -> Option<Range<usize>> {
    let o = single(tokens, open)?;
    let c = single(tokens, close)?;
    (o < c).then_some(o + 1..c)
}

/// Never fails; malformation is reported through the returned fields.
pub fn parse_completion(tokens: &[TokenId]) -> ParsedCompletion {
    let think_span = pair(tokens, Vocab::THINK_OPEN, Vocab::THINK_CLOSE);
    let answer_span = pair(tokens, Vocab::ANSWER_OPEN, Vocab::ANSWER_CLOSE);
    let well_formed = match (&think_span, &answer_span) {
        (Some(think), Some(answer)) => {
            let body_ok = |r: &Range<usize>| {
                tokens[r.clone()]
                    .iter()
                    .all(|&t| !Vocab::is_structural(t) && t != Vocab::EOS)
            };
            let end = answer.end + 1;
            think.start == 1
                && answer.start == think.end + 2
                && !answer.is_empty()
                && body_ok(think)
                && body_ok(answer)
                && (end == tokens.len() || (end + 1 == tokens.len() && tokens[end] == Vocab::EOS))
        }
        _ => false,
    };
    ParsedCompletion {
        think_span,
        answer_span,
        well_formed,
    }
}

pub fn format_reward(tokens: &[TokenId]) -> f64 {
    if parse_completion(tokens).well_formed {
        1.0
    } else {
        0.0
    }
}

/// The answer digit, if the answer body holds exactly one digit once padding
/// and separators are dropped.
pub fn extract_answer(tokens: &[TokenId]) -> Option<u8> {
    let span = parse_completion(tokens).answer_span?;
    let mut content = tokens[span]
        .iter()
        .filter(|&&t| !Vocab::is_whitespace_role(t));
    match (content.next(), content.next()) {
        (Some(&t), None) => Vocab::digit_value(t),
        _ => None,
    }
}

pub fn accuracy_reward(tokens: &[TokenId], ground_truth: u8) -> f64 {
    if extract_answer(tokens) == Some(ground_truth) {
        1.0
    } else {
        0.0
    }
}

pub fn total_reward(
    tokens: &[TokenId],
    ground_truth: u8,
    weights: RewardWeights,
) -> RewardBreakdown {
    let acc = accuracy_reward(tokens, ground_truth);
    let format = format_reward(tokens);
    RewardBreakdown {
        acc,
        format,
        total: acc + weights.alpha * format,
    }
}
