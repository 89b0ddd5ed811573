use serde::{Deserialize, Serialize};

use super::{Token, TokenKind};

/// Scores above this are POSITIVE, below its negation NEGATIVE.
pub const LABEL_THRESHOLD: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Label {
    Positive,
    Negative,
    Neutral,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SentimentScore {
    pub positives: u32,
    pub negatives: u32,
    pub score: f64,
    pub label: Label,
}

impl SentimentScore {
    pub fn from_counts(positives: u32, negatives: u32) -> Self {
        let total = positives + negatives;
        let score = if total == 0 { 0.0 } else { (f64::from(positives) - f64::from(negatives)) / f64::from(total) };
        let label = if score > LABEL_THRESHOLD {
            Label::Positive
        } else if score < -LABEL_THRESHOLD {
            Label::Negative
        } else {
            Label::Neutral
        };
        Self { positives, negatives, score, label }
    }

    pub fn neutral() -> Self {
        Self::from_counts(0, 0)
    }
}

pub fn analyze_sentiment(tokens: &[Token]) -> SentimentScore {
    let count = |kind: TokenKind| tokens.iter().filter(|t| t.kind == kind).count() as u32;
    SentimentScore::from_counts(count(TokenKind::SentimentPos), count(TokenKind::SentimentNeg))
}
