use serde::{Deserialize, Serialize};

use super::{ActionClass, Lexicon, LookupTable};
use crate::appliance::ApplianceKind;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TokenKind {
    Device(ApplianceKind),
    Action(ActionClass),
    Level(u32),
    Location,
    Negation,
    SentimentPos,
    SentimentNeg,
    Other,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Token {
    pub surface: String,
    #[serde(flatten)]
    pub kind: TokenKind,
}

impl Token {
    pub fn is_device(&self) -> bool {
        matches!(self.kind, TokenKind::Device(_))
    }
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || matches!(c, '\'' | '%' | '#' | '@')
}

/// Splits one whitespace/punctuation-delimited chunk into bare words.
/// `70%` stays whole so the percent attaches to its number.
fn words_of(chunk: &str, out: &mut Vec<String>) {
    let stripped = chunk.trim_start_matches(['#', '@']);
    if let Some(num) = stripped.strip_suffix('%') {
        if !num.is_empty() && num.chars().all(|c| c.is_ascii_digit()) {
            out.push(stripped.to_string());
            return;
        }
    }
    for piece in stripped.split(['%', '#', '@']) {
        let piece = piece.trim_matches('\'');
        if !piece.is_empty() {
            out.push(piece.to_string());
        }
    }
}

fn parse_number(s: &str) -> Option<u32> {
    if s.is_empty() || !s.chars().all(|c| c.is_ascii_digit()) {
        return None;
    }
    // Saturate instead of failing on absurdly long digit runs.
    Some(s.parse::<u64>().map_or(u32::MAX, |n| n.min(u64::from(u32::MAX)) as u32))
}

fn classify(word: &str, table: &LookupTable, lexicon: &Lexicon) -> TokenKind {
    if let Some(kind) = table.devices.get(word) {
        return TokenKind::Device(*kind);
    }
    if let Some(action) = table.actions.get(word) {
        return TokenKind::Action(*action);
    }
    if table.locations.contains_key(word) {
        return TokenKind::Location;
    }
    if let Some(level) = table.fan_levels.get(word) {
        return TokenKind::Level(u32::from(*level));
    }
    if table.negations.iter().any(|n| n == word) {
        return TokenKind::Negation;
    }
    if let Some(n) = parse_number(word.strip_suffix('%').unwrap_or(word)) {
        return TokenKind::Level(n);
    }
    if lexicon.positive.contains(word) {
        return TokenKind::SentimentPos;
    }
    if lexicon.negative.contains(word) {
        return TokenKind::SentimentNeg;
    }
    TokenKind::Other
}

/// Lowercases, strips `#`/`@` prefixes and classifies every word.
pub fn tokenize(text: &str, table: &LookupTable, lexicon: &Lexicon) -> Vec<Token> {
    let normalized = text.replace(['\u{2019}', '\u{2018}'], "'").to_lowercase();
    let mut words = Vec::new();
    for chunk in normalized.split(|c: char| !is_word_char(c)) {
        if !chunk.is_empty() {
            words_of(chunk, &mut words);
        }
    }
    words
        .into_iter()
        .map(|surface| {
            let kind = classify(&surface, table, lexicon);
            let surface = match kind {
                TokenKind::Level(_) => surface.trim_end_matches('%').to_string(),
                _ => surface,
            };
            Token { surface, kind }
        })
        .collect()
}
