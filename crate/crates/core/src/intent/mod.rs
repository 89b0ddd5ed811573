//! Post text to control words.
//!
//! The pipeline is `tokenize -> parse_intent -> (analyze_sentiment) ->
//! resolve`. When the keyword decision tree finds no usable intent, the
//! author's mood selects a pre-configured scene instead.

mod lexicon;
mod parse;
mod resolve;
mod sentiment;
mod table;
mod tokenize;

use serde::{Deserialize, Serialize};

use crate::appliance::{ApplianceKind, ControlWord};

pub use lexicon::Lexicon;
pub use parse::{parse_intent, WINDOW};
pub use resolve::{resolve, DroppedIntent, Resolution};
pub use sentiment::{analyze_sentiment, Label, SentimentScore};
pub use table::{ActionClass, ApplianceSlot, LookupTable};
pub use tokenize::{tokenize, Token, TokenKind};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum IntentError {
    #[error("lookup table: {0}")]
    Table(String),
    #[error("sentiment lexicon: {0}")]
    Lexicon(String),
    #[error("reading {0}: {1}")]
    Io(String, String),
    #[error("invalid intent: {0}")]
    Intent(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum IntentAction {
    On,
    Off,
    SetLevel,
}

/// Structured device command extracted from text (or a scene entry).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Intent {
    pub device: ApplianceKind,
    pub action: IntentAction,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub level: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub location: Option<String>,
}

impl Intent {
    pub fn validate(&self) -> Result<(), IntentError> {
        match (self.action, self.level) {
            (IntentAction::SetLevel, Some(l)) if self.device.accepts(u32::from(l)) => Ok(()),
            (IntentAction::SetLevel, Some(l)) => Err(IntentError::Intent(format!(
                "level {l} outside 0..={} for {}",
                self.device.max_level(),
                self.device
            ))),
            (IntentAction::SetLevel, None) => Err(IntentError::Intent("SET_LEVEL without a level".into())),
            (_, Some(_)) => Err(IntentError::Intent("ON/OFF carry no level".into())),
            (_, None) => Ok(()),
        }
    }
}

/// Which branch produced the control words.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum PipelinePath {
    Nlp,
    Failsafe,
    /// No intent parsed and the fail-safe is switched off.
    FailsafeDisabled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProcessingTrace {
    pub text: String,
    pub tokens: Vec<Token>,
    pub intents: Vec<Intent>,
    pub sentiment: Option<SentimentScore>,
    pub path: PipelinePath,
    pub dropped: Vec<DroppedIntent>,
    pub words: Vec<ControlWord>,
}

/// Lookup table, lexicon and fail-safe switch bundled for `process_post`.
#[derive(Debug, Clone)]
pub struct IntentEngine {
    pub table: LookupTable,
    pub lexicon: Lexicon,
    pub failsafe_enabled: bool,
}

impl Default for IntentEngine {
    fn default() -> Self {
        Self { table: LookupTable::default(), lexicon: Lexicon::bundled(), failsafe_enabled: true }
    }
}

impl IntentEngine {
    pub fn new(table: LookupTable, lexicon: Lexicon) -> Self {
        Self { table, lexicon, failsafe_enabled: true }
    }

    pub fn process_post(&self, text: &str) -> (Vec<ControlWord>, ProcessingTrace) {
        process_post(text, &self.table, &self.lexicon, self.failsafe_enabled)
    }
}

/// Runs the whole pipeline on one post. Sentiment is only computed when the
/// decision tree produced no intent.
pub fn process_post(
    text: &str,
    table: &LookupTable,
    lexicon: &Lexicon,
    failsafe_enabled: bool,
) -> (Vec<ControlWord>, ProcessingTrace) {
    let tokens = tokenize(text, table, lexicon);
    let intents = parse_intent(&tokens, table);
    let (sentiment, path, resolution) = if !intents.is_empty() {
        let neutral = SentimentScore::neutral();
        (None, PipelinePath::Nlp, resolve(&intents, &neutral, table))
    } else if failsafe_enabled {
        let score = analyze_sentiment(&tokens);
        let res = resolve(&intents, &score, table);
        (Some(score), PipelinePath::Failsafe, res)
    } else {
        (None, PipelinePath::FailsafeDisabled, Resolution::default())
    };
    let trace = ProcessingTrace {
        text: text.to_string(),
        tokens,
        intents,
        sentiment,
        path,
        dropped: resolution.dropped,
        words: resolution.words.clone(),
    };
    (resolution.words, trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::appliance::Opcode;

    fn engine() -> IntentEngine {
        IntentEngine::default()
    }

    #[test]
    fn bedroom_light_example() {
        let (words, trace) = engine().process_post("turn on the bedroom light at 70%");
        assert_eq!(words, vec![ControlWord::new(1, 1, Opcode::SetLevel, 70)]);
        assert_eq!(trace.path, PipelinePath::Nlp);
        assert!(trace.sentiment.is_none());
    }

    #[test]
    fn mood_post_takes_failsafe() {
        let (words, trace) = engine().process_post("what a wonderful lovely day");
        assert_eq!(trace.path, PipelinePath::Failsafe);
        let s = trace.sentiment.unwrap();
        assert_eq!((s.positives, s.negatives, s.label), (2, 0, Label::Positive));
        assert_eq!(
            words,
            vec![ControlWord::new(1, 1, Opcode::SetLevel, 100), ControlWord::new(2, 1, Opcode::SetLevel, 100)]
        );
    }

    #[test]
    fn empty_post_is_neutral_failsafe() {
        let (words, trace) = engine().process_post("");
        assert!(words.is_empty());
        assert_eq!(trace.path, PipelinePath::Failsafe);
        assert_eq!(trace.sentiment.unwrap().label, Label::Neutral);
    }

    #[test]
    fn failsafe_can_be_switched_off() {
        let mut e = engine();
        e.failsafe_enabled = false;
        let (words, trace) = e.process_post("what a wonderful lovely day");
        assert!(words.is_empty());
        assert_eq!(trace.path, PipelinePath::FailsafeDisabled);
    }

    #[test]
    fn negative_mood_dims_lights_and_stops_fans() {
        let (words, _) = engine().process_post("terrible awful day, so tired");
        assert_eq!(
            words,
            vec![
                ControlWord::new(1, 1, Opcode::SetLevel, 30),
                ControlWord::new(1, 2, Opcode::Off, 0),
                ControlWord::new(2, 1, Opcode::SetLevel, 30),
                ControlWord::new(2, 2, Opcode::Off, 0),
            ]
        );
    }

    #[test]
    fn trace_serializes() {
        let (_, trace) = engine().process_post("Turn ON the light!");
        let json = serde_json::to_value(&trace).unwrap();
        assert_eq!(json["path"], "NLP");
        assert_eq!(json["tokens"][1]["kind"], "ACTION");
        assert_eq!(json["tokens"][1]["value"], "ON");
    }

    #[test]
    fn intent_validation() {
        let ok = Intent { device: ApplianceKind::Fan, action: IntentAction::SetLevel, level: Some(3), location: None };
        assert!(ok.validate().is_ok());
        let bad = Intent { level: Some(4), ..ok.clone() };
        assert!(bad.validate().is_err());
        let bad = Intent { action: IntentAction::On, ..ok };
        assert!(bad.validate().is_err());
    }
}
