use std::collections::BTreeSet;
use std::path::Path;

use super::IntentError;

/// Plain-text sentiment lexicon with `[positive]` and `[negative]` sections.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Lexicon {
    pub positive: BTreeSet<String>,
    pub negative: BTreeSet<String>,
}

const BUNDLED_LEXICON: &str = include_str!("../../data/sentiment.txt");

#[derive(Clone, Copy)]
enum Section {
    None,
    Positive,
    Negative,
}

impl Lexicon {
    pub fn bundled() -> Self {
        Self::parse(BUNDLED_LEXICON).expect("bundled lexicon is valid")
    }

    /// Blank lines and `#` comments are skipped. Words outside a section
    /// are an error.
    pub fn parse(text: &str) -> Result<Self, IntentError> {
        let mut lex = Lexicon::default();
        let mut section = Section::None;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            match line.to_lowercase().as_str() {
                "[positive]" => section = Section::Positive,
                "[negative]" => section = Section::Negative,
                word => match section {
                    Section::Positive => {
                        lex.positive.insert(word.to_string());
                    }
                    Section::Negative => {
                        lex.negative.insert(word.to_string());
                    }
                    Section::None => {
                        return Err(IntentError::Lexicon(format!("line {}: word before any section", lineno + 1)))
                    }
                },
            }
        }
        if let Some(w) = lex.positive.intersection(&lex.negative).next() {
            return Err(IntentError::Lexicon(format!("{w:?} listed as both positive and negative")));
        }
        Ok(lex)
    }

    pub fn load(path: &Path) -> Result<Self, IntentError> {
        let text = std::fs::read_to_string(path).map_err(|e| IntentError::Io(path.display().to_string(), e.to_string()))?;
        Self::parse(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_has_about_fifty_each() {
        let lex = Lexicon::bundled();
        assert!((45..=60).contains(&lex.positive.len()), "{}", lex.positive.len());
        assert!((45..=60).contains(&lex.negative.len()), "{}", lex.negative.len());
        assert!(lex.positive.contains("wonderful"));
        assert!(lex.negative.contains("terrible"));
    }

    #[test]
    fn sections_and_errors() {
        let lex = Lexicon::parse("[positive]\nYay\n\n[negative]\nboo\n").unwrap();
        assert!(lex.positive.contains("yay"));
        assert!(lex.negative.contains("boo"));
        assert!(Lexicon::parse("orphan\n").is_err());
        assert!(Lexicon::parse("[positive]\nmeh\n[negative]\nmeh\n").is_err());
    }
}
