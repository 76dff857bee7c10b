use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// CTC output alphabet: blank, space, apostrophe, `a`–`z`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CharVocab {
    symbols: Vec<char>,
}

impl Default for CharVocab {
    fn default() -> Self {
        let mut symbols = vec![' ', '\''];
        symbols.extend('a'..='z');
        Self { symbols }
    }
}

impl CharVocab {
    pub const BLANK: usize = 0;
    /// Output classes including the blank.
    pub const SIZE: usize = 29;

    /// Output classes including the blank.
    pub fn size(&self) -> usize {
        self.symbols.len() + 1
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.chars()
            .map(|c| {
                let c = c.to_ascii_lowercase();
                self.symbols
                    .iter()
                    .position(|&s| s == c)
                    .map(|i| i + 1)
                    .ok_or_else(|| invalid(format!("character {c:?} is outside the CTC vocabulary")))
            })
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&i| i != Self::BLANK)
            .filter_map(|&i| self.symbols.get(i - 1))
            .collect()
    }
}

/// Ordered phoneme symbol list; ids are positions.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PhonemeInventory {
    pub symbols: Vec<String>,
}

impl PhonemeInventory {
    pub fn new(symbols: Vec<String>) -> Self {
        Self { symbols }
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn id(&self, symbol: &str) -> Option<usize> {
        self.symbols.iter().position(|s| s == symbol)
    }

    pub fn encode<S: AsRef<str>>(&self, symbols: &[S]) -> Result<Vec<usize>> {
        symbols
            .iter()
            .map(|s| {
                self.id(s.as_ref())
                    .ok_or_else(|| invalid(format!("unknown phoneme {:?}", s.as_ref())))
            })
            .collect()
    }

    /// Space-separated symbols, as accepted on the command line.
    pub fn parse(&self, text: &str) -> Result<Vec<usize>> {
        let parts: Vec<&str> = text.split_whitespace().collect();
        if parts.is_empty() {
            return Err(invalid("empty phoneme sequence"));
        }
        self.encode(&parts)
    }
}
