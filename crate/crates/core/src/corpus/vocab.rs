use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{RelicError, Result};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const CLS: u32 = 2;
pub const MASK: u32 = 3;
pub const ENT_START: u32 = 4;
pub const ENT_END: u32 = 5;

pub const RESERVED: [&str; 6] = ["[PAD]", "[UNK]", "[CLS]", "[MASK]", "[E_s]", "[E_e]"];

/// Word vocabulary. Ids 0..6 are the reserved tokens in [`RESERVED`] order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED.len() || tokens[..RESERVED.len()] != RESERVED {
            return Err(RelicError::InvalidArgument(
                "vocabulary must start with the reserved tokens".into(),
            ));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(RelicError::InvalidArgument(format!("duplicate token `{t}`")));
            }
        }
        Ok(Vocab { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn lookup(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token_of(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Lowercased whitespace split; unknown words map to `[UNK]`. No `[CLS]`.
    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        text.split_whitespace()
            .map(|w| self.lookup(&w.to_lowercase()).unwrap_or(UNK))
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        fs::write(path, s).map_err(|e| RelicError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = fs::read_to_string(path).map_err(|e| RelicError::io(path, e))?;
        Vocab::from_tokens(s.lines().map(str::to_string).collect())
    }
}

/// Reserved tokens plus the `max_size - 6` most frequent lowercased words.
/// Frequency ties go to the lexicographically smaller word.
pub fn build_vocab<'a>(texts: impl IntoIterator<Item = &'a str>, max_size: usize) -> Result<Vocab> {
    if max_size < RESERVED.len() {
        return Err(RelicError::InvalidArgument(format!(
            "max_size {max_size} is smaller than the {} reserved tokens",
            RESERVED.len()
        )));
    }
    let mut counts: HashMap<String, u64> = HashMap::new();
    for text in texts {
        for w in text.split_whitespace() {
            *counts.entry(w.to_lowercase()).or_default() += 1;
        }
    }
    for r in RESERVED {
        counts.remove(r);
    }
    let mut ranked: Vec<(String, u64)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
    tokens.extend(
        ranked
            .into_iter()
            .take(max_size - RESERVED.len())
            .map(|(w, _)| w),
    );
    Vocab::from_tokens(tokens)
}
