//! Closed-vocabulary tokenizer and the concept registry that marks which
//! prompt positions are class nouns and which are personalized tokens.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const START_TOKEN: &str = "<start>";

/// Class nouns, each standing for one procedural shape family.
pub const CLASS_NOUNS: [&str; 5] = ["dog", "duck", "cat", "backpack", "teddybear"];

/// Named palette colors used by the generic (pre-training) data.
pub const COLOR_WORDS: [&str; 8] = [
    "red", "orange", "yellow", "green", "cyan", "blue", "purple", "pink",
];

const FILLER_WORDS: [&str; 31] = [
    "a", "an", "the", "photo", "picture", "image", "rendering", "drawing", "of", "in", "on",
    "at", "near", "and", "park", "beach", "snow", "street", "table", "room", "city", "forest",
    "night", "bright", "dark", "close", "up", "my", "good", "cute", "small",
];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    words: Vec<String>,
    concept_nouns: Vec<String>,
    personalized: Vec<String>,
    max_personalized: usize,
}

impl Vocabulary {
    /// The standard desk-scale vocabulary: start token, filler words, color
    /// words and class nouns (45 words) plus `max_personalized` free slots.
    pub fn standard(max_personalized: usize) -> Self {
        let mut words = vec![START_TOKEN.to_string()];
        words.extend(FILLER_WORDS.iter().map(|s| s.to_string()));
        words.extend(COLOR_WORDS.iter().map(|s| s.to_string()));
        words.extend(CLASS_NOUNS.iter().map(|s| s.to_string()));
        Self {
            words,
            concept_nouns: CLASS_NOUNS.iter().map(|s| s.to_string()).collect(),
            personalized: Vec::new(),
            max_personalized,
        }
    }

    /// Rows of the embedding table: base words plus every personalized slot.
    pub fn table_size(&self) -> usize {
        self.words.len() + self.max_personalized
    }

    pub fn base_words(&self) -> &[String] {
        &self.words
    }

    pub fn concept_nouns(&self) -> &[String] {
        &self.concept_nouns
    }

    pub fn personalized(&self) -> &[String] {
        &self.personalized
    }

    pub fn is_concept_noun(&self, word: &str) -> bool {
        self.concept_nouns.iter().any(|w| w == word)
    }

    /// Registers a personalized token, returning its table row. Registering
    /// an already-known token is a no-op.
    pub fn register_personalized(&mut self, token: &str) -> Result<usize> {
        if let Some(id) = self.personalized_id(token) {
            return Ok(id);
        }
        if self.words.iter().any(|w| w == token) {
            return Err(Error::config(
                "personalized_token",
                format!("`{token}` collides with a vocabulary word"),
            ));
        }
        if token.is_empty() || token.contains(char::is_whitespace) {
            return Err(Error::config("personalized_token", format!("invalid token `{token}`")));
        }
        if self.personalized.len() >= self.max_personalized {
            return Err(Error::config(
                "personalized_token",
                format!("all {} personalized slots are in use", self.max_personalized),
            ));
        }
        self.personalized.push(token.to_string());
        Ok(self.words.len() + self.personalized.len() - 1)
    }

    pub fn personalized_id(&self, token: &str) -> Option<usize> {
        self.personalized
            .iter()
            .position(|p| p == token)
            .map(|i| self.words.len() + i)
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.words
            .iter()
            .position(|w| w == word)
            .or_else(|| self.personalized_id(word))
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        if id < self.words.len() {
            Some(&self.words[id])
        } else {
            self.personalized
                .get(id - self.words.len())
                .map(String::as_str)
        }
    }

    /// Tokenizes `prompt` into ids with the start token prepended. An empty
    /// prompt is an error here; the unconditional sequence is built with
    /// [`Vocabulary::unconditional`].
    pub fn tokenize(&self, prompt: &str, max_len: usize) -> Result<TokenSequence> {
        let words: Vec<&str> = prompt.split_whitespace().collect();
        if words.is_empty() {
            return Err(Error::EmptyPrompt);
        }
        let unknown: Vec<String> = words
            .iter()
            .filter(|w| self.id(w).is_none())
            .map(|w| w.to_string())
            .collect();
        if !unknown.is_empty() {
            return Err(Error::UnknownToken(unknown));
        }
        if words.len() + 1 > max_len {
            return Err(Error::Range(format!(
                "prompt has {} tokens, maximum is {}",
                words.len() + 1,
                max_len
            )));
        }
        let mut ids = vec![0];
        let mut concept = Vec::new();
        let mut personalized = Vec::new();
        for (i, w) in words.iter().enumerate() {
            let pos = i + 1;
            ids.push(self.id(w).expect("checked above"));
            if self.personalized_id(w).is_some() {
                personalized.push(pos);
            } else if self.is_concept_noun(w) {
                concept.push(pos);
            }
        }
        Ok(TokenSequence {
            ids,
            concept_indices: concept,
            personalized_indices: personalized,
            raw_text: prompt.to_string(),
        })
    }

    pub fn unconditional(&self) -> TokenSequence {
        TokenSequence {
            ids: vec![0],
            concept_indices: Vec::new(),
            personalized_indices: Vec::new(),
            raw_text: String::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    /// Positions of class-noun tokens.
    pub concept_indices: Vec<usize>,
    /// Positions of personalized tokens.
    pub personalized_indices: Vec<usize>,
    pub raw_text: String,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Each personalized position paired with the concept noun immediately
    /// following it ("V1 dog").
    pub fn pairing(&self) -> Result<Vec<(usize, usize)>> {
        self.personalized_indices
            .iter()
            .map(|&p| {
                if self.concept_indices.contains(&(p + 1)) {
                    Ok((p, p + 1))
                } else {
                    Err(Error::Pairing(p))
                }
            })
            .collect()
    }
}

/// Frozen sinusoidal position codes, `[max_len, dim]` row-major.
pub fn position_codes(max_len: usize, dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; max_len * dim];
    let half = dim / 2;
    for pos in 0..max_len {
        for i in 0..half {
            let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            out[pos * dim + i] = (pos as f64 * freq).sin();
            out[pos * dim + half + i] = (pos as f64 * freq).cos();
        }
    }
    out
}
