use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text;

pub const PAD: u32 = 0;
pub const CLS: u32 = 1;
pub const SEP: u32 = 2;
pub const MASK: u32 = 3;
pub const UNK: u32 = 4;
pub const N_DYNAMIC: usize = 16;
pub const FIRST_DYNAMIC: u32 = 5;
/// First id available to ordinary words.
pub const FIRST_WORD: u32 = FIRST_DYNAMIC + N_DYNAMIC as u32;

/// Words added to every vocabulary besides the world lexicon (prompt
/// scaffolding).
pub const PROMPT_WORDS: &[&str] = &["answer", ":"];

pub fn dynamic_token(k: usize) -> String {
    format!("[V{}]", k + 1)
}

/// Closed token vocabulary with reserved special ids and the mapping from
/// answers to token ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    tokens: Vec<String>,
    answers: Vec<String>,
    #[serde(skip)]
    ids: BTreeMap<String, u32>,
    #[serde(skip)]
    answer_token_ids: Vec<u32>,
}

impl Vocabulary {
    /// Specials, then `[V1]..[V16]`, then `words` in order (duplicates
    /// dropped). Every answer must be a single word of the vocabulary.
    pub fn new<S: AsRef<str>>(words: &[S], answers: &[String]) -> Result<Self> {
        let mut tokens: Vec<String> =
            ["[PAD]", "[CLS]", "[SEP]", text::MASK, "[UNK]"].iter().map(|s| s.to_string()).collect();
        tokens.extend((0..N_DYNAMIC).map(dynamic_token));
        for w in words {
            let w = w.as_ref();
            if !tokens.iter().any(|t| t == w) {
                tokens.push(w.to_string());
            }
        }
        Self::from_parts(tokens, answers.to_vec())
    }

    pub fn from_parts(tokens: Vec<String>, answers: Vec<String>) -> Result<Self> {
        let mut v = Self { tokens, answers, ids: BTreeMap::new(), answer_token_ids: Vec::new() };
        v.reindex()?;
        Ok(v)
    }

    /// Rebuilds lookup tables (needed after deserialization).
    pub fn reindex(&mut self) -> Result<()> {
        self.ids.clear();
        for (i, t) in self.tokens.iter().enumerate() {
            if self.ids.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Input(format!("duplicate vocabulary token `{t}`")));
            }
        }
        if self.tokens.len() < FIRST_WORD as usize || self.tokens[MASK as usize] != text::MASK {
            return Err(Error::Input("vocabulary is missing reserved tokens".into()));
        }
        let mut missing = Vec::new();
        self.answer_token_ids.clear();
        for a in &self.answers {
            let toks = text::tokenize(a);
            match (toks.len(), toks.first().and_then(|t| self.ids.get(t))) {
                (1, Some(&id)) if id >= FIRST_WORD => self.answer_token_ids.push(id),
                _ => missing.push(a.clone()),
            }
        }
        if !missing.is_empty() {
            return Err(Error::MissingAnswerTokens(missing));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// The answer set C in index order.
    pub fn answers(&self) -> &[String] {
        &self.answers
    }

    pub fn answer_index(&self, answer: &str) -> Option<usize> {
        self.answers.iter().position(|a| a == answer)
    }

    /// Token id of each answer, aligned with [`Vocabulary::answers`].
    pub fn answer_token_ids(&self) -> &[u32] {
        &self.answer_token_ids
    }

    pub fn is_dynamic(id: u32) -> bool {
        (FIRST_DYNAMIC..FIRST_WORD).contains(&id)
    }

    /// Specials and dynamic prompt tokens are never MLM targets.
    pub fn is_maskable(id: u32) -> bool {
        id >= FIRST_WORD
    }

    /// Lowercased word ids; unknown words map to `[UNK]`.
    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        text::tokenize(text).iter().map(|t| self.id(t).unwrap_or(UNK)).collect()
    }

    pub fn detokenize(&self, ids: &[u32]) -> String {
        let toks: Vec<&str> = ids.iter().map(|&i| self.token(i)).collect();
        text::detokenize(&toks)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::WorldConfig;
    use alloc::vec;

    fn vocab() -> Vocabulary {
        let w = WorldConfig::default();
        let mut words = w.lexicon();
        words.extend(PROMPT_WORDS.iter().map(|s| s.to_string()));
        Vocabulary::new(&words, &w.answer_vocabulary()).unwrap()
    }

    #[test]
    fn reserved_layout() {
        let v = vocab();
        assert_eq!(v.id("[PAD]"), Some(PAD));
        assert_eq!(v.id("[MASK]"), Some(MASK));
        assert_eq!(v.id("[V1]"), Some(FIRST_DYNAMIC));
        assert_eq!(v.id("[V16]"), Some(FIRST_WORD - 1));
        assert_eq!(v.answer_token_ids().len(), 18);
    }

    #[test]
    fn tokenize_maps_specials_and_unknowns() {
        let v = vocab();
        let ids = v.tokenize("the ball is [MASK].");
        assert_eq!(ids, vec![v.id("the").unwrap(), v.id("ball").unwrap(), v.id("is").unwrap(), MASK, v.id(".").unwrap()]);
        assert_eq!(v.tokenize("the giraffe"), vec![v.id("the").unwrap(), UNK]);
        assert!(v.tokenize("").is_empty());
        assert_eq!(v.tokenize("[V3]"), vec![FIRST_DYNAMIC + 2]);
    }

    #[test]
    fn missing_answer_token_is_reported() {
        let err = Vocabulary::new(&["red"], &["red".to_string(), "giraffe".to_string()]).unwrap_err();
        assert_eq!(err, Error::MissingAnswerTokens(vec!["giraffe".to_string()]));
    }

    #[test]
    fn serde_round_trip_needs_reindex() {
        let v = vocab();
        let json = serde_json::to_string(&v).unwrap();
        let mut back: Vocabulary = serde_json::from_str(&json).unwrap();
        back.reindex().unwrap();
        assert_eq!(back, v);
    }
}
