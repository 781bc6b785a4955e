use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TokenId(pub usize);

impl fmt::Display for TokenId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

pub const PAD: TokenId = TokenId(0);

const FILLERS: &[&str] = &[
    "photo", "of", "the", "a", "an", "and", "with", ",", "in", "on", "picture", "scene", "image",
    "next", "to",
];
pub const COLOR_WORDS: &[&str] = &[
    "red", "green", "blue", "yellow", "cyan", "magenta", "orange", "purple", "white", "black",
    "gray", "pink",
];
pub const CATEGORY_WORDS: &[&str] = &[
    "disc", "square", "triangle", "ball", "box", "toy", "dog", "cat", "chair", "cup",
];
pub const TRIGGER_COUNT: usize = 16;
const RESERVED_COUNT: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenClass {
    Pad,
    Filler,
    Color,
    Category,
    Trigger,
    Reserved,
}

/// Word-level vocabulary: padding, filler words, colors, categories, one
/// reserved trigger token `<cN>` per concept slot.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    words: Vec<String>,
    classes: Vec<TokenClass>,
    index: HashMap<String, TokenId>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::standard()
    }
}

impl Vocabulary {
    pub fn standard() -> Self {
        let mut words = vec!["<pad>".to_string()];
        let mut classes = vec![TokenClass::Pad];
        let mut add = |list: Vec<String>, class: TokenClass| {
            for w in list {
                words.push(w);
                classes.push(class);
            }
        };
        add(FILLERS.iter().map(|s| s.to_string()).collect(), TokenClass::Filler);
        add(COLOR_WORDS.iter().map(|s| s.to_string()).collect(), TokenClass::Color);
        add(CATEGORY_WORDS.iter().map(|s| s.to_string()).collect(), TokenClass::Category);
        add((0..TRIGGER_COUNT).map(|i| format!("<c{i}>")).collect(), TokenClass::Trigger);
        add((0..RESERVED_COUNT).map(|i| format!("<r{i}>")).collect(), TokenClass::Reserved);
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), TokenId(i)))
            .collect();
        Self {
            words,
            classes,
            index,
        }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Result<TokenId> {
        self.index
            .get(word)
            .copied()
            .ok_or_else(|| Error::UnknownWord(word.to_string()))
    }

    pub fn word(&self, id: TokenId) -> Result<&str> {
        self.words
            .get(id.0)
            .map(String::as_str)
            .ok_or(Error::UnknownTokenId(id.0))
    }

    pub fn class(&self, id: TokenId) -> TokenClass {
        self.classes[id.0]
    }

    pub fn trigger(&self, slot: usize) -> Result<TokenId> {
        self.id(&format!("<c{slot}>"))
    }

    pub fn ids_of(&self, class: TokenClass) -> Vec<TokenId> {
        (0..self.len())
            .filter(|&i| self.classes[i] == class)
            .map(TokenId)
            .collect()
    }

    /// Whitespace tokenizer; commas split off as their own token.
    pub fn tokenize(&self, text: &str) -> Result<Vec<TokenId>> {
        text.replace(',', " , ")
            .split_whitespace()
            .map(|w| self.id(w))
            .collect()
    }

    pub fn detokenize(&self, ids: &[TokenId]) -> Result<String> {
        let words = ids
            .iter()
            .map(|&i| self.word(i))
            .collect::<Result<Vec<_>>>()?;
        Ok(words.join(" "))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dense_ids_and_disjoint_triggers() {
        let v = Vocabulary::standard();
        assert_eq!(v.len(), 64);
        let triggers = v.ids_of(TokenClass::Trigger);
        let cats = v.ids_of(TokenClass::Category);
        assert_eq!(triggers.len(), TRIGGER_COUNT);
        assert!(triggers.iter().all(|t| !cats.contains(t)));
        assert_eq!(v.word(PAD).unwrap(), "<pad>");
    }

    #[test]
    fn tokenize_splits_commas() {
        let v = Vocabulary::standard();
        let ids = v.tokenize("photo of the <c0> and square, a <c0>").unwrap();
        assert_eq!(ids.len(), 9);
        assert_eq!(ids[3], ids[8]);
        assert_eq!(v.word(ids[6]).unwrap(), ",");
        assert!(v.tokenize("photo of a zebra").is_err());
    }
}
