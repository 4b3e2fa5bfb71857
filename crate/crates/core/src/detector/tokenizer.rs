//! Word-level prompt tokenizer with a small fixed vocabulary.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;

const WORDS: &[&str] = &[
    "lesion", "tumor", "nodule", "mass", "cyst", "bright", "dark", "hyperechoic", "hypoechoic", "anechoic",
    "echogenic", "region", "area", "spot", "thyroid", "breast", "kidney", "liver", "the", "a", "of", "in",
    "round", "oval", "irregular", "small", "large", "segment", "find", "ultrasound",
];

const ALIASES: &[(&str, &str)] = &[
    ("tumour", "tumor"),
    ("lesions", "lesion"),
    ("tumors", "tumor"),
    ("tumours", "tumor"),
    ("nodules", "nodule"),
    ("masses", "mass"),
    ("cysts", "cyst"),
    ("an", "a"),
];

/// Vocabulary ids: `0` is padding, `1` is UNK, words follow.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub words: Vec<String>,
    pub aliases: Vec<(String, String)>,
    #[serde(skip)]
    index: HashMap<String, u32>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::new(
            WORDS.iter().map(|w| w.to_string()).collect(),
            ALIASES.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect(),
        )
    }
}

impl Vocabulary {
    pub fn new(words: Vec<String>, aliases: Vec<(String, String)>) -> Self {
        let mut v = Self {
            words,
            aliases,
            index: HashMap::new(),
        };
        v.reindex();
        v
    }

    /// Rebuilds the lookup table; needed after deserializing.
    pub fn reindex(&mut self) {
        self.index = self
            .words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as u32 + 2))
            .collect();
        let aliases: Vec<(String, u32)> = self
            .aliases
            .iter()
            .filter_map(|(a, w)| self.index.get(w).map(|&id| (a.clone(), id)))
            .collect();
        self.index.extend(aliases);
    }

    /// Number of ids including PAD and UNK.
    pub fn len(&self) -> usize {
        self.words.len() + 2
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, word: &str) -> u32 {
        self.index.get(word).copied().unwrap_or(UNK_ID)
    }

    pub fn word(&self, id: u32) -> &str {
        match id {
            PAD_ID => "<pad>",
            UNK_ID => "<unk>",
            i => self.words.get(i as usize - 2).map(String::as_str).unwrap_or("<unk>"),
        }
    }

    /// Lowercases, splits on anything that is not a letter or digit and looks
    /// every word up, falling back to UNK.
    pub fn tokenize(&self, text: &str) -> Result<PromptTokens> {
        let words: Vec<String> = text
            .split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty())
            .map(str::to_lowercase)
            .collect();
        if words.is_empty() {
            return Err(Error::Prompt(format!("prompt {text:?} contains no words")));
        }
        Ok(PromptTokens {
            ids: words.iter().map(|w| self.id(w)).collect(),
            words,
            text: text.to_string(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTokens {
    pub ids: Vec<u32>,
    pub words: Vec<String>,
    pub text: String,
}

impl PromptTokens {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn all_unknown(&self) -> bool {
        self.ids.iter().all(|&i| i == UNK_ID)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_words() {
        let v = Vocabulary::default();
        let t = v.tokenize("bright lesion").unwrap();
        assert_eq!(t.len(), 2);
        assert!(t.ids.iter().all(|&i| i > UNK_ID));
        assert_eq!(v.word(t.ids[0]), "bright");
    }

    #[test]
    fn case_and_punctuation_invariant() {
        let v = Vocabulary::default();
        assert_eq!(
            v.tokenize("Bright  LESION!").unwrap().ids,
            v.tokenize("bright lesion").unwrap().ids
        );
    }

    #[test]
    fn out_of_vocabulary() {
        let v = Vocabulary::default();
        assert_eq!(v.tokenize("xylophone").unwrap().ids, vec![UNK_ID]);
        assert!(v.tokenize("xylophone").unwrap().all_unknown());
    }

    #[test]
    fn aliases_share_ids() {
        let v = Vocabulary::default();
        assert_eq!(v.id("tumour"), v.id("tumor"));
        assert_eq!(v.id("lesions"), v.id("lesion"));
    }

    #[test]
    fn blank_prompt_rejected() {
        let v = Vocabulary::default();
        assert!(matches!(v.tokenize(""), Err(Error::Prompt(_))));
        assert!(matches!(v.tokenize("  ?! "), Err(Error::Prompt(_))));
    }

    #[test]
    fn serde_roundtrip_reindexes() {
        let v = Vocabulary::default();
        let mut back: Vocabulary = serde_json::from_str(&serde_json::to_string(&v).unwrap()).unwrap();
        back.reindex();
        assert_eq!(back.id("nodule"), v.id("nodule"));
        assert_eq!(back.id("tumours"), v.id("tumor"));
    }
}
