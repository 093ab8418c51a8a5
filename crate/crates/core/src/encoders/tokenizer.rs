//! Closed-vocabulary word tokenizer.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const EOS: usize = 1;
pub const UNK: usize = 2;

const SPECIALS: [&str; 3] = ["<pad>", "<eos>", "<unk>"];

/// Token list where the line index is the id.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

/// Lowercased words; punctuation other than apostrophes and hyphens separates.
pub fn words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !(c.is_alphanumeric() || c == '\'' || c == '-'))
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
}

impl Vocabulary {
    /// Specials followed by the sorted distinct words of `texts`.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let words: BTreeSet<String> = texts.into_iter().flat_map(words).collect();
        let tokens = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(
                words
                    .into_iter()
                    .filter(|w| !SPECIALS.contains(&w.as_str())),
            )
            .collect();
        Self::from_tokens(tokens).expect("built vocabulary is well formed")
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < SPECIALS.len() || tokens[..3] != SPECIALS {
            return Err(Error::InvalidData(format!(
                "vocabulary must start with {}",
                SPECIALS.join(", ")
            )));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::InvalidData(format!(
                    "duplicate vocabulary entry {t:?}"
                )));
            }
        }
        Ok(Self { tokens, index })
    }

    /// Parses one token per line.
    pub fn from_lines(text: &str) -> Result<Self> {
        Self::from_tokens(text.lines().map(str::to_string).collect())
    }

    pub fn to_lines(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_lines(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_lines()).map_err(|e| Error::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    /// Hex SHA-256 of the serialized vocabulary.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_lines().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Token ids ending in EOS, at most `max_len` long. Longer inputs keep
    /// their first `max_len − 1` words.
    pub fn encode(&self, text: &str, max_len: usize) -> Vec<usize> {
        assert!(max_len >= 1);
        let mut ids: Vec<usize> = words(text).take(max_len - 1).map(|w| self.id(&w)).collect();
        ids.push(EOS);
        ids
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn specials_come_first() {
        let v = Vocabulary::build(["red circle", "blue circle"]);
        assert_eq!(v.token(PAD), Some("<pad>"));
        assert_eq!(v.token(EOS), Some("<eos>"));
        assert_eq!(v.token(UNK), Some("<unk>"));
        assert_eq!(v.len(), 6);
    }

    #[test]
    fn encode_appends_eos_and_maps_unknowns() {
        let v = Vocabulary::build(["a photo of a red circle."]);
        let ids = v.encode("A photo of a green circle", 16);
        assert_eq!(ids.len(), 7);
        assert_eq!(*ids.last().unwrap(), EOS);
        assert_eq!(ids[4], UNK);
    }

    #[test]
    fn long_text_truncates_keeping_eos() {
        let text = (0..20)
            .map(|i| format!("w{i}"))
            .collect::<Vec<_>>()
            .join(" ");
        let v = Vocabulary::build([text.as_str()]);
        let ids = v.encode(&text, 16);
        assert_eq!(ids.len(), 16);
        assert_eq!(ids[15], EOS);
        assert_eq!(v.token(ids[14]), Some("w14"));
    }

    #[test]
    fn file_round_trip_and_hash() {
        let v = Vocabulary::build(["red square", "blue cross"]);
        let back = Vocabulary::from_lines(&v.to_lines()).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.hash(), v.hash());
        assert_ne!(Vocabulary::build(["red"]).hash(), v.hash());
    }

    #[test]
    fn rejects_missing_specials() {
        assert!(Vocabulary::from_lines("red\nblue\n").is_err());
    }
}
