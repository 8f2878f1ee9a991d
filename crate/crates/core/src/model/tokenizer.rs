// SPDX-License-Identifier: MIT OR Apache-2.0

//! Whitespace tokenizer over a fixed vocabulary.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Stored as `{"token_to_id": {...}, "id_to_token": [...]}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tokenizer {
    token_to_id: HashMap<String, u32>,
    id_to_token: Vec<String>,
}

impl Tokenizer {
    pub fn from_vocab(tokens: Vec<String>) -> Result<Self> {
        let mut token_to_id = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::InvalidArgument(format!("token {i} ('{t}') is empty or contains whitespace")));
            }
            if token_to_id.insert(t.clone(), i as u32).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate token '{t}'")));
            }
        }
        Ok(Self {
            token_to_id,
            id_to_token: tokens,
        })
    }

    /// Tokens `A`..`Z`, then `T26`, `T27`, ... for larger vocabularies.
    pub fn synthetic(vocab: usize) -> Self {
        let names = (0..vocab)
            .map(|i| {
                if i < 26 {
                    char::from(b'A' + i as u8).to_string()
                } else {
                    format!("T{i}")
                }
            })
            .collect();
        Self::from_vocab(names).expect("synthetic names are unique")
    }

    pub fn vocab_size(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        text.split_whitespace()
            .map(|w| {
                self.token_to_id
                    .get(w)
                    .copied()
                    .ok_or_else(|| Error::InvalidArgument(format!("unknown token '{w}'")))
            })
            .collect()
    }

    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let words: Result<Vec<&str>> = ids.iter().map(|&i| self.token(i)).collect();
        Ok(words?.join(" "))
    }

    pub fn token(&self, id: u32) -> Result<&str> {
        self.id_to_token
            .get(id as usize)
            .map(String::as_str)
            .ok_or_else(|| Error::OutOfRange(format!("token id {id} >= vocab {}", self.vocab_size())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_vec_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let t: Tokenizer = serde_json::from_slice(&bytes)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        for (i, name) in t.id_to_token.iter().enumerate() {
            if t.token_to_id.get(name) != Some(&(i as u32)) {
                return Err(Error::Format(format!(
                    "{}: token '{name}' maps inconsistently",
                    path.display()
                )));
            }
        }
        if t.token_to_id.len() != t.id_to_token.len() {
            return Err(Error::Format(format!("{}: map and array sizes differ", path.display())));
        }
        Ok(t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encode_decode() {
        let t = Tokenizer::synthetic(30);
        let ids = t.encode("A B  C\tA T27").unwrap();
        assert_eq!(ids, vec![0, 1, 2, 0, 27]);
        assert_eq!(t.decode(&ids).unwrap(), "A B C A T27");
        assert!(t.encode("A ?").is_err());
        assert!(t.token(30).is_err());
    }

    #[test]
    fn file_round_trip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("tok.json");
        let t = Tokenizer::synthetic(5);
        t.save(&p).unwrap();
        assert_eq!(Tokenizer::load(&p).unwrap(), t);
        std::fs::write(&p, r#"{"token_to_id": {"a": 1}, "id_to_token": ["a"]}"#).unwrap();
        assert!(matches!(Tokenizer::load(&p), Err(Error::Format(_))));
    }
}
