use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const CLS: TokenId = 1;
pub const SEP: TokenId = 2;
pub const MASK: TokenId = 3;
pub const E1: TokenId = 4;
pub const E2: TokenId = 5;
pub const UNK: TokenId = 6;
pub const THE: TokenId = 7;
pub const RELATION: TokenId = 8;
pub const BETWEEN: TokenId = 9;
pub const AND: TokenId = 10;
pub const IS: TokenId = 11;

/// Reserved entries in id order. The first six are the structural markers,
/// then `[UNK]`, then the literal words of the autoregressive prompt.
pub const RESERVED: [&str; 12] = [
    "[PAD]", "[CLS]", "[SEP]", "[MASK]", "[E1]", "[E2]", "[UNK]", "the", "relation", "between",
    "and", "is",
];

pub const FIRST_CONTENT_ID: TokenId = RESERVED.len() as TokenId;

/// Bijective token/id table with a fixed reserved prefix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Default for Vocab {
    fn default() -> Self {
        Vocab::new()
    }
}

impl Vocab {
    pub fn new() -> Self {
        let mut v = Vocab { tokens: Vec::new(), index: HashMap::new() };
        for t in RESERVED {
            v.insert(t);
        }
        v
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED.len() || tokens.iter().zip(RESERVED).any(|(a, b)| a != b) {
            return Err(Error::config("vocabulary does not start with the reserved block"));
        }
        let mut v = Vocab { tokens: Vec::new(), index: HashMap::new() };
        for t in tokens {
            if v.index.contains_key(&t) {
                return Err(Error::config(format!("duplicate vocabulary entry {t:?}")));
            }
            v.insert(&t);
        }
        Ok(v)
    }

    /// Id of `token`, adding it if new.
    pub fn insert(&mut self, token: &str) -> TokenId {
        if let Some(&id) = self.index.get(token) {
            return id;
        }
        let id = self.tokens.len() as TokenId;
        self.tokens.push(token.to_string());
        self.index.insert(token.to_string(), id);
        id
    }

    pub fn get(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    /// Id of `token`, or `[UNK]` when absent.
    pub fn lookup(&self, token: &str) -> TokenId {
        self.get(token).unwrap_or(UNK)
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
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

    pub fn content_ids(&self) -> impl Iterator<Item = TokenId> + '_ {
        FIRST_CONTENT_ID..self.tokens.len() as TokenId
    }

    /// Hex SHA-256 over the ordered token list, used to pair checkpoints with
    /// the vocabulary they were trained on.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update((t.len() as u64).to_le_bytes());
            h.update(t.as_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

impl Serialize for Vocab {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.tokens.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Vocab {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let tokens = Vec::<String>::deserialize(d)?;
        Vocab::from_tokens(tokens).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reserved_block_is_fixed() {
        let v = Vocab::new();
        assert_eq!(v.len(), 12);
        assert_eq!(v.get("[MASK]"), Some(MASK));
        assert_eq!(v.get("is"), Some(IS));
        assert_eq!(v.lookup("zebra"), UNK);
    }

    #[test]
    fn insert_is_idempotent_and_bijective() {
        let mut v = Vocab::new();
        let a = v.insert("alpha");
        assert_eq!(v.insert("alpha"), a);
        assert_eq!(v.token(a), Some("alpha"));
        assert_eq!(a, FIRST_CONTENT_ID);
    }

    #[test]
    fn hash_changes_with_content() {
        let mut v = Vocab::new();
        let h0 = v.hash();
        v.insert("x");
        assert_ne!(h0, v.hash());
    }

    #[test]
    fn rejects_bad_token_lists() {
        assert!(Vocab::from_tokens(vec!["a".into()]).is_err());
        let mut t: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        t.push("x".into());
        t.push("x".into());
        assert!(Vocab::from_tokens(t).is_err());
    }
}
