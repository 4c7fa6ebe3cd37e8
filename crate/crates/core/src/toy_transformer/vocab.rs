// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::HashMap;

use super::{ModelError, Result};

/// Whitespace-delimited word vocabulary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Tokens must be unique and contain no whitespace.
    pub fn new(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.contains(char::is_whitespace) {
                return Err(ModelError::InvalidConfig(format!(
                    "token {i} ({t:?}) is not a single word"
                )));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(ModelError::InvalidConfig(format!("duplicate token {t:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    /// `<s>` followed by `t1 .. t{size-1}`.
    pub fn placeholder(size: usize) -> Self {
        let tokens = std::iter::once("<s>".to_string())
            .chain((1..size).map(|i| format!("t{i}")))
            .collect();
        Self::new(tokens).expect("placeholder tokens are unique words")
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

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn index(&self) -> &HashMap<String, usize> {
        &self.index
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.split_whitespace()
            .map(|w| self.id(w).ok_or_else(|| ModelError::UnknownToken(w.to_string())))
            .collect()
    }

    /// Space-joined tokens; out-of-range ids render as `<unk:N>`.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&i| {
                self.token(i)
                    .map(str::to_string)
                    .unwrap_or_else(|| format!("<unk:{i}>"))
            })
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encode_decode() {
        let v = Vocab::new(vec!["<s>".into(), "red".into(), "car".into()]).unwrap();
        let ids = v.encode("  <s> red\tcar ").unwrap();
        assert_eq!(ids, vec![0, 1, 2]);
        assert_eq!(v.decode(&ids), "<s> red car");
        assert!(matches!(v.encode("blue"), Err(ModelError::UnknownToken(_))));
    }

    #[test]
    fn rejects_bad_tokens() {
        assert!(Vocab::new(vec!["a".into(), "a".into()]).is_err());
        assert!(Vocab::new(vec!["a b".into()]).is_err());
        assert_eq!(Vocab::placeholder(3).tokens(), &["<s>", "t1", "t2"]);
    }
}
