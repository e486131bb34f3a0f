use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// A prompt as a canonical (sorted, deduplicated) set of tokens.
///
/// The empty set is the unconditional prompt ∅.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct PromptId {
    tokens: Vec<String>,
}

impl PromptId {
    pub fn new<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut tokens: Vec<String> = tokens
            .into_iter()
            .map(|t| t.into().trim().to_string())
            .filter(|t| !t.is_empty())
            .collect();
        tokens.sort();
        tokens.dedup();
        Self { tokens }
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Tokens present in `self` but not in `other`.
    pub fn difference(&self, other: &PromptId) -> Vec<&str> {
        self.tokens
            .iter()
            .filter(|t| !other.tokens.contains(t))
            .map(String::as_str)
            .collect()
    }
}

impl fmt::Display for PromptId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.tokens.is_empty() {
            f.write_str("∅")
        } else {
            f.write_str(&self.tokens.join("+"))
        }
    }
}

/// Parses `cat+eyeglasses` (any token order); `∅`, `empty` or `` give ∅.
impl FromStr for PromptId {
    type Err = std::convert::Infallible;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if s.is_empty() || s == "∅" || s == "empty" {
            return Ok(Self::empty());
        }
        Ok(Self::new(s.split(['+', ','])))
    }
}

impl From<&str> for PromptId {
    fn from(s: &str) -> Self {
        s.parse().unwrap()
    }
}

impl Serialize for PromptId {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        self.tokens.serialize(serializer)
    }
}

/// Accepts either a token list or the `a+b` string form.
impl<'de> Deserialize<'de> for PromptId {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            List(Vec<String>),
            Text(String),
        }
        Ok(match Repr::deserialize(deserializer)? {
            Repr::List(tokens) => PromptId::new(tokens),
            Repr::Text(s) => s.as_str().into(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_order() {
        let a = PromptId::new(["eyeglasses", "cat"]);
        let b: PromptId = "cat+eyeglasses+cat".into();
        assert_eq!(a, b);
        assert_eq!(a.to_string(), "cat+eyeglasses");
        assert_eq!(a.difference(&"cat".into()), vec!["eyeglasses"]);
    }

    #[test]
    fn empty_prompt_round_trip() {
        let e: PromptId = "∅".into();
        assert!(e.is_empty());
        assert_eq!(e.to_string(), "∅");
        let json = serde_json::to_string(&e).unwrap();
        assert_eq!(json, "[]");
        let back: PromptId = serde_json::from_str(&json).unwrap();
        assert_eq!(back, e);
        let from_text: PromptId = serde_json::from_str("\"dog+eyeglasses\"").unwrap();
        assert_eq!(from_text, PromptId::new(["dog", "eyeglasses"]));
    }
}
