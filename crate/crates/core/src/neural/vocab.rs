use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const UNK: &str = "<unk>";
pub const BOS: &str = "<bos>";
pub const EOS: &str = "</s>";
pub const SEP: &str = "<sep>";

pub const UNK_ID: usize = 0;
pub const BOS_ID: usize = 1;
pub const EOS_ID: usize = 2;
pub const SEP_ID: usize = 3;

const SPECIALS: [&str; 4] = [UNK, BOS, EOS, SEP];

/// Token <-> id mapping. Ids 0..4 are `<unk> <bos> </s> <sep>`; the rest
/// are sorted so that a vocabulary built from the same token set is always
/// identical.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    #[serde(skip)]
    ids: HashMap<String, usize>,
}

impl Vocab {
    pub fn build<'a>(tokens: impl IntoIterator<Item = &'a str>) -> Self {
        let rest: BTreeSet<&str> = tokens.into_iter().filter(|t| !SPECIALS.contains(t)).collect();
        let all: Vec<String> = SPECIALS.iter().copied().chain(rest).map(str::to_string).collect();
        Self::from_tokens(all).expect("specials first and unique")
    }

    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < SPECIALS.len() || tokens[..SPECIALS.len()] != SPECIALS {
            return Err(Error::data("vocabulary must start with <unk> <bos> </s> <sep>"));
        }
        let ids: HashMap<String, usize> = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        if ids.len() != tokens.len() {
            return Err(Error::data("vocabulary has duplicate tokens"));
        }
        Ok(Vocab { tokens, ids })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.ids.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|&i| self.tokens[i].clone()).collect()
    }

    pub fn is_special(id: usize) -> bool {
        id < SPECIALS.len()
    }
}

impl TryFrom<Vec<String>> for Vocab {
    type Error = Error;

    fn try_from(tokens: Vec<String>) -> Result<Self> {
        Self::from_tokens(tokens)
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn build_is_order_independent() {
        let a = Vocab::build(["b", "a", "."]);
        let b = Vocab::build([".", "a", "b", "a", "<sep>"]);
        assert_eq!(a, b);
        assert_eq!(a.len(), 7);
        assert_eq!(a.id("zzz"), UNK_ID);
        assert_eq!(a.token(EOS_ID), EOS);
        let json = serde_json::to_string(&a).unwrap();
        let back: Vocab = serde_json::from_str(&json).unwrap();
        assert_eq!(back.id("b"), a.id("b"));
    }
}
