use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub type TokenId = usize;

pub const BLANK: &str = "<blank>";
pub const EOS: &str = "</s>";

/// Output symbol inventory. Id 0 is the transducer blank and id 1 is `</s>`;
/// the remaining ids are word pieces.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocab {
    pub const BLANK_ID: TokenId = 0;
    pub const EOS_ID: TokenId = 1;

    /// Builds a vocabulary from word pieces; duplicates keep their first position.
    pub fn new<I, S>(pieces: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut tokens = vec![BLANK.to_string(), EOS.to_string()];
        let mut index: HashMap<String, TokenId> = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        for p in pieces {
            let p = p.into();
            if p.is_empty() || p.chars().any(char::is_whitespace) {
                return Err(Error::config(format!("invalid token {p:?}")));
            }
            if !index.contains_key(&p) {
                index.insert(p.clone(), tokens.len());
                tokens.push(p);
            }
        }
        Ok(Vocab { tokens, index })
    }

    /// Rebuilds a vocabulary from its full token list (blank and `</s>` first).
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 2 || tokens[0] != BLANK || tokens[1] != EOS {
            return Err(Error::format("vocabulary must start with <blank> and </s>"));
        }
        let v = Vocab::new(tokens[2..].iter().cloned())?;
        if v.tokens.len() != tokens.len() {
            return Err(Error::format("vocabulary contains duplicate tokens"));
        }
        Ok(v)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn blank_id(&self) -> TokenId {
        Self::BLANK_ID
    }

    pub fn eos_id(&self) -> TokenId {
        Self::EOS_ID
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode<S: AsRef<str>>(&self, words: &[S]) -> Result<Vec<TokenId>> {
        words
            .iter()
            .map(|w| {
                self.id(w.as_ref()).ok_or_else(|| {
                    Error::contract(format!("token {:?} not in vocabulary", w.as_ref()))
                })
            })
            .collect()
    }

    pub fn decode(&self, ids: &[TokenId]) -> Vec<String> {
        ids.iter()
            .map(|&i| self.token(i).unwrap_or("<unk>").to_string())
            .collect()
    }

    /// Short content hash identifying this inventory.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update([0u8]);
        }
        h.finalize()
            .iter()
            .take(8)
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

impl TryFrom<Vec<String>> for Vocab {
    type Error = Error;

    fn try_from(tokens: Vec<String>) -> Result<Self> {
        Vocab::from_tokens(tokens)
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}
