use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::vocab::{TokenId, Vocab};

/// Many-to-one map from spelling variants to a canonical form.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SpellingMap {
    map: BTreeMap<String, String>,
}

impl SpellingMap {
    /// Builds a map from `(variant, canonical)` pairs. A canonical form may not
    /// itself be a variant of something else, and a variant may not map to two
    /// different forms.
    pub fn new<I, A, B>(pairs: I) -> Result<Self>
    where
        I: IntoIterator<Item = (A, B)>,
        A: Into<String>,
        B: Into<String>,
    {
        let mut map = BTreeMap::new();
        for (variant, canonical) in pairs {
            let (variant, canonical) = (variant.into(), canonical.into());
            if variant == canonical {
                continue;
            }
            if let Some(prev) = map.insert(variant.clone(), canonical.clone()) {
                if prev != canonical {
                    return Err(Error::config(format!(
                        "spelling variant {variant} maps to both {prev} and {canonical}"
                    )));
                }
            }
        }
        for canonical in map.values() {
            if map.contains_key(canonical) {
                return Err(Error::config(format!(
                    "canonical form {canonical} is also a variant"
                )));
            }
        }
        Ok(SpellingMap { map })
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn get(&self, token: &str) -> Option<&str> {
        self.map.get(token).map(String::as_str)
    }

    pub fn pairs(&self) -> impl Iterator<Item = (&str, &str)> {
        self.map.iter().map(|(a, b)| (a.as_str(), b.as_str()))
    }

    /// Variant spellings of each canonical form.
    pub fn variants_of(&self, canonical: &str) -> Vec<&str> {
        self.map
            .iter()
            .filter(|(_, c)| c.as_str() == canonical)
            .map(|(v, _)| v.as_str())
            .collect()
    }

    /// Same normalization over token ids. Variants whose canonical form is
    /// missing from the vocabulary are left unchanged.
    pub fn normalize_ids(&self, ids: &[TokenId], vocab: &Vocab) -> Vec<TokenId> {
        ids.iter()
            .map(|&id| {
                vocab
                    .token(id)
                    .and_then(|t| self.get(t))
                    .and_then(|c| vocab.id(c))
                    .unwrap_or(id)
            })
            .collect()
    }
}

/// Replaces each token by its canonical spelling when it has one.
pub fn normalize_transcript<S: AsRef<str>>(tokens: &[S], map: &SpellingMap) -> Vec<String> {
    tokens
        .iter()
        .map(|t| map.get(t.as_ref()).unwrap_or(t.as_ref()).to_string())
        .collect()
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn single_lookup() {
        let m = SpellingMap::new([("colour", "color")]).unwrap();
        assert_eq!(normalize_transcript(&["colour"], &m), vec!["color"]);
    }

    #[test]
    fn empty_map_is_identity() {
        let m = SpellingMap::default();
        assert_eq!(normalize_transcript(&["a", "b"], &m), vec!["a", "b"]);
    }

    #[test]
    fn mixed_sentence_and_idempotence() {
        let m = SpellingMap::new([("colour", "color"), ("centre", "center")]).unwrap();
        let once = normalize_transcript(&["the", "centre", "colour", "color"], &m);
        assert_eq!(once, vec!["the", "center", "color", "color"]);
        assert_eq!(normalize_transcript(&once, &m), once);
    }

    #[test]
    fn chains_and_conflicts_rejected() {
        assert!(SpellingMap::new([("a", "b"), ("b", "c")]).is_err());
        assert!(SpellingMap::new([("a", "b"), ("a", "c")]).is_err());
    }

    fn random_map() -> impl Strategy<Value = SpellingMap> {
        proptest::collection::btree_map("[a-f]{1,2}", "[g-k]{1,2}", 0..8)
            .prop_map(|m| SpellingMap::new(m).unwrap())
    }

    proptest! {
        #[test]
        fn idempotent_and_canonical_preserving(
            map in random_map(),
            tokens in proptest::collection::vec("[a-k]{1,2}", 0..12),
        ) {
            let once = normalize_transcript(&tokens, &map);
            let twice = normalize_transcript(&once, &map);
            prop_assert_eq!(&once, &twice);
            for (_, canonical) in map.pairs() {
                prop_assert_eq!(normalize_transcript(&[canonical], &map), vec![canonical.to_string()]);
            }
        }
    }
}
