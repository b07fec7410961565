use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
const N_SPECIALS: usize = 4;

/// Character-level tokenizer with an explicit space symbol.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tokenizer {
    id_to_char: Vec<char>,
    #[serde(skip)]
    char_to_id: HashMap<char, usize>,
}

impl Tokenizer {
    /// Builds a tokenizer over `chars`; duplicates are ignored, space is always included.
    pub fn new(chars: impl IntoIterator<Item = char>) -> Self {
        let mut id_to_char = vec![' '];
        for c in chars {
            if !id_to_char.contains(&c) {
                id_to_char.push(c);
            }
        }
        let char_to_id = Self::index(&id_to_char);
        Self {
            id_to_char,
            char_to_id,
        }
    }

    fn index(chars: &[char]) -> HashMap<char, usize> {
        chars
            .iter()
            .enumerate()
            .map(|(i, &c)| (c, i + N_SPECIALS))
            .collect()
    }

    pub fn vocab_size(&self) -> usize {
        N_SPECIALS + self.id_to_char.len()
    }

    pub fn space_id(&self) -> usize {
        N_SPECIALS
    }

    /// Ids a decoder may emit: EOS followed by every character id.
    pub fn emittable(&self) -> Vec<usize> {
        std::iter::once(EOS)
            .chain(N_SPECIALS..self.vocab_size())
            .collect()
    }

    pub fn char_ids(&self) -> std::ops::Range<usize> {
        N_SPECIALS..self.vocab_size()
    }

    pub fn is_special(id: usize) -> bool {
        id < N_SPECIALS
    }

    /// Character ids without BOS/EOS; unknown characters map to UNK.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        text.chars()
            .map(|c| self.char_to_id.get(&c).copied().unwrap_or(UNK))
            .collect()
    }

    /// Like [`Tokenizer::encode`] but rejects characters outside the set.
    pub fn encode_strict(&self, text: &str) -> Result<Vec<usize>> {
        text.chars()
            .map(|c| {
                self.char_to_id
                    .get(&c)
                    .copied()
                    .ok_or_else(|| Error::invalid(format!("character {c:?} not in tokenizer")))
            })
            .collect()
    }

    /// `BOS text EOS`.
    pub fn encode_delimited(&self, text: &str) -> Vec<usize> {
        let mut ids = vec![BOS];
        ids.extend(self.encode(text));
        ids.push(EOS);
        ids
    }

    /// Decodes character ids, skipping specials.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&i| !Self::is_special(i))
            .filter_map(|&i| self.id_to_char.get(i - N_SPECIALS))
            .collect()
    }

    pub fn rebuild_index(&mut self) {
        self.char_to_id = Self::index(&self.id_to_char);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tok() -> Tokenizer {
        Tokenizer::new("etaoinsrhldc".chars())
    }

    #[test]
    fn specials_come_first() {
        let t = tok();
        assert_eq!(t.vocab_size(), 4 + 13);
        assert_eq!(t.encode(" "), vec![t.space_id()]);
        assert_eq!(t.encode("z"), vec![UNK]);
        assert_eq!(t.encode_delimited("e"), vec![BOS, 5, EOS]);
    }

    #[test]
    fn strict_encoding_rejects_unknown() {
        assert!(tok().encode_strict("ez").is_err());
    }

    #[test]
    fn serde_round_trip_restores_index() {
        let t = tok();
        let mut back: Tokenizer =
            serde_json::from_str(&serde_json::to_string(&t).unwrap()).unwrap();
        back.rebuild_index();
        assert_eq!(back, t);
    }

    proptest! {
        #[test]
        fn round_trip(s in "[etaoinsrhldc ]{0,30}") {
            let t = tok();
            prop_assert_eq!(t.decode(&t.encode(&s)), s.clone());
            prop_assert_eq!(t.decode(&t.encode_delimited(&s)), s);
        }
    }
}
