//! Character-level tokenizer.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Reserved id for characters outside the vocabulary.
pub const UNKNOWN_ID: usize = 0;
const UNKNOWN_CHAR: char = '\0';

/// Code points observed in a corpus, sorted, with `'\0'` at id 0 as the
/// out-of-vocabulary slot.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    chars: Vec<char>,
    ids: HashMap<char, usize>,
}

impl Vocabulary {
    pub fn from_chars(chars: Vec<char>) -> Result<Self> {
        if chars.first() != Some(&UNKNOWN_CHAR) {
            return Err(Error::Format("vocabulary must start with the reserved \\0 entry".into()));
        }
        if chars.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Format("vocabulary is not strictly sorted by code point".into()));
        }
        let ids = chars.iter().enumerate().map(|(i, &c)| (c, i)).collect();
        Ok(Self { chars, ids })
    }

    pub fn from_corpus(text: &str) -> Self {
        let mut set: BTreeSet<char> = text.chars().collect();
        set.insert(UNKNOWN_CHAR);
        Self::from_chars(set.into_iter().collect()).expect("sorted set")
    }

    pub fn len(&self) -> usize {
        self.chars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chars.is_empty()
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    pub fn id(&self, c: char) -> Option<usize> {
        self.ids.get(&c).copied()
    }

    /// Encode `text`, mapping unknown characters to [`UNKNOWN_ID`]. Returns
    /// the ids and the number of unknown characters.
    pub fn encode_counting(&self, text: &str) -> (Vec<usize>, usize) {
        let mut unknown = 0;
        let ids = text
            .chars()
            .map(|c| {
                self.id(c).unwrap_or_else(|| {
                    unknown += 1;
                    UNKNOWN_ID
                })
            })
            .collect();
        (ids, unknown)
    }

    /// Encode `text`, warning once if anything fell outside the vocabulary.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        let (ids, unknown) = self.encode_counting(text);
        if unknown > 0 {
            log::warn!("{unknown} characters outside the vocabulary mapped to id {UNKNOWN_ID}");
        }
        ids
    }

    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        ids.iter()
            .enumerate()
            .map(|(position, &id)| {
                self.chars.get(id).copied().ok_or(Error::TokenOutOfRange {
                    position,
                    id,
                    vocab_size: self.len(),
                })
            })
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        let strings: Vec<String> = self.chars.iter().map(|c| c.to_string()).collect();
        Ok(serde_json::to_string(&strings)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let strings: Vec<String> = serde_json::from_str(s)?;
        let chars = strings
            .iter()
            .map(|s| {
                let mut it = s.chars();
                match (it.next(), it.next()) {
                    (Some(c), None) => Ok(c),
                    _ => Err(Error::Format(format!("vocabulary entry {s:?} is not one character"))),
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_chars(chars)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()? + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sorted_with_reserved_slot() {
        let v = Vocabulary::from_corpus("hello world");
        assert_eq!(v.chars(), &['\0', ' ', 'd', 'e', 'h', 'l', 'o', 'r', 'w']);
        let ids = v.encode("world");
        assert_eq!(v.decode(&ids).unwrap(), "world");
        assert_eq!(v.encode_counting("hex!"), (vec![4, 3, 0, 0], 2));
        assert!(v.decode(&[9]).is_err());
    }

    #[test]
    fn json_round_trip() {
        let v = Vocabulary::from_corpus("Ünïcode \"quotes\"\n");
        assert_eq!(Vocabulary::from_json(&v.to_json().unwrap()).unwrap(), v);
        assert!(Vocabulary::from_json("[\"b\", \"a\"]").is_err());
        assert!(Vocabulary::from_json("[\"\\u0000\", \"ab\"]").is_err());
    }
}
