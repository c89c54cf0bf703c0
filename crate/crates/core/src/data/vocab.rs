use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use crate::error::{io_err, Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const RESERVED: [&str; 4] = ["[PAD]", "[BOS]", "[EOS]", "[UNK]"];

/// Word-level vocabulary with four reserved ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

/// A tokenized caption: `ids` is padded to a fixed width, `len` counts the
/// real tokens including `[BOS]` and `[EOS]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    pub len: usize,
}

/// Lowercases and splits on whitespace.
pub fn normalize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

impl Vocab {
    /// Reserved ids followed by `words` in order. Duplicates and reserved
    /// spellings are rejected.
    pub fn from_words<I, S>(words: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let mut index: HashMap<String, usize> = tokens
            .iter()
            .cloned()
            .enumerate()
            .map(|(i, t)| (t, i))
            .collect();
        for w in words {
            let w = w.into();
            if w.is_empty() || w.chars().any(char::is_whitespace) {
                return Err(Error::Data(format!("invalid vocab token {w:?}")));
            }
            if index.insert(w.clone(), tokens.len()).is_some() {
                return Err(Error::Data(format!("duplicate vocab token {w:?}")));
            }
            tokens.push(w);
        }
        Ok(Self { tokens, index })
    }

    /// Sorted unique normalized words of a corpus.
    pub fn from_corpus<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let words: BTreeSet<String> = texts.into_iter().flat_map(normalize).collect();
        let words = words
            .into_iter()
            .filter(|w| !RESERVED.contains(&w.as_str()));
        Self::from_words(words).expect("normalized corpus words are valid tokens")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, word: &str) -> bool {
        self.index.contains_key(word)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// One non-reserved token per line.
    pub fn to_file_string(&self) -> String {
        self.tokens[RESERVED.len()..]
            .iter()
            .map(|t| format!("{t}\n"))
            .collect()
    }

    pub fn parse(body: &str) -> Result<Self> {
        Self::from_words(body.lines().filter(|l| !l.is_empty()).map(str::to_string))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_file_string()).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path).map_err(io_err(path))?)
    }

    /// `[BOS] words… [EOS]` right-padded to `max_len` (at least 2). Long
    /// texts lose words from the end, never the `[EOS]`.
    pub fn tokenize(&self, text: &str, max_len: usize) -> TokenSequence {
        let max_len = max_len.max(2);
        let mut ids = Vec::with_capacity(max_len);
        ids.push(BOS);
        ids.extend(normalize(text).iter().take(max_len - 2).map(|w| self.id(w)));
        ids.push(EOS);
        let len = ids.len();
        ids.resize(max_len, PAD);
        TokenSequence { ids, len }
    }

    /// Words between `[BOS]` and the first `[EOS]`, skipping padding.
    pub fn detokenize(&self, ids: &[usize]) -> String {
        let words: Vec<&str> = ids
            .iter()
            .take_while(|&&id| id != EOS)
            .filter(|&&id| id != BOS && id != PAD)
            .map(|&id| self.token(id).unwrap_or(RESERVED[UNK]))
            .collect();
        words.join(" ")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocab {
        Vocab::from_corpus(["a photo of the cat, animal", "a dog"])
    }

    #[test]
    fn empty_text() {
        let t = vocab().tokenize("", 5);
        assert_eq!(t.ids, vec![BOS, EOS, PAD, PAD, PAD]);
        assert_eq!(t.len, 2);
    }

    #[test]
    fn unknown_maps_to_unk() {
        let v = vocab();
        assert_eq!(v.tokenize("zebra", 4).ids, vec![BOS, UNK, EOS, PAD]);
    }

    #[test]
    fn truncation_keeps_eos() {
        let t = vocab().tokenize("a photo of the cat, animal", 4);
        assert_eq!(t.len, 4);
        assert_eq!(t.ids[3], EOS);
        assert_eq!(vocab().tokenize("a", 0).ids, vec![BOS, EOS]);
    }

    #[test]
    fn file_round_trip() {
        let v = vocab();
        assert_eq!(Vocab::parse(&v.to_file_string()).unwrap(), v);
        assert_eq!(v.id(v.token(5).unwrap()), 5);
    }
}
