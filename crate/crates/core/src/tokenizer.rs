//! Word-level tokenizer and vocabulary.
//!
//! Text is lowercased and split on whitespace, with every punctuation
//! character emitted as its own token. The vocabulary file holds one regular
//! token per line; the special tokens are appended after them in the fixed
//! order of [`Special::ALL`], so their ids are `file_len + offset`.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Reserved tokens that never come out of [`tokenize`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Special {
    Pad,
    Unk,
    Bos,
    Eos,
    /// Special prefix in front of every EDU.
    Edu,
    /// Special prefix in front of the question, scenario and history turns.
    Cls,
    /// Task text prefix.
    Task,
    /// Text prefix for rule EDUs.
    Rule,
    /// Text prefix shared by the user question and the generated answer.
    Question,
    /// Text prefix shared by the scenario and history turns.
    Info,
}

impl Special {
    pub const ALL: [Special; 10] = [
        Special::Pad,
        Special::Unk,
        Special::Bos,
        Special::Eos,
        Special::Edu,
        Special::Cls,
        Special::Task,
        Special::Rule,
        Special::Question,
        Special::Info,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Special::Pad => "<pad>",
            Special::Unk => "<unk>",
            Special::Bos => "<s>",
            Special::Eos => "</s>",
            Special::Edu => "<edu>",
            Special::Cls => "<cls>",
            Special::Task => "sharc:",
            Special::Rule => "rule:",
            Special::Question => "question:",
            Special::Info => "info:",
        }
    }

    /// Position among the special tokens.
    pub fn offset(self) -> usize {
        Special::ALL.iter().position(|&s| s == self).unwrap()
    }
}

/// Lowercases and splits text into word and punctuation tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let mut word = String::new();
        for ch in chunk.chars() {
            if ch.is_ascii_punctuation() || (!ch.is_alphanumeric() && !ch.is_whitespace()) {
                if !word.is_empty() {
                    out.push(std::mem::take(&mut word));
                }
                out.push(ch.to_string());
            } else {
                word.extend(ch.to_lowercase());
            }
        }
        if !word.is_empty() {
            out.push(word);
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    n_regular: usize,
}

impl Vocab {
    /// Vocabulary from regular tokens in id order; specials are appended.
    pub fn from_tokens(regular: Vec<String>) -> Result<Self> {
        let n_regular = regular.len();
        let mut tokens = regular;
        tokens.extend(Special::ALL.iter().map(|s| s.as_str().to_string()));
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Self {
            tokens,
            index,
            n_regular,
        })
    }

    /// Builds a vocabulary from raw texts, most frequent tokens first and
    /// ties broken alphabetically.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for text in texts {
            for tok in tokenize(text) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        let mut entries: Vec<(String, usize)> = counts.into_iter().collect();
        entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Self::from_tokens(entries.into_iter().map(|(t, _)| t).collect())
            .expect("tokenize never produces special tokens")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_tokens(text.lines().map(str::to_string).collect())
    }

    /// Writes the regular tokens, one per line.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = String::new();
        for t in &self.tokens[..self.n_regular] {
            text.push_str(t);
            text.push('\n');
        }
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn special(&self, s: Special) -> u32 {
        (self.n_regular + s.offset()) as u32
    }

    pub fn is_special(&self, id: u32) -> bool {
        id as usize >= self.n_regular
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index
            .get(token)
            .copied()
            .unwrap_or_else(|| self.special(Special::Unk))
    }

    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        tokenize(text).iter().map(|t| self.id(t)).collect()
    }

    /// Joins regular tokens with single spaces, dropping specials.
    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .filter(|&&id| !self.is_special(id))
            .map(|&id| self.token(id))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn punctuation_is_split_and_lowercased() {
        assert_eq!(tokenize("Are you over 60?"), ["are", "you", "over", "60", "?"]);
        assert_eq!(tokenize("  * you, or: me. "), ["*", "you", ",", "or", ":", "me", "."]);
        assert!(tokenize("   ").is_empty());
    }

    #[test]
    fn specials_follow_regular_tokens() {
        let v = Vocab::build(["b a a", "c"]);
        assert_eq!(v.token(0), "a");
        assert_eq!(v.special(Special::Pad), 3);
        assert_eq!(v.special(Special::Info), 12);
        assert_eq!(v.len(), 13);
        assert_eq!(v.id("zzz"), v.special(Special::Unk));
    }

    #[test]
    fn decode_skips_specials() {
        let v = Vocab::build(["yes no"]);
        let mut ids = vec![v.special(Special::Bos)];
        ids.extend(v.encode("Yes no"));
        ids.push(v.special(Special::Eos));
        assert_eq!(v.decode(&ids), "yes no");
    }

    #[test]
    fn vocab_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        let v = Vocab::build(["the cat sat on the mat ."]);
        v.save(&path).unwrap();
        assert_eq!(Vocab::load(&path).unwrap(), v);
    }
}
