//! Character-level vocabulary with reserved special tokens.
//!
//! `Char` mode holds one token per distinct character. `CharMerged` also
//! holds the most frequent character bigrams, giving a larger vocabulary for
//! tokenizer-swap comparisons. Encoding is greedy longest-match.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub type TokenId = usize;

pub const BLANK: TokenId = 0;
pub const PAD: TokenId = 1;
pub const BOS: TokenId = 2;
pub const EOS: TokenId = 3;
pub const MASK: TokenId = 4;
pub const UNK: TokenId = 5;
pub const NUM_RESERVED: usize = 6;

pub const RESERVED_NAMES: [&str; NUM_RESERVED] =
    ["<blank>", "<pad>", "<s>", "</s>", "<mask>", "<unk>"];

/// Number of bigram tokens added in [`VocabMode::CharMerged`].
pub const MERGED_BIGRAMS: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VocabMode {
    Char,
    CharMerged,
}

impl fmt::Display for VocabMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            VocabMode::Char => write!(f, "char"),
            VocabMode::CharMerged => write!(f, "char_merged"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
    max_chars: usize,
}

impl Vocabulary {
    /// Builds a vocabulary from a corpus of texts.
    ///
    /// Characters are ordered by code point; bigrams (merged mode) by
    /// descending frequency, ties broken lexicographically.
    pub fn build<S: AsRef<str>>(corpus: &[S], mode: VocabMode) -> Result<Self> {
        let mut chars = BTreeSet::new();
        let mut bigrams: BTreeMap<String, usize> = BTreeMap::new();
        for text in corpus {
            let cs: Vec<char> = text.as_ref().chars().collect();
            chars.extend(cs.iter().copied());
            if mode == VocabMode::CharMerged {
                for w in cs.windows(2) {
                    *bigrams.entry(w.iter().collect()).or_default() += 1;
                }
            }
        }
        if chars.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let mut tokens: Vec<String> = chars.into_iter().map(String::from).collect();
        if mode == VocabMode::CharMerged {
            let mut ranked: Vec<(String, usize)> = bigrams.into_iter().collect();
            ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
            tokens.extend(ranked.into_iter().take(MERGED_BIGRAMS).map(|(s, _)| s));
        }
        Self::from_tokens(tokens)
    }

    /// Builds a vocabulary from non-reserved token strings.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut all: Vec<String> = RESERVED_NAMES.iter().map(|s| s.to_string()).collect();
        let mut index = HashMap::new();
        let mut max_chars = 1;
        for tok in tokens {
            if tok.is_empty() {
                return Err(Error::Invalid("empty token string".into()));
            }
            if index.contains_key(&tok) || RESERVED_NAMES.contains(&tok.as_str()) {
                return Err(Error::Invalid(format!("duplicate token {tok:?}")));
            }
            max_chars = max_chars.max(tok.chars().count());
            index.insert(tok.clone(), all.len());
            all.push(tok);
        }
        Ok(Vocabulary {
            tokens: all,
            index,
            max_chars,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() <= NUM_RESERVED
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Greedy longest-match encoding; unknown characters map to `UNK`.
    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        let chars: Vec<(usize, char)> = text.char_indices().collect();
        let mut out = Vec::with_capacity(chars.len());
        let mut i = 0;
        while i < chars.len() {
            let mut matched = None;
            let longest = self.max_chars.min(chars.len() - i);
            for len in (1..=longest).rev() {
                let start = chars[i].0;
                let end = chars.get(i + len).map_or(text.len(), |c| c.0);
                if let Some(&id) = self.index.get(&text[start..end]) {
                    matched = Some((id, len));
                    break;
                }
            }
            match matched {
                Some((id, len)) => {
                    out.push(id);
                    i += len;
                }
                None => {
                    out.push(UNK);
                    i += 1;
                }
            }
        }
        out
    }

    /// Concatenates token strings; reserved tokens render as nothing.
    pub fn decode(&self, ids: &[TokenId]) -> Result<String> {
        let mut s = String::new();
        for &id in ids {
            let tok = self.tokens.get(id).ok_or(Error::TokenOutOfRange {
                id,
                size: self.tokens.len(),
            })?;
            if id >= NUM_RESERVED {
                s.push_str(tok);
            }
        }
        Ok(s)
    }

    /// Line-oriented serialization: one token per line, index = line number.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for tok in &self.tokens {
            out.push_str(&escape(tok));
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let lines: Vec<&str> = text.lines().collect();
        if lines.len() < NUM_RESERVED {
            return Err(Error::Invalid(
                "vocabulary file lacks reserved tokens".into(),
            ));
        }
        for (i, name) in RESERVED_NAMES.iter().enumerate() {
            if lines[i] != *name {
                return Err(Error::Invalid(format!(
                    "vocabulary line {i}: expected {name}, found {:?}",
                    lines[i]
                )));
            }
        }
        let tokens = lines[NUM_RESERVED..]
            .iter()
            .map(|l| unescape(l))
            .collect::<Result<Vec<_>>>()?;
        Self::from_tokens(tokens)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    /// SHA-256 of the serialized vocabulary, hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }
}

fn escape(tok: &str) -> String {
    let mut s = String::with_capacity(tok.len());
    for c in tok.chars() {
        match c {
            '\\' => s.push_str("\\\\"),
            ' ' => s.push_str("\\s"),
            '\t' => s.push_str("\\t"),
            '\n' => s.push_str("\\n"),
            '\r' => s.push_str("\\r"),
            c => s.push(c),
        }
    }
    s
}

fn unescape(line: &str) -> Result<String> {
    let mut s = String::with_capacity(line.len());
    let mut it = line.chars();
    while let Some(c) = it.next() {
        if c != '\\' {
            s.push(c);
            continue;
        }
        match it.next() {
            Some('\\') => s.push('\\'),
            Some('s') => s.push(' '),
            Some('t') => s.push('\t'),
            Some('n') => s.push('\n'),
            Some('r') => s.push('\r'),
            other => {
                return Err(Error::Invalid(format!(
                    "bad escape \\{} in vocabulary line {line:?}",
                    other.map(String::from).unwrap_or_default()
                )))
            }
        }
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn user_tokens(v: &Vocabulary) -> Vec<&str> {
        v.tokens()[NUM_RESERVED..]
            .iter()
            .map(String::as_str)
            .collect()
    }

    #[test]
    fn char_vocab_from_small_corpus() {
        let v = Vocabulary::build(&["aa b"], VocabMode::Char).unwrap();
        let mut toks = user_tokens(&v);
        toks.sort();
        assert_eq!(toks, vec![" ", "a", "b"]);
        assert_eq!(v.len(), NUM_RESERVED + 3);
        for (i, name) in RESERVED_NAMES.iter().enumerate() {
            assert_eq!(v.token(i), Some(*name));
        }
    }

    #[test]
    fn merged_vocab_contains_frequent_bigram() {
        let v = Vocabulary::build(&["abab"], VocabMode::CharMerged).unwrap();
        // bigram counts: ab=2, ba=1
        assert!(v.id("ab").is_some());
        assert_eq!(user_tokens(&v), vec!["a", "b", "ab", "ba"]);
        assert_eq!(v.encode("ab"), vec![v.id("ab").unwrap()]);
        assert_eq!(
            v.encode("aba"),
            vec![v.id("ab").unwrap(), v.id("a").unwrap()]
        );
    }

    #[test]
    fn bigram_ties_break_lexicographically() {
        let v = Vocabulary::build(&["xy", "ba"], VocabMode::CharMerged).unwrap();
        assert_eq!(user_tokens(&v), vec!["a", "b", "x", "y", "ba", "xy"]);
    }

    #[test]
    fn merged_vocab_caps_bigrams() {
        let text: String = (0..600u32)
            .map(|i| char::from_u32(0x4e00 + i).unwrap())
            .collect();
        let v = Vocabulary::build(&[text], VocabMode::CharMerged).unwrap();
        assert_eq!(v.len(), NUM_RESERVED + 600 + MERGED_BIGRAMS);
    }

    #[test]
    fn empty_corpus_rejected() {
        assert!(matches!(
            Vocabulary::build::<&str>(&[], VocabMode::Char),
            Err(Error::EmptyCorpus)
        ));
        assert!(matches!(
            Vocabulary::build(&[""], VocabMode::Char),
            Err(Error::EmptyCorpus)
        ));
    }

    #[test]
    fn encode_decode_examples() {
        let v = Vocabulary::build(&["hab i"], VocabMode::Char).unwrap();
        assert_eq!(v.encode("ab"), vec![v.id("a").unwrap(), v.id("b").unwrap()]);
        assert_eq!(
            v.decode(&[v.id("h").unwrap(), v.id("i").unwrap()]).unwrap(),
            "hi"
        );
        assert_eq!(v.decode(&[BOS, v.id("h").unwrap(), EOS]).unwrap(), "h");
        assert_eq!(v.decode(&[]).unwrap(), "");
        assert!(v.decode(&[v.len()]).is_err());
        assert_eq!(v.encode("z"), vec![UNK]);
        // reserved spellings are plain characters, never special tokens
        assert!(v.encode("<s>").iter().all(|&t| t == UNK));
    }

    #[test]
    fn serialization_round_trip_with_whitespace() {
        let v = Vocabulary::build(&["a b\\c\td"], VocabMode::CharMerged).unwrap();
        let text = v.to_text();
        assert!(text.contains("\\s\n"));
        let back = Vocabulary::from_text(&text).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.to_text(), text);
        assert_eq!(back.hash(), v.hash());
    }

    #[test]
    fn deterministic_build() {
        let corpus = ["Hello, world.", "forty percent", "What?"];
        let a = Vocabulary::build(&corpus, VocabMode::CharMerged).unwrap();
        let b = Vocabulary::build(&corpus, VocabMode::CharMerged).unwrap();
        assert_eq!(a.to_text(), b.to_text());
    }

    #[test]
    fn from_text_rejects_bad_header() {
        assert!(Vocabulary::from_text("a\nb\n").is_err());
        let mut text = Vocabulary::build(&["a"], VocabMode::Char)
            .unwrap()
            .to_text();
        text.push_str("bad\\q\n");
        assert!(Vocabulary::from_text(&text).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_over_vocab_chars(s in "[a-zA-Z0-9 ,.?!%\"]{0,40}", merged in any::<bool>()) {
            let corpus = ["abcdefghijklmnopqrstuvwxyz ABCDEFGHIJKLMNOPQRSTUVWXYZ 0123456789 ,.?!%\"", "the cat sat"];
            let mode = if merged { VocabMode::CharMerged } else { VocabMode::Char };
            let v = Vocabulary::build(&corpus, mode).unwrap();
            let ids = v.encode(&s);
            prop_assert!(ids.iter().all(|&t| t >= NUM_RESERVED));
            prop_assert_eq!(v.decode(&ids).unwrap(), s);
        }
    }
}
