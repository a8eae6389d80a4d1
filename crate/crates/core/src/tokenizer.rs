//! Word-level tokenizer for class names and attribute words.
//!
//! Ids 0, 1, 2 are reserved for the start, end and unknown tokens; corpus
//! words get ids from 3 upward in lexicographic order, so a vocabulary is a
//! pure function of the set of words it was built from.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;

pub const SOS: usize = 0;
pub const EOS: usize = 1;
pub const UNK: usize = 2;
const RESERVED: [&str; 3] = ["<sos>", "<eos>", "<unk>"];

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum TokenizerError {
    #[error("cannot build a vocabulary from empty corpora")]
    EmptyCorpora,
    #[error("word {0:?} is empty after normalization")]
    EmptyWord(String),
    #[error("unknown word {0:?}")]
    UnknownWord(String),
    #[error("token id {0} is not assigned")]
    UnassignedId(usize),
    #[error("vocabulary file line {line}: {reason}")]
    Format { line: usize, reason: String },
}

/// What `encode` does with out-of-vocabulary words.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum OnUnknown {
    #[default]
    Error,
    Unk,
}

/// Lowercase, trim, treat hyphens as spaces, collapse runs of whitespace.
pub fn normalize(text: &str) -> String {
    split_pieces(text).join(" ")
}

/// Normalized word pieces of `text`; each piece is one token.
pub fn split_pieces(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| c.is_whitespace() || c == '-')
        .filter(|p| !p.is_empty())
        .map(str::to_owned)
        .collect()
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    word_to_id: HashMap<String, usize>,
    id_to_word: Vec<String>,
}

impl Vocabulary {
    pub fn build<S: AsRef<str>>(corpora: &[Vec<S>]) -> Result<Self, TokenizerError> {
        if corpora.iter().all(|c| c.is_empty()) {
            return Err(TokenizerError::EmptyCorpora);
        }
        let mut words = BTreeSet::new();
        for word in corpora.iter().flatten() {
            let pieces = split_pieces(word.as_ref());
            if pieces.is_empty() {
                return Err(TokenizerError::EmptyWord(word.as_ref().to_owned()));
            }
            words.extend(pieces);
        }
        let id_to_word: Vec<String> = RESERVED.iter().map(|s| s.to_string()).chain(words).collect();
        let word_to_id = id_to_word
            .iter()
            .enumerate()
            .skip(RESERVED.len())
            .map(|(i, w)| (w.clone(), i))
            .collect();
        Ok(Self { word_to_id, id_to_word })
    }

    pub fn size(&self) -> usize {
        self.id_to_word.len()
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.word_to_id.get(word).copied()
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.id_to_word.get(id).map(String::as_str)
    }

    /// Corpus words (reserved tokens excluded) in id order.
    pub fn words(&self) -> impl Iterator<Item = (usize, &str)> {
        self.id_to_word
            .iter()
            .enumerate()
            .skip(RESERVED.len())
            .map(|(i, w)| (i, w.as_str()))
    }

    pub fn encode(&self, text: &str, on_unknown: OnUnknown) -> Result<TokenSequence, TokenizerError> {
        let ids = split_pieces(text)
            .into_iter()
            .map(|piece| match (self.id(&piece), on_unknown) {
                (Some(id), _) => Ok(id),
                (None, OnUnknown::Unk) => Ok(UNK),
                (None, OnUnknown::Error) => Err(TokenizerError::UnknownWord(piece)),
            })
            .collect::<Result<_, _>>()?;
        Ok(TokenSequence { ids })
    }

    pub fn decode(&self, seq: &TokenSequence) -> Result<String, TokenizerError> {
        let words = seq
            .ids
            .iter()
            .map(|&id| self.word(id).ok_or(TokenizerError::UnassignedId(id)))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(words.join(" "))
    }

    /// `<id>\t<word>` lines sorted by id, reserved tokens included.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for (i, w) in self.id_to_word.iter().enumerate() {
            let _ = writeln!(out, "{i}\t{w}");
        }
        out
    }

    pub fn load(text: &str) -> Result<Self, TokenizerError> {
        let mut id_to_word = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line_no = n + 1;
            if line.is_empty() {
                continue;
            }
            let fmt_err = |reason: String| TokenizerError::Format { line: line_no, reason };
            let (id, word) = line
                .split_once('\t')
                .ok_or_else(|| fmt_err("missing tab separator".into()))?;
            let id: usize = id.parse().map_err(|_| fmt_err(format!("bad id {id:?}")))?;
            if id != id_to_word.len() {
                return Err(fmt_err(format!("expected id {}, found {id}", id_to_word.len())));
            }
            if id < RESERVED.len() {
                if word != RESERVED[id] {
                    return Err(fmt_err(format!("reserved id {id} must be {}", RESERVED[id])));
                }
            } else if word.is_empty() || normalize(word) != word || word.contains(' ') {
                return Err(fmt_err(format!("word {word:?} is not a normalized token")));
            }
            id_to_word.push(word.to_owned());
        }
        if id_to_word.len() < RESERVED.len() {
            return Err(TokenizerError::Format {
                line: id_to_word.len() + 1,
                reason: "missing reserved tokens".into(),
            });
        }
        let mut word_to_id = HashMap::new();
        for (i, w) in id_to_word.iter().enumerate().skip(RESERVED.len()) {
            if word_to_id.insert(w.clone(), i).is_some() {
                return Err(TokenizerError::Format {
                    line: i + 1,
                    reason: format!("duplicate word {w:?}"),
                });
            }
        }
        Ok(Self { word_to_id, id_to_word })
    }
}
