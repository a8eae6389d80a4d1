//! Per-class attribute vocabularies: K sets of up to N descriptive words for
//! every class, loaded from JSON.
//!
//! ```json
//! {"dataset": "flowers", "generator": "hand", "num_words": 8, "num_sets": 3,
//!  "classes": {"passion flower": [["purple", "..."], ["..."], ["..."]]}}
//! ```

use std::path::Path;

use serde_json::{json, Map, Value};

use crate::prompt::PromptError;
use crate::tokenizer::split_pieces;

#[derive(Debug, thiserror::Error)]
pub enum VocabError {
    #[error("invalid JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("schema error in {field}{}: {reason}", class.as_ref().map(|c| format!(" (class {c:?})")).unwrap_or_default())]
    Schema {
        field: String,
        class: Option<String>,
        reason: String,
    },
    #[error("structural error: {0}")]
    Structure(String),
    #[error("unknown class {0:?}")]
    UnknownClass(String),
    #[error("class {class:?} has no attribute set {k}")]
    UnknownSet { class: String, k: usize },
    #[error(transparent)]
    Overflow(#[from] PromptError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Lowercase, trim, collapse internal whitespace. Hyphens are kept; the
/// tokenizer splits them later.
pub fn normalize_word(word: &str) -> String {
    word.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttributeVocab {
    pub dataset: String,
    pub generator: String,
    pub num_words: usize,
    pub num_sets: usize,
    /// Class name and its `num_sets` word lists, in file order.
    pub classes: Vec<(String, Vec<Vec<String>>)>,
}

fn schema(field: impl Into<String>, class: Option<&str>, reason: impl Into<String>) -> VocabError {
    VocabError::Schema {
        field: field.into(),
        class: class.map(str::to_owned),
        reason: reason.into(),
    }
}

fn get_str(obj: &Map<String, Value>, key: &str) -> Result<String, VocabError> {
    match obj.get(key) {
        Some(Value::String(s)) => Ok(s.clone()),
        Some(_) => Err(schema(key, None, "expected a string")),
        None => Err(schema(key, None, "missing")),
    }
}

fn get_count(obj: &Map<String, Value>, key: &str) -> Result<usize, VocabError> {
    match obj.get(key) {
        Some(v) => v
            .as_u64()
            .map(|n| n as usize)
            .ok_or_else(|| schema(key, None, "expected a non-negative integer")),
        None => Err(schema(key, None, "missing")),
    }
}

impl AttributeVocab {
    /// Parses and validates; the second value lists non-fatal warnings.
    pub fn from_json(text: &str) -> Result<(Self, Vec<String>), VocabError> {
        let root: Value = serde_json::from_str(text)?;
        let obj = root
            .as_object()
            .ok_or_else(|| schema("<root>", None, "expected an object"))?;
        let dataset = get_str(obj, "dataset")?;
        let generator = get_str(obj, "generator")?;
        let num_words = get_count(obj, "num_words")?;
        let num_sets = get_count(obj, "num_sets")?;
        if num_sets == 0 {
            return Err(schema("num_sets", None, "must be at least 1"));
        }
        let class_map = match obj.get("classes") {
            Some(Value::Object(m)) => m,
            Some(_) => return Err(schema("classes", None, "expected an object")),
            None => return Err(schema("classes", None, "missing")),
        };
        if class_map.is_empty() {
            return Err(schema("classes", None, "no classes"));
        }

        let mut warnings = Vec::new();
        let mut classes: Vec<(String, Vec<Vec<String>>)> = Vec::with_capacity(class_map.len());
        for (raw_name, sets) in class_map {
            let name = normalize_word(raw_name);
            if name.is_empty() {
                return Err(schema("classes", Some(raw_name), "empty class name"));
            }
            if classes.iter().any(|(n, _)| *n == name) {
                return Err(schema("classes", Some(&name), "class listed twice after normalization"));
            }
            let sets = sets
                .as_array()
                .ok_or_else(|| schema("classes", Some(&name), "expected a list of word lists"))?;
            if sets.len() != num_sets {
                return Err(VocabError::Structure(format!(
                    "class {name:?} has {} sets, expected {num_sets}",
                    sets.len()
                )));
            }
            let mut parsed = Vec::with_capacity(num_sets);
            for (k, set) in sets.iter().enumerate() {
                let field = format!("classes[{k}]");
                let words = set
                    .as_array()
                    .ok_or_else(|| schema(&field, Some(&name), "expected a list of words"))?;
                let mut out: Vec<String> = Vec::with_capacity(words.len());
                for w in words {
                    let w = w
                        .as_str()
                        .ok_or_else(|| schema(&field, Some(&name), "words must be strings"))?;
                    let w = normalize_word(w);
                    if w.is_empty() {
                        return Err(schema(&field, Some(&name), "empty word"));
                    }
                    if out.contains(&w) {
                        warnings.push(format!("class {name:?} set {k}: dropped duplicate {w:?}"));
                        continue;
                    }
                    out.push(w);
                }
                if out.len() > num_words {
                    return Err(schema(
                        &field,
                        Some(&name),
                        format!("{} words exceed num_words = {num_words}", out.len()),
                    ));
                }
                if out.len() < num_words {
                    warnings.push(format!("class {name:?} set {k}: {} of {num_words} words", out.len()));
                }
                parsed.push(out);
            }
            classes.push((name, parsed));
        }
        for w in &warnings {
            log::warn!("{w}");
        }
        Ok((
            Self {
                dataset,
                generator,
                num_words,
                num_sets,
                classes,
            },
            warnings,
        ))
    }

    pub fn to_json(&self) -> String {
        let classes: Map<String, Value> = self.classes.iter().map(|(n, sets)| (n.clone(), json!(sets))).collect();
        let v = json!({
            "dataset": self.dataset,
            "generator": self.generator,
            "num_words": self.num_words,
            "num_sets": self.num_sets,
            "classes": classes,
        });
        serde_json::to_string_pretty(&v).expect("plain JSON values serialize")
    }

    pub fn class_names(&self) -> impl Iterator<Item = &str> {
        self.classes.iter().map(|(n, _)| n.as_str())
    }

    pub fn sets(&self, class_name: &str) -> Result<&[Vec<String>], VocabError> {
        let key = normalize_word(class_name);
        self.classes
            .iter()
            .find(|(n, _)| *n == key)
            .map(|(_, s)| s.as_slice())
            .ok_or(VocabError::UnknownClass(class_name.to_owned()))
    }

    /// The set used during training: always set 0.
    pub fn training_set(&self, class_name: &str) -> Result<&[String], VocabError> {
        Ok(&self.sets(class_name)?[0])
    }

    /// All K sets in file order.
    pub fn inference_sets(&self, class_name: &str) -> Result<&[Vec<String>], VocabError> {
        self.sets(class_name)
    }

    /// Every word of every set, for building a tokenizer vocabulary.
    pub fn all_words(&self) -> Vec<String> {
        self.classes
            .iter()
            .flat_map(|(n, sets)| std::iter::once(n.clone()).chain(sets.iter().flatten().cloned()))
            .collect()
    }

    /// Fails if any of `classes` has no entry.
    pub fn require_classes<S: AsRef<str>>(&self, classes: &[S]) -> Result<(), VocabError> {
        for c in classes {
            self.sets(c.as_ref())?;
        }
        Ok(())
    }
}

pub fn load_vocab(path: &Path) -> Result<(AttributeVocab, Vec<String>), VocabError> {
    AttributeVocab::from_json(&std::fs::read_to_string(path)?)
}

/// Longest prefix of set `k` of `class_name` that fits the context next to
/// SOS, `prompts` soft prompts, `class_tokens` class tokens and EOS. Words
/// are never split.
pub fn fit_to_budget(
    v: &AttributeVocab,
    class_name: &str,
    k: usize,
    prompts: usize,
    class_tokens: usize,
    ctx_len: usize,
) -> Result<Vec<String>, VocabError> {
    let sets = v.sets(class_name)?;
    let set = sets.get(k).ok_or_else(|| VocabError::UnknownSet {
        class: class_name.to_owned(),
        k,
    })?;
    fit_words(set, prompts, class_tokens, ctx_len)
}

/// [`fit_to_budget`] over an explicit word list.
pub fn fit_words(
    words: &[String],
    prompts: usize,
    class_tokens: usize,
    ctx_len: usize,
) -> Result<Vec<String>, VocabError> {
    let fixed = 2 + prompts + class_tokens;
    if fixed > ctx_len {
        return Err(PromptError::Overflow { needed: fixed, ctx_len }.into());
    }
    let mut budget = ctx_len - fixed;
    let mut out = Vec::new();
    for w in words {
        let cost = split_pieces(w).len();
        if cost > budget {
            break;
        }
        budget -= cost;
        out.push(w.clone());
    }
    Ok(out)
}
