//! Soft prompt bank and construction of the prompted text and image inputs.
//!
//! A text query is laid out as
//! `[SOS, p_1..p_M, class tokens, attribute tokens, EOS, PAD..]` and always
//! has exactly `ctx_len` rows. Padding rows are zero and never reach the
//! encoder.

use crate::autodiff::{Tape, Tensor, TensorError, Var};
use crate::rng::{rng_for, stream};
use crate::tokenizer::{OnUnknown, TokenizerError, Vocabulary, EOS, SOS};

/// Standard deviation of Gaussian soft-prompt initialization.
pub const PROMPT_INIT_STD: f64 = 0.02;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum PromptError {
    #[error(
        "query needs {needed} slots but context length is {ctx_len} ({} over)",
        needed - ctx_len
    )]
    Overflow { needed: usize, ctx_len: usize },
    #[error("dimension mismatch: expected {expected}, found {found}")]
    Dimension { expected: usize, found: usize },
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

impl PromptError {
    /// Slots over budget, for overflow errors.
    pub fn excess(&self) -> Option<usize> {
        match self {
            PromptError::Overflow { needed, ctx_len } => Some(needed - ctx_len),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum InitMode {
    #[default]
    Gaussian,
    Phrase,
}

/// The trainable context vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftPromptBank {
    /// `M × d`; `None` when `M = 0`.
    pub text: Option<Tensor>,
    /// `M_v × d_v`; `None` when vision prompts are disabled.
    pub vision: Option<Tensor>,
    pub init_mode: InitMode,
}

impl SoftPromptBank {
    pub fn empty() -> Self {
        Self {
            text: None,
            vision: None,
            init_mode: InitMode::Gaussian,
        }
    }

    pub fn num_text(&self) -> usize {
        self.text.as_ref().map_or(0, Tensor::rows)
    }

    pub fn num_vision(&self) -> usize {
        self.vision.as_ref().map_or(0, Tensor::rows)
    }

    /// Adds `count` Gaussian vision prompts of width `dim`.
    pub fn with_vision_prompts(mut self, count: usize, dim: usize, seed: u64) -> Self {
        self.vision = (count > 0).then(|| gaussian_rows(count, dim, seed, stream::VISION_PROMPTS));
        self
    }

    pub fn is_finite(&self) -> bool {
        self.text.iter().chain(&self.vision).all(Tensor::is_finite)
    }
}

fn gaussian_rows(rows: usize, cols: usize, seed: u64, stream_id: u64) -> Tensor {
    crate::autodiff::gaussian(rows, cols, PROMPT_INIT_STD, &mut rng_for(seed, stream_id))
}

/// Builds the text prompt bank.
///
/// Gaussian mode draws from N(0, 0.02²); phrase mode copies the embedding
/// rows of `phrase`, which must tokenize to exactly `count` tokens.
pub fn init_soft_prompts(
    mode: InitMode,
    dim: usize,
    count: usize,
    seed: u64,
    phrase: Option<&str>,
    vocab: &Vocabulary,
    table: &Tensor,
) -> Result<SoftPromptBank, PromptError> {
    let text = match mode {
        InitMode::Gaussian => (count > 0).then(|| gaussian_rows(count, dim, seed, stream::SOFT_PROMPTS)),
        InitMode::Phrase => {
            let phrase = phrase.ok_or_else(|| PromptError::Config("phrase init needs a phrase".into()))?;
            let seq = vocab.encode(phrase, OnUnknown::Error)?;
            if seq.len() != count {
                return Err(PromptError::Config(format!(
                    "phrase {phrase:?} has {} tokens but {count} prompts were requested",
                    seq.len()
                )));
            }
            if table.cols() != dim {
                return Err(PromptError::Dimension {
                    expected: dim,
                    found: table.cols(),
                });
            }
            if count == 0 {
                None
            } else {
                let rows: Vec<f64> = seq.ids.iter().flat_map(|&id| table.row_slice(id).to_vec()).collect();
                Some(Tensor::matrix(count, dim, rows))
            }
        }
    };
    Ok(SoftPromptBank {
        text,
        vision: None,
        init_mode: mode,
    })
}

/// Provenance of one row of an assembled query.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Slot {
    Sos,
    Soft(usize),
    Class,
    Attr(usize),
    Eos,
    Pad,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AssembledQuery {
    /// `ctx_len × d`.
    pub embeddings: Tensor,
    pub slots: Vec<Slot>,
    pub class_index: usize,
    pub attr_set_index: usize,
}

impl AssembledQuery {
    pub fn eos_position(&self) -> usize {
        self.slots
            .iter()
            .position(|s| *s == Slot::Eos)
            .expect("assembled query always has an EOS")
    }

    /// Rows up to and including EOS.
    pub fn used_len(&self) -> usize {
        self.eos_position() + 1
    }

    pub fn num_soft(&self) -> usize {
        self.slots.iter().filter(|s| matches!(s, Slot::Soft(_))).count()
    }

    pub fn ctx_len(&self) -> usize {
        self.slots.len()
    }
}

/// Assembles text queries against a frozen token-embedding table.
#[derive(Clone, Copy, Debug)]
pub struct QueryBuilder<'a> {
    pub vocab: &'a Vocabulary,
    pub table: &'a Tensor,
    pub ctx_len: usize,
    pub on_unknown: OnUnknown,
}

impl<'a> QueryBuilder<'a> {
    pub fn new(vocab: &'a Vocabulary, table: &'a Tensor, ctx_len: usize) -> Self {
        Self {
            vocab,
            table,
            ctx_len,
            on_unknown: OnUnknown::Error,
        }
    }

    /// Slots the query for `class_name` with `attrs` would occupy.
    pub fn required_slots(&self, class_name: &str, attrs: &[String], num_soft: usize) -> Result<usize, PromptError> {
        let class_tokens = self.vocab.encode(class_name, self.on_unknown)?.len();
        let mut attr_tokens = 0;
        for a in attrs {
            attr_tokens += self.vocab.encode(a, self.on_unknown)?.len();
        }
        Ok(2 + num_soft + class_tokens + attr_tokens)
    }

    pub fn assemble_text_query(
        &self,
        class_name: &str,
        class_index: usize,
        attrs: &[String],
        attr_set_index: usize,
        bank: &SoftPromptBank,
    ) -> Result<AssembledQuery, PromptError> {
        let dim = self.table.cols();
        if let Some(p) = &bank.text {
            if p.cols() != dim {
                return Err(PromptError::Dimension {
                    expected: dim,
                    found: p.cols(),
                });
            }
        }
        let class_ids = self.vocab.encode(class_name, self.on_unknown)?.ids;
        let mut attr_ids = Vec::new();
        for (n, a) in attrs.iter().enumerate() {
            for id in self.vocab.encode(a, self.on_unknown)?.ids {
                attr_ids.push((n, id));
            }
        }
        let m = bank.num_text();
        let needed = 2 + m + class_ids.len() + attr_ids.len();
        if needed > self.ctx_len {
            return Err(PromptError::Overflow {
                needed,
                ctx_len: self.ctx_len,
            });
        }

        let mut data = Vec::with_capacity(self.ctx_len * dim);
        let mut slots = Vec::with_capacity(self.ctx_len);
        data.extend_from_slice(self.table.row_slice(SOS));
        slots.push(Slot::Sos);
        for i in 0..m {
            data.extend_from_slice(bank.text.as_ref().expect("m > 0").row_slice(i));
            slots.push(Slot::Soft(i));
        }
        for &id in &class_ids {
            data.extend_from_slice(self.table.row_slice(id));
            slots.push(Slot::Class);
        }
        for &(n, id) in &attr_ids {
            data.extend_from_slice(self.table.row_slice(id));
            slots.push(Slot::Attr(n));
        }
        data.extend_from_slice(self.table.row_slice(EOS));
        slots.push(Slot::Eos);
        data.resize(self.ctx_len * dim, 0.0);
        slots.resize(self.ctx_len, Slot::Pad);

        Ok(AssembledQuery {
            embeddings: Tensor::matrix(self.ctx_len, dim, data),
            slots,
            class_index,
            attr_set_index,
        })
    }
}

/// Appends vision prompt rows after the image token rows.
pub fn assemble_image_input(image_tokens: &Tensor, bank: &SoftPromptBank) -> Result<Tensor, PromptError> {
    let Some(v) = &bank.vision else {
        return Ok(image_tokens.clone());
    };
    if v.cols() != image_tokens.cols() {
        return Err(PromptError::Dimension {
            expected: image_tokens.cols(),
            found: v.cols(),
        });
    }
    let mut data = image_tokens.data().to_vec();
    data.extend_from_slice(v.data());
    Ok(Tensor::matrix(image_tokens.rows() + v.rows(), v.cols(), data))
}

/// Tape form of [`assemble_image_input`]; `vision` is the bank's leaf, if any.
pub fn assemble_image_input_on(tape: &mut Tape, image_tokens: Var, vision: Option<Var>) -> Result<Var, PromptError> {
    let Some(v) = vision else { return Ok(image_tokens) };
    let (dt, dv) = (tape.value(image_tokens).cols(), tape.value(v).cols());
    if dt != dv {
        return Err(PromptError::Dimension {
            expected: dt,
            found: dv,
        });
    }
    Ok(tape.concat_rows(&[image_tokens, v])?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gaussian;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn world(words: &[&str], dim: usize) -> (Vocabulary, Tensor) {
        let vocab = Vocabulary::build(&[words.to_vec()]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let table = gaussian(vocab.size(), dim, 1.0, &mut rng);
        (vocab, table)
    }

    fn attrs(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("w{i}")).collect()
    }

    #[test]
    fn full_budget_layout() {
        let mut words: Vec<String> = attrs(32);
        words.push("goldfish".into());
        let refs: Vec<&str> = words.iter().map(String::as_str).collect();
        let (vocab, table) = world(&refs, 8);
        let bank = init_soft_prompts(InitMode::Gaussian, 8, 4, 1, None, &vocab, &table).unwrap();
        let b = QueryBuilder::new(&vocab, &table, 77);
        let q = b.assemble_text_query("goldfish", 0, &attrs(32), 0, &bank).unwrap();
        assert_eq!(q.used_len(), 39);
        assert_eq!(q.slots.iter().filter(|s| **s == Slot::Pad).count(), 38);
        assert_eq!(q.eos_position(), 1 + 4 + 1 + 32);
        assert_eq!(q.slots[0], Slot::Sos);
        assert_eq!(q.embeddings.shape(), &[77, 8]);
        assert!(q.embeddings.data()[39 * 8..].iter().all(|&v| v == 0.0));
        assert_eq!(q.embeddings.row_slice(1), bank.text.as_ref().unwrap().row_slice(0));
    }

    #[test]
    fn no_attributes_is_plain_soft_prompt_layout() {
        let (vocab, table) = world(&["goldfish"], 4);
        let bank = init_soft_prompts(InitMode::Gaussian, 4, 4, 1, None, &vocab, &table).unwrap();
        let q = QueryBuilder::new(&vocab, &table, 77)
            .assemble_text_query("goldfish", 0, &[], 0, &bank)
            .unwrap();
        let expect = [
            Slot::Sos,
            Slot::Soft(0),
            Slot::Soft(1),
            Slot::Soft(2),
            Slot::Soft(3),
            Slot::Class,
            Slot::Eos,
        ];
        assert_eq!(&q.slots[..7], &expect);
        assert!(q.slots[7..].iter().all(|s| *s == Slot::Pad));
    }

    #[test]
    fn overflow_reports_excess() {
        let mut words = attrs(5);
        words.push("sea lake".into());
        let refs: Vec<&str> = words.iter().map(String::as_str).collect();
        let (vocab, table) = world(&refs, 4);
        let bank = init_soft_prompts(InitMode::Gaussian, 4, 4, 1, None, &vocab, &table).unwrap();
        let err = QueryBuilder::new(&vocab, &table, 10)
            .assemble_text_query("sea lake", 0, &attrs(5), 0, &bank)
            .unwrap_err();
        assert_eq!(
            err,
            PromptError::Overflow {
                needed: 13,
                ctx_len: 10
            }
        );
        assert_eq!(err.excess(), Some(3));
        assert!(err.to_string().contains("3 over"));
    }

    #[test]
    fn unknown_attribute_propagates() {
        let (vocab, table) = world(&["goldfish"], 4);
        let err = QueryBuilder::new(&vocab, &table, 77)
            .assemble_text_query("goldfish", 0, &["mystery".to_string()], 0, &SoftPromptBank::empty())
            .unwrap_err();
        assert!(matches!(err, PromptError::Tokenizer(TokenizerError::UnknownWord(_))));
    }

    #[test]
    fn attribute_sets_differ_only_in_attr_rows() {
        let (vocab, table) = world(&["fish", "w0", "w1", "w2", "x0", "x1"], 4);
        let bank = init_soft_prompts(InitMode::Gaussian, 4, 2, 3, None, &vocab, &table).unwrap();
        let b = QueryBuilder::new(&vocab, &table, 12);
        let a = b.assemble_text_query("fish", 0, &attrs(3), 0, &bank).unwrap();
        let c = b
            .assemble_text_query("fish", 0, &["x0".to_string(), "x1".to_string()], 1, &bank)
            .unwrap();
        for r in 0..4 {
            assert_eq!(a.slots[r], c.slots[r]);
            assert_eq!(a.embeddings.row_slice(r), c.embeddings.row_slice(r));
        }
        assert_ne!(a.eos_position(), c.eos_position());
        // Reassembly is bitwise identical.
        assert_eq!(a, b.assemble_text_query("fish", 0, &attrs(3), 0, &bank).unwrap());
    }

    #[test]
    fn prompt_init_modes() {
        let (vocab, table) = world(&["a", "photo", "of"], 6);
        let a = init_soft_prompts(InitMode::Gaussian, 6, 4, 7, None, &vocab, &table).unwrap();
        let b = init_soft_prompts(InitMode::Gaussian, 6, 4, 7, None, &vocab, &table).unwrap();
        let c = init_soft_prompts(InitMode::Gaussian, 6, 4, 8, None, &vocab, &table).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.text, c.text);

        let p = init_soft_prompts(InitMode::Phrase, 6, 4, 0, Some("a photo of a"), &vocab, &table).unwrap();
        let rows = p.text.unwrap();
        for (r, w) in ["a", "photo", "of", "a"].iter().enumerate() {
            assert_eq!(rows.row_slice(r), table.row_slice(vocab.id(w).unwrap()));
        }
        let err = init_soft_prompts(InitMode::Phrase, 6, 3, 0, Some("a photo of a"), &vocab, &table);
        assert!(matches!(err, Err(PromptError::Config(_))));
    }

    #[test]
    fn image_input_assembly() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = gaussian(4, 6, 1.0, &mut rng);
        assert_eq!(assemble_image_input(&x, &SoftPromptBank::empty()).unwrap(), x);
        let bank = SoftPromptBank::empty().with_vision_prompts(2, 6, 5);
        let y = assemble_image_input(&x, &bank).unwrap();
        assert_eq!(y.shape(), &[6, 6]);
        assert_eq!(&y.data()[24..], bank.vision.as_ref().unwrap().data());
        let narrow = SoftPromptBank::empty().with_vision_prompts(2, 5, 5);
        assert!(matches!(
            assemble_image_input(&x, &narrow),
            Err(PromptError::Dimension { .. })
        ));
    }
}
