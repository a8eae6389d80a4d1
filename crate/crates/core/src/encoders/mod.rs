//! Frozen dual encoder: a small transformer text encoder and a toy (or
//! pass-through) image encoder.
//!
//! Parameters are immutable once built: there are no mutable accessors, and
//! every parameter set remembers the checksum it was built with so training
//! code can assert that nothing moved.

mod export;

pub use export::{
    load_embedding_export, token_table_from_export, EmbeddingExport, ExportKind, EXPORT_MAGIC, EXPORT_VERSION,
};

use sha2::{Digest, Sha256};

use crate::autodiff::{attention_block, gaussian, BlockParams, BoundBlock, Tape, Tensor, TensorError, Var, LN_EPS};
use crate::prompt::{assemble_image_input_on, AssembledQuery, PromptError, Slot};
use crate::rng::{rng_for, stream};

#[derive(Debug, thiserror::Error)]
pub enum EncoderError {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    Dimension { expected: usize, found: usize },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("format error at byte {offset}: {reason}")]
    Format { offset: usize, reason: String },
    #[error("frozen parameters changed: {0}")]
    Thawed(&'static str),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderConfig {
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub ctx_len: usize,
    pub ffn_mult: usize,
    /// Width of the image encoder's token space.
    pub image_width: usize,
    pub image_depth: usize,
    /// Raw width of one image token before projection.
    pub patch_dim: usize,
    pub patches: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            depth: 2,
            heads: 4,
            ctx_len: 77,
            ffn_mult: 4,
            image_width: 64,
            image_depth: 2,
            patch_dim: 32,
            patches: 8,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), EncoderError> {
        let bad = |msg: &str| Err(EncoderError::Config(msg.into()));
        if self.dim == 0 || self.image_width == 0 || self.patch_dim == 0 {
            return bad("widths must be positive");
        }
        if self.heads == 0 || self.dim % self.heads != 0 || self.image_width % self.heads != 0 {
            return bad("dim and image_width must be divisible by heads");
        }
        if self.ctx_len < 2 {
            return bad("ctx_len must fit SOS and EOS");
        }
        if self.ffn_mult == 0 {
            return bad("ffn_mult must be positive");
        }
        if self.patches == 0 {
            return bad("images need at least one patch");
        }
        Ok(())
    }
}

/// A random `vocab_size × dim` table with N(0, (1/√d)²) entries.
pub fn random_token_table(seed: u64, vocab_size: usize, dim: usize) -> Tensor {
    let mut rng = rng_for(seed, stream::CLASS_TOKENS);
    gaussian(vocab_size, dim, 1.0 / (dim as f64).sqrt(), &mut rng)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TextEncoderParams {
    token_table: Tensor,
    positional: Tensor,
    blocks: Vec<BlockParams>,
    ln_gain: Tensor,
    ln_shift: Tensor,
    projection: Tensor,
    ctx_len: usize,
    built_checksum: [u8; 32],
}

impl TextEncoderParams {
    pub fn token_table(&self) -> &Tensor {
        &self.token_table
    }

    pub fn ctx_len(&self) -> usize {
        self.ctx_len
    }

    pub fn dim(&self) -> usize {
        self.projection.cols()
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    /// SHA-256 over every weight, table included.
    pub fn checksum(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        self.token_table.feed(&mut h);
        self.positional.feed(&mut h);
        for b in &self.blocks {
            b.feed(&mut h);
        }
        self.ln_gain.feed(&mut h);
        self.ln_shift.feed(&mut h);
        self.projection.feed(&mut h);
        h.finalize().into()
    }

    pub fn verify_frozen(&self) -> Result<(), EncoderError> {
        if self.checksum() == self.built_checksum {
            Ok(())
        } else {
            Err(EncoderError::Thawed("text encoder"))
        }
    }

    /// Registers the weights on `tape` as constants.
    pub fn bind(&self, tape: &mut Tape) -> BoundTextEncoder {
        BoundTextEncoder {
            blocks: self.blocks.iter().map(|b| b.bind(tape)).collect(),
            ln_gain: tape.constant(self.ln_gain.clone()),
            ln_shift: tape.constant(self.ln_shift.clone()),
            projection: tape.constant(self.projection.clone()),
        }
    }

    /// Feature of one query outside any training graph.
    pub fn encode(&self, query: &AssembledQuery) -> Result<Tensor, EncoderError> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let out = encode_text(&mut tape, self, &bound, query, None)?;
        Ok(tape.value(out).clone())
    }
}

/// Text-encoder weights living on a tape.
#[derive(Clone, Debug)]
pub struct BoundTextEncoder {
    blocks: Vec<BoundBlock>,
    ln_gain: Var,
    ln_shift: Var,
    projection: Var,
}

/// `g_T(query)` as a `1 × d` node.
///
/// When `soft` is given, it replaces the query's soft-prompt rows so the
/// result is differentiable with respect to them. Rows after EOS are never
/// read, so padding cannot influence the feature.
pub fn encode_text(
    tape: &mut Tape,
    params: &TextEncoderParams,
    bound: &BoundTextEncoder,
    query: &AssembledQuery,
    soft: Option<Var>,
) -> Result<Var, EncoderError> {
    let dim = params.dim();
    let (len, qdim) = (query.ctx_len(), query.embeddings.cols());
    if qdim != dim {
        return Err(EncoderError::Dimension {
            expected: dim,
            found: qdim,
        });
    }
    if len != params.ctx_len {
        return Err(EncoderError::Dimension {
            expected: params.ctx_len,
            found: len,
        });
    }
    let used = query.used_len();
    let m = query.num_soft();
    let rows = |a: usize, b: usize| Tensor::matrix(b - a, dim, query.embeddings.data()[a * dim..b * dim].to_vec());

    let x = match soft {
        Some(p) if m > 0 => {
            let shape = tape.value(p).shape().to_vec();
            if shape != [m, dim] {
                return Err(EncoderError::Dimension {
                    expected: m,
                    found: shape[0],
                });
            }
            debug_assert!(matches!(query.slots[1], Slot::Soft(0)));
            let head = tape.constant(rows(0, 1));
            let tail = tape.constant(rows(1 + m, used));
            tape.concat_rows(&[head, p, tail])?
        }
        _ => tape.constant(rows(0, used)),
    };
    let pos = tape.constant(Tensor::matrix(
        used,
        dim,
        params.positional.data()[..used * dim].to_vec(),
    ));
    let mut h = tape.add(x, pos)?;
    for block in &bound.blocks {
        h = attention_block(tape, h, block, params.ctx_len)?;
    }
    let eos = tape.slice_rows(h, used - 1, used)?;
    let eos = tape.layer_norm(eos, bound.ln_gain, bound.ln_shift, LN_EPS)?;
    Ok(tape.matmul(eos, bound.projection)?)
}

/// One image: a precomputed feature (pass-through) or a token matrix.
#[derive(Clone, Debug, PartialEq)]
pub enum ImageInput {
    /// `1 × d`.
    Feature(Tensor),
    /// `patches × patch_dim`.
    Tokens(Tensor),
}

impl ImageInput {
    pub fn tensor(&self) -> &Tensor {
        match self {
            ImageInput::Feature(t) | ImageInput::Tokens(t) => t,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyImageEncoder {
    projector: Tensor,
    blocks: Vec<BlockParams>,
    projection: Tensor,
    patches: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub enum ImageEncoderKind {
    Toy(ToyImageEncoder),
    PassThrough { dim: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageEncoderParams {
    kind: ImageEncoderKind,
    built_checksum: [u8; 32],
}

impl ImageEncoderParams {
    pub fn pass_through(dim: usize) -> Self {
        let kind = ImageEncoderKind::PassThrough { dim };
        Self {
            built_checksum: kind_checksum(&kind),
            kind,
        }
    }

    pub fn kind(&self) -> &ImageEncoderKind {
        &self.kind
    }

    pub fn is_pass_through(&self) -> bool {
        matches!(self.kind, ImageEncoderKind::PassThrough { .. })
    }

    pub fn checksum(&self) -> [u8; 32] {
        kind_checksum(&self.kind)
    }

    pub fn verify_frozen(&self) -> Result<(), EncoderError> {
        if self.checksum() == self.built_checksum {
            Ok(())
        } else {
            Err(EncoderError::Thawed("image encoder"))
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundImageEncoder {
        match &self.kind {
            ImageEncoderKind::Toy(t) => BoundImageEncoder::Toy {
                projector: tape.constant(t.projector.clone()),
                blocks: t.blocks.iter().map(|b| b.bind(tape)).collect(),
                projection: tape.constant(t.projection.clone()),
            },
            ImageEncoderKind::PassThrough { .. } => BoundImageEncoder::PassThrough,
        }
    }

    /// Feature of one image outside any training graph.
    pub fn encode(&self, input: &ImageInput, vision: Option<&Tensor>) -> Result<Tensor, EncoderError> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let v = vision.map(|v| tape.constant(v.clone()));
        let out = encode_image(&mut tape, self, &bound, input, v)?;
        Ok(tape.value(out).clone())
    }
}

fn kind_checksum(kind: &ImageEncoderKind) -> [u8; 32] {
    let mut h = Sha256::new();
    match kind {
        ImageEncoderKind::Toy(t) => {
            h.update([0u8]);
            t.projector.feed(&mut h);
            for b in &t.blocks {
                b.feed(&mut h);
            }
            t.projection.feed(&mut h);
        }
        ImageEncoderKind::PassThrough { dim } => {
            h.update([1u8]);
            h.update((*dim as u64).to_le_bytes());
        }
    }
    h.finalize().into()
}

#[derive(Clone, Debug)]
pub enum BoundImageEncoder {
    Toy {
        projector: Var,
        blocks: Vec<BoundBlock>,
        projection: Var,
    },
    PassThrough,
}

/// `g_V(x̃)` as a `1 × d` node; differentiable with respect to `vision`.
pub fn encode_image(
    tape: &mut Tape,
    params: &ImageEncoderParams,
    bound: &BoundImageEncoder,
    input: &ImageInput,
    vision: Option<Var>,
) -> Result<Var, EncoderError> {
    match (&params.kind, bound, input) {
        (ImageEncoderKind::PassThrough { dim }, _, ImageInput::Feature(f)) => {
            if vision.is_some() {
                return Err(EncoderError::Config(
                    "vision prompts need the toy image encoder, not pass-through features".into(),
                ));
            }
            if f.shape() != [1, *dim] {
                return Err(EncoderError::Dimension {
                    expected: *dim,
                    found: f.numel(),
                });
            }
            Ok(tape.constant(f.clone()))
        }
        (
            ImageEncoderKind::Toy(toy),
            BoundImageEncoder::Toy {
                projector,
                blocks,
                projection,
            },
            ImageInput::Tokens(x),
        ) => {
            if x.cols() != toy.projector.rows() {
                return Err(EncoderError::Dimension {
                    expected: toy.projector.rows(),
                    found: x.cols(),
                });
            }
            if x.rows() != toy.patches {
                return Err(EncoderError::Dimension {
                    expected: toy.patches,
                    found: x.rows(),
                });
            }
            let xv = tape.constant(x.clone());
            let tokens = tape.matmul(xv, *projector)?;
            let mut h = assemble_image_input_on(tape, tokens, vision)?;
            let ctx = tape.value(h).rows();
            for block in blocks {
                h = attention_block(tape, h, block, ctx)?;
            }
            let ones = tape.constant(Tensor::filled(1, ctx, 1.0 / ctx as f64));
            let pooled = tape.matmul(ones, h)?;
            Ok(tape.matmul(pooled, *projection)?)
        }
        _ => Err(EncoderError::Config(
            "image input kind does not match the image encoder mode".into(),
        )),
    }
}

/// Builds both encoders from one seed. The text encoder embeds with
/// `token_table`; `toy_image` selects the toy image encoder over
/// pass-through features.
pub fn build_frozen_encoders(
    seed: u64,
    cfg: &EncoderConfig,
    token_table: Tensor,
    toy_image: bool,
) -> Result<(TextEncoderParams, ImageEncoderParams), EncoderError> {
    cfg.validate()?;
    if token_table.cols() != cfg.dim {
        return Err(EncoderError::Dimension {
            expected: cfg.dim,
            found: token_table.cols(),
        });
    }
    let mut rng = rng_for(seed, stream::ENCODER);
    let d = cfg.dim;
    let std = 1.0 / (d as f64).sqrt();
    let positional = gaussian(cfg.ctx_len, d, std, &mut rng);
    let blocks = (0..cfg.depth)
        .map(|_| BlockParams::random(d, cfg.heads, cfg.ffn_mult, &mut rng))
        .collect();
    let projection = gaussian(d, d, std, &mut rng);
    let mut text = TextEncoderParams {
        token_table,
        positional,
        blocks,
        ln_gain: Tensor::filled(1, d, 1.0),
        ln_shift: Tensor::zeros(1, d),
        projection,
        ctx_len: cfg.ctx_len,
        built_checksum: [0; 32],
    };
    text.built_checksum = text.checksum();

    let image = if toy_image {
        let w = cfg.image_width;
        let kind = ImageEncoderKind::Toy(ToyImageEncoder {
            projector: gaussian(cfg.patch_dim, w, 1.0 / (cfg.patch_dim as f64).sqrt(), &mut rng),
            blocks: (0..cfg.image_depth)
                .map(|_| BlockParams::random(w, cfg.heads, cfg.ffn_mult, &mut rng))
                .collect(),
            projection: gaussian(w, d, 1.0 / (w as f64).sqrt(), &mut rng),
            patches: cfg.patches,
        });
        ImageEncoderParams {
            built_checksum: kind_checksum(&kind),
            kind,
        }
    } else {
        ImageEncoderParams::pass_through(d)
    };
    Ok((text, image))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompt::{init_soft_prompts, InitMode, QueryBuilder, SoftPromptBank};
    use crate::tokenizer::Vocabulary;

    fn small() -> EncoderConfig {
        EncoderConfig {
            dim: 8,
            depth: 2,
            heads: 2,
            ctx_len: 12,
            ffn_mult: 2,
            image_width: 8,
            image_depth: 1,
            patch_dim: 6,
            patches: 3,
        }
    }

    fn setup() -> (Vocabulary, TextEncoderParams, ImageEncoderParams, SoftPromptBank) {
        let vocab = Vocabulary::build(&[vec!["fish", "water", "bowl"]]).unwrap();
        let cfg = small();
        let table = random_token_table(3, vocab.size(), cfg.dim);
        let (t, i) = build_frozen_encoders(3, &cfg, table, true).unwrap();
        let bank = init_soft_prompts(InitMode::Gaussian, 8, 2, 1, None, &vocab, t.token_table()).unwrap();
        (vocab, t, i, bank)
    }

    #[test]
    fn default_config() {
        let c = EncoderConfig::default();
        assert_eq!((c.dim, c.depth, c.heads, c.ctx_len), (64, 2, 4, 77));
    }

    #[test]
    fn same_seed_same_checksum() {
        let cfg = small();
        let a = build_frozen_encoders(1, &cfg, random_token_table(1, 5, 8), true).unwrap();
        let b = build_frozen_encoders(1, &cfg, random_token_table(1, 5, 8), true).unwrap();
        let c = build_frozen_encoders(2, &cfg, random_token_table(1, 5, 8), true).unwrap();
        assert_eq!(a.0.checksum(), b.0.checksum());
        assert_eq!(a.1.checksum(), b.1.checksum());
        assert_ne!(a.0.checksum(), c.0.checksum());
        let deep = EncoderConfig { depth: 3, ..cfg };
        let d = build_frozen_encoders(1, &deep, random_token_table(1, 5, 8), true).unwrap();
        assert_eq!(d.0.depth(), 3);
        a.0.verify_frozen().unwrap();
        a.1.verify_frozen().unwrap();
    }

    #[test]
    fn pad_rows_do_not_matter() {
        let (vocab, t, _, bank) = setup();
        let q = QueryBuilder::new(&vocab, t.token_table(), 12)
            .assemble_text_query("fish", 0, &["water".into()], 0, &bank)
            .unwrap();
        let mut noisy = q.clone();
        let d = 8;
        for v in &mut noisy.embeddings.data_mut()[q.used_len() * d..] {
            *v = 123.0;
        }
        let a = t.encode(&q).unwrap();
        assert_eq!(a, t.encode(&q).unwrap());
        assert_eq!(a, t.encode(&noisy).unwrap());
        assert_eq!(a.shape(), &[1, 8]);
    }

    #[test]
    fn soft_var_matches_query_values() {
        let (vocab, t, _, bank) = setup();
        let q = QueryBuilder::new(&vocab, t.token_table(), 12)
            .assemble_text_query("fish", 0, &[], 0, &bank)
            .unwrap();
        let mut tape = Tape::new();
        let bound = t.bind(&mut tape);
        let p = tape.param(bank.text.clone().unwrap());
        let out = encode_text(&mut tape, &t, &bound, &q, Some(p)).unwrap();
        assert_eq!(tape.value(out), &t.encode(&q).unwrap());
    }

    #[test]
    fn wrong_width_rejected() {
        let (vocab, t, _, _) = setup();
        let table = Tensor::zeros(vocab.size(), 4);
        let q = QueryBuilder::new(&vocab, &table, 12)
            .assemble_text_query("fish", 0, &[], 0, &SoftPromptBank::empty())
            .unwrap();
        assert!(matches!(
            t.encode(&q),
            Err(EncoderError::Dimension { expected: 8, found: 4 })
        ));
    }

    #[test]
    fn image_modes() {
        let (_, _, img, _) = setup();
        let x = ImageInput::Tokens(random_token_table(9, 3, 6));
        let f = img.encode(&x, None).unwrap();
        assert_eq!(f, img.encode(&x, None).unwrap());
        assert_eq!(f.shape(), &[1, 8]);
        let vp = SoftPromptBank::empty().with_vision_prompts(2, 8, 4);
        let g = img.encode(&x, vp.vision.as_ref()).unwrap();
        assert_ne!(f, g);

        let pass = ImageEncoderParams::pass_through(8);
        let v = ImageInput::Feature(Tensor::matrix(1, 8, (0..8).map(f64::from).collect()));
        assert_eq!(&pass.encode(&v, None).unwrap(), v.tensor());
        assert!(matches!(
            pass.encode(&v, vp.vision.as_ref()),
            Err(EncoderError::Config(_))
        ));
        assert!(matches!(pass.encode(&x, None), Err(EncoderError::Config(_))));
    }
}
