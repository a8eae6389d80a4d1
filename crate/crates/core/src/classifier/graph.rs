//! The differentiable scoring path shared by training, evaluation and the
//! gradient check.

use crate::autodiff::{Tape, Var};
use crate::encoders::{encode_image, encode_text, BoundImageEncoder, BoundTextEncoder, ImageInput};
use crate::meta_net::{bias_rows, BiasMode, BoundMetaNet, MetaNetParams};
use crate::prompt::{QueryBuilder, SoftPromptBank};

use super::{Backbone, ClassQuery, ClassifierConfig, ClassifierError};

/// Trainable tensors registered on a tape.
#[derive(Clone, Copy, Debug)]
pub struct BoundTrainables {
    pub soft: Option<Var>,
    pub vision: Option<Var>,
    pub meta: Option<BoundMetaNet>,
}

impl BoundTrainables {
    /// Registers bank and meta-net as parameters (`trainable`) or constants.
    /// The meta-net is left off the tape when `mode` is [`BiasMode::Off`].
    pub fn bind(tape: &mut Tape, bank: &SoftPromptBank, meta: &MetaNetParams, mode: BiasMode, trainable: bool) -> Self {
        let mut leaf = |t: &crate::autodiff::Tensor| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        let soft = bank.text.as_ref().map(&mut leaf);
        let vision = bank.vision.as_ref().map(&mut leaf);
        let meta = (mode != BiasMode::Off).then(|| meta.bind(tape, trainable));
        Self { soft, vision, meta }
    }

    /// Handles in [`super::TrainState`] parameter order.
    pub fn vars(&self) -> Vec<Var> {
        let mut v: Vec<Var> = self.soft.into_iter().chain(self.vision).collect();
        if let Some(m) = &self.meta {
            v.extend(m.vars());
        }
        v
    }
}

/// Frozen encoders registered once per tape.
pub struct BoundBackbone<'a> {
    pub backbone: &'a Backbone,
    pub text: BoundTextEncoder,
    pub image: BoundImageEncoder,
}

impl<'a> BoundBackbone<'a> {
    pub fn bind(tape: &mut Tape, backbone: &'a Backbone) -> Self {
        Self {
            backbone,
            text: backbone.text.bind(tape),
            image: backbone.image.bind(tape),
        }
    }
}

/// Image features stacked as `n × d`.
pub fn image_features(
    tape: &mut Tape,
    bb: &BoundBackbone<'_>,
    images: &[ImageInput],
    vision: Option<Var>,
) -> Result<Var, ClassifierError> {
    if images.is_empty() {
        return Err(ClassifierError::Config("no images to score".into()));
    }
    let rows = images
        .iter()
        .map(|x| encode_image(tape, &bb.backbone.image, &bb.image, x, vision))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(tape.concat_rows(&rows)?)
}

/// Text features of `classes` stacked as `C × d`, with `soft` substituted
/// for the prompt rows.
pub fn text_features(
    tape: &mut Tape,
    bb: &BoundBackbone<'_>,
    bank: &SoftPromptBank,
    soft: Option<Var>,
    classes: &[ClassQuery],
) -> Result<Var, ClassifierError> {
    if classes.is_empty() {
        return Err(ClassifierError::Config("no classes to score".into()));
    }
    let text = &bb.backbone.text;
    let builder = QueryBuilder::new(&bb.backbone.vocab, text.token_table(), text.ctx_len());
    let mut rows = Vec::with_capacity(classes.len());
    for (i, c) in classes.iter().enumerate() {
        let q = builder.assemble_text_query(&c.name, i, &c.attrs, 0, bank)?;
        rows.push(encode_text(tape, text, &bb.text, &q, soft)?);
    }
    Ok(tape.concat_rows(&rows)?)
}

/// Unadapted scoring: softmax over `cos(f_j, t_i) / τ`, shape `n × C`.
pub fn eq1_probs(tape: &mut Tape, f: Var, t: Var, temperature: f64) -> Result<Var, ClassifierError> {
    let fn_ = tape.normalize_rows(f)?;
    let tn = tape.normalize_rows(t)?;
    let tt = tape.transpose(tn);
    let cos = tape.matmul(fn_, tt)?;
    Ok(tape.softmax_rows(cos, temperature)?)
}

/// Row `j·C + i` pairs image `j` with class `i`.
fn pair_index(n: usize, c: usize) -> (Vec<usize>, Vec<usize>) {
    let classes = (0..n).flat_map(|_| 0..c).collect();
    let images = (0..n).flat_map(|j| std::iter::repeat_n(j, c)).collect();
    (classes, images)
}

/// Softmax over `cos(f_j, t̃_{j,i}) / τ` for pairwise adapted features
/// `adapted` (`n·C × d`, image-major).
fn pairwise_probs(
    tape: &mut Tape,
    f_rep: Var,
    adapted: Var,
    n: usize,
    c: usize,
    temperature: f64,
) -> Result<Var, ClassifierError> {
    let fn_ = tape.normalize_rows(f_rep)?;
    let tn = tape.normalize_rows(adapted)?;
    let cos = tape.row_dot(fn_, tn)?;
    let cos = tape.reshape(cos, vec![n, c])?;
    Ok(tape.softmax_rows(cos, temperature)?)
}

/// Adapted scoring from features alone, for the feature-side bias modes.
pub fn feature_adapted_probs(
    tape: &mut Tape,
    f: Var,
    t: Var,
    meta: Option<&BoundMetaNet>,
    mode: BiasMode,
    temperature: f64,
) -> Result<Var, ClassifierError> {
    let meta = match (mode, meta) {
        (BiasMode::Off, _) => return eq1_probs(tape, f, t, temperature),
        (BiasMode::BiasOnPrompts, _) => {
            return Err(ClassifierError::Config(
                "prompt-side bias needs the text encoder; use the full pipeline".into(),
            ))
        }
        (_, Some(m)) => m,
        (_, None) => return Err(ClassifierError::Config("meta-net is not bound".into())),
    };
    let (n, c) = (tape.value(f).rows(), tape.value(t).rows());
    let d = tape.value(t).cols();
    let (ci, ii) = pair_index(n, c);
    let t_rep = tape.gather_rows(t, &ci)?;
    let f_rep = tape.gather_rows(f, &ii)?;
    let raw = bias_rows(tape, meta, t_rep, f_rep)?;
    let adapted = if mode == BiasMode::AffineOnFeature {
        let scale = tape.slice_cols(raw, 0, d)?;
        let scale = tape.add_scalar(scale, 1.0);
        let shift = tape.slice_cols(raw, d, 2 * d)?;
        let scaled = tape.mul(scale, t_rep)?;
        tape.add(scaled, shift)?
    } else {
        tape.add(t_rep, raw)?
    };
    pairwise_probs(tape, f_rep, adapted, n, c, temperature)
}

/// Full forward pass: images and class queries to `n × C` probabilities.
pub fn forward_probs(
    tape: &mut Tape,
    bb: &BoundBackbone<'_>,
    bank: &SoftPromptBank,
    tr: &BoundTrainables,
    cfg: &ClassifierConfig,
    images: &[ImageInput],
    classes: &[ClassQuery],
) -> Result<Var, ClassifierError> {
    let f = image_features(tape, bb, images, tr.vision)?;
    let t = text_features(tape, bb, bank, tr.soft, classes)?;
    if cfg.bias_mode != BiasMode::BiasOnPrompts {
        return feature_adapted_probs(tape, f, t, tr.meta.as_ref(), cfg.bias_mode, cfg.temperature);
    }

    let (Some(soft), Some(meta)) = (tr.soft, tr.meta.as_ref()) else {
        return Err(ClassifierError::Config(
            "prompt-side bias needs text soft prompts and a bound meta-net".into(),
        ));
    };
    let (n, c) = (images.len(), classes.len());
    let (ci, ii) = pair_index(n, c);
    let t_rep = tape.gather_rows(t, &ci)?;
    let f_rep = tape.gather_rows(f, &ii)?;
    let beta = bias_rows(tape, meta, t_rep, f_rep)?;
    let text = &bb.backbone.text;
    let builder = QueryBuilder::new(&bb.backbone.vocab, text.token_table(), text.ctx_len());
    let queries = classes
        .iter()
        .enumerate()
        .map(|(i, q)| builder.assemble_text_query(&q.name, i, &q.attrs, 0, bank))
        .collect::<Result<Vec<_>, _>>()?;
    let mut rows = Vec::with_capacity(n * c);
    for (r, &i) in ci.iter().enumerate() {
        let b = tape.slice_rows(beta, r, r + 1)?;
        let shifted = tape.add_row(soft, b)?;
        rows.push(encode_text(tape, text, &bb.text, &queries[i], Some(shifted))?);
    }
    let adapted = tape.concat_rows(&rows)?;
    pairwise_probs(tape, f_rep, adapted, n, c, cfg.temperature)
}
