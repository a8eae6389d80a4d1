//! Cosine-softmax scoring with optional meta-net adaptation, the vocabulary
//! ensemble, and the prompt-tuning loop.

mod checkpoint;
mod gradcheck;
pub mod graph;
mod train;

pub use checkpoint::{
    checkpoint_bytes, load_checkpoint, parse_checkpoint, save_checkpoint, CheckpointDims, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use gradcheck::pipeline_gradient_check;
pub use train::{batch_loss, cosine_lr, train, train_step, train_until, TrainConfig, TrainOutcome, TrainState};

use crate::autodiff::{GradCheckError, Tape, Tensor, TensorError, PROB_FLOOR};
use crate::encoders::{EncoderError, ImageEncoderParams, ImageInput, TextEncoderParams};
use crate::meta_net::{BiasMode, MetaNetError, MetaNetParams};
use crate::par::{try_map_range, Parallelism};
use crate::prompt::{PromptError, SoftPromptBank};
use crate::tokenizer::Vocabulary;

use graph::{feature_adapted_probs, forward_probs, BoundBackbone, BoundTrainables};

#[derive(Debug, thiserror::Error)]
pub enum ClassifierError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("training diverged at step {step} (loss {loss})")]
    Divergence {
        step: usize,
        loss: f64,
        last_good: Box<TrainState>,
    },
    #[error("attribute set {k}: {source}")]
    EnsembleSet {
        k: usize,
        #[source]
        source: Box<ClassifierError>,
    },
    #[error("checkpoint format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    MetaNet(#[from] MetaNetError),
    #[error(transparent)]
    GradCheck(#[from] GradCheckError),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassifierConfig {
    pub temperature: f64,
    pub ensemble_k: usize,
    pub bias_mode: BiasMode,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            temperature: 0.01,
            ensemble_k: 3,
            bias_mode: BiasMode::BiasOnFeature,
        }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<(), ClassifierError> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(ClassifierError::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if self.ensemble_k == 0 {
            return Err(ClassifierError::Config("ensemble_k must be at least 1".into()));
        }
        Ok(())
    }
}

/// Frozen encoders plus the vocabulary their token table is indexed by.
#[derive(Clone, Debug)]
pub struct Backbone {
    pub vocab: Vocabulary,
    pub text: TextEncoderParams,
    pub image: ImageEncoderParams,
}

impl Backbone {
    pub fn verify_frozen(&self) -> Result<(), EncoderError> {
        self.text.verify_frozen()?;
        self.image.verify_frozen()
    }
}

/// A class name with one attribute set.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassQuery {
    pub name: String,
    pub attrs: Vec<String>,
}

impl ClassQuery {
    pub fn new(name: impl Into<String>, attrs: Vec<String>) -> Self {
        Self {
            name: name.into(),
            attrs,
        }
    }

    pub fn plain(name: impl Into<String>) -> Self {
        Self::new(name, Vec::new())
    }
}

fn rows_of(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|r| t.row_slice(r).to_vec()).collect()
}

/// `p_i ∝ exp(cos(f, t_i) / τ)` for one `1 × d` image feature against
/// `C × d` text features.
pub fn class_probabilities(f: &Tensor, t: &Tensor, temperature: f64) -> Result<Vec<f64>, ClassifierError> {
    let mut tape = Tape::new();
    let (fv, tv) = (tape.constant(f.clone()), tape.constant(t.clone()));
    let p = graph::eq1_probs(&mut tape, fv, tv, temperature)?;
    Ok(tape.value(p).data().to_vec())
}

/// `p_i ∝ exp(cos(f, t_i + β_i) / τ)` with `β_i = g_M(t_i, f)`.
pub fn adapted_probabilities(
    f: &Tensor,
    t: &Tensor,
    meta: &MetaNetParams,
    mode: BiasMode,
    temperature: f64,
) -> Result<Vec<f64>, ClassifierError> {
    let mut tape = Tape::new();
    let (fv, tv) = (tape.constant(f.clone()), tape.constant(t.clone()));
    let m = meta.bind(&mut tape, false);
    let p = feature_adapted_probs(&mut tape, fv, tv, Some(&m), mode, temperature)?;
    Ok(tape.value(p).data().to_vec())
}

/// Mean of the per-set distributions `per_set(0..k)`.
pub fn ensemble_probabilities<F>(k: usize, mut per_set: F) -> Result<Vec<f64>, ClassifierError>
where
    F: FnMut(usize) -> Result<Vec<f64>, ClassifierError>,
{
    if k == 0 {
        return Err(ClassifierError::Config("ensemble needs at least one set".into()));
    }
    let mut acc: Vec<f64> = Vec::new();
    for i in 0..k {
        let p = per_set(i).map_err(|e| ClassifierError::EnsembleSet {
            k: i,
            source: Box::new(e),
        })?;
        if i == 0 {
            acc = p;
        } else if p.len() != acc.len() {
            return Err(ClassifierError::EnsembleSet {
                k: i,
                source: Box::new(ClassifierError::Config(format!(
                    "{} classes, expected {}",
                    p.len(),
                    acc.len()
                ))),
            });
        } else {
            acc.iter_mut().zip(&p).for_each(|(a, b)| *a += b);
        }
    }
    let scale = 1.0 / k as f64;
    Ok(acc.into_iter().map(|v| v * scale).collect())
}

/// `−ln p[label]`, with probabilities below 1e-12 clamped.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CrossEntropy {
    pub value: f64,
    pub clamped: bool,
}

pub fn cross_entropy_loss(p: &[f64], label: usize) -> Result<CrossEntropy, ClassifierError> {
    let &pl = p
        .get(label)
        .ok_or_else(|| ClassifierError::Config(format!("label {label} out of range for {} classes", p.len())))?;
    let clamped = pl < PROB_FLOOR;
    if clamped {
        log::warn!("ground-truth probability {pl} clamped at {PROB_FLOOR}");
    }
    Ok(CrossEntropy {
        value: -pl.max(PROB_FLOOR).ln(),
        clamped,
    })
}

/// Index of the largest entry; the first wins ties.
pub fn argmax(p: &[f64]) -> usize {
    p.iter()
        .enumerate()
        .fold(
            (0, f64::NEG_INFINITY),
            |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) },
        )
        .0
}

/// Images scored per chunk; one tape per chunk.
const SCORE_CHUNK: usize = 32;

/// Read-only scoring over a snapshot of the trainable state.
#[derive(Clone, Copy)]
pub struct Scorer<'a> {
    pub backbone: &'a Backbone,
    pub bank: &'a SoftPromptBank,
    pub meta: &'a MetaNetParams,
    pub cfg: &'a ClassifierConfig,
    pub parallelism: Parallelism,
}

impl<'a> Scorer<'a> {
    /// Per-image class distributions for one attribute set per class.
    pub fn probabilities(
        &self,
        images: &[ImageInput],
        classes: &[ClassQuery],
    ) -> Result<Vec<Vec<f64>>, ClassifierError> {
        let chunks = images.len().div_ceil(SCORE_CHUNK);
        let parts = try_map_range(self.parallelism, chunks, |ci| {
            let lo = ci * SCORE_CHUNK;
            let hi = (lo + SCORE_CHUNK).min(images.len());
            let mut tape = Tape::new();
            let bb = BoundBackbone::bind(&mut tape, self.backbone);
            let tr = BoundTrainables::bind(&mut tape, self.bank, self.meta, self.cfg.bias_mode, false);
            let p = forward_probs(&mut tape, &bb, self.bank, &tr, self.cfg, &images[lo..hi], classes)?;
            Ok::<_, ClassifierError>(rows_of(tape.value(p)))
        })?;
        Ok(parts.into_iter().flatten().collect())
    }

    /// Mean over attribute sets of the per-set distributions.
    ///
    /// `sets[k]` lists one attribute set per class, in class order.
    pub fn ensemble(
        &self,
        images: &[ImageInput],
        class_names: &[String],
        sets: &[Vec<Vec<String>>],
    ) -> Result<Vec<Vec<f64>>, ClassifierError> {
        if sets.is_empty() {
            return Err(ClassifierError::Config("ensemble needs at least one set".into()));
        }
        let mut per_set = Vec::with_capacity(sets.len());
        for (k, set) in sets.iter().enumerate() {
            let classes: Vec<ClassQuery> = class_names
                .iter()
                .zip(set)
                .map(|(n, a)| ClassQuery::new(n.clone(), a.clone()))
                .collect();
            let p = self
                .probabilities(images, &classes)
                .map_err(|e| ClassifierError::EnsembleSet { k, source: Box::new(e) })?;
            per_set.push(p);
        }
        (0..images.len())
            .map(|j| ensemble_probabilities(sets.len(), |k| Ok(per_set[k][j].clone())))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn orthogonal_pair_example() {
        let f = Tensor::row(vec![1.0, 0.0]);
        let t = Tensor::from_rows(&[vec![2.0, 0.0], vec![0.0, 3.0]]).unwrap();
        let p = class_probabilities(&f, &t, 1.0).unwrap();
        let e = std::f64::consts::E;
        assert!((p[0] - e / (e + 1.0)).abs() < 1e-15);
        assert!((p[0] - 0.7311).abs() < 5e-5);
        let ce = cross_entropy_loss(&p, 0).unwrap();
        assert!((ce.value - 0.3133).abs() < 5e-5);
        assert!(!ce.clamped);
    }

    #[test]
    fn degenerate_cases() {
        let f = Tensor::row(vec![0.3, -0.2, 0.9]);
        let same = Tensor::from_rows(&vec![vec![1.0, 2.0, 3.0]; 4]).unwrap();
        for v in class_probabilities(&f, &same, 0.01).unwrap() {
            assert!((v - 0.25).abs() < 1e-15);
        }
        assert_eq!(
            class_probabilities(&f, &Tensor::row(vec![1.0, 1.0, 1.0]), 0.5).unwrap(),
            vec![1.0]
        );
        let zero = Tensor::zeros(1, 3);
        assert!(matches!(
            class_probabilities(&zero, &same, 1.0),
            Err(ClassifierError::Tensor(TensorError::Degenerate(_)))
        ));
    }

    #[test]
    fn constructed_alignment() {
        // relu(x) - relu(-x) = x lets a two-layer net emit exactly f - t.
        let d = 2;
        let mut w1 = Tensor::zeros(2 * d, 4 * d);
        let mut w2 = Tensor::zeros(4 * d, d);
        for i in 0..2 * d {
            *w1.data_mut().get_mut(i * 4 * d + i).unwrap() = 1.0;
            *w1.data_mut().get_mut(i * 4 * d + 2 * d + i).unwrap() = -1.0;
            let sign = if i < d { -1.0 } else { 1.0 };
            let out = i % d;
            w2.data_mut()[i * d + out] = sign;
            w2.data_mut()[(2 * d + i) * d + out] = -sign;
        }
        let meta = MetaNetParams {
            w1,
            b1: Tensor::zeros(1, 4 * d),
            w2,
            b2: Tensor::zeros(1, d),
        };
        let f = Tensor::row(vec![0.6, 0.8]);
        let t = Tensor::from_rows(&[vec![-1.0, 0.5], vec![0.3, -2.0]]).unwrap();
        let beta = crate::meta_net::bias(&Tensor::row(t.row_slice(0).to_vec()), &f, &meta).unwrap();
        for (b, want) in beta.data().iter().zip([1.6, 0.3]) {
            assert!((b - want).abs() < 1e-15);
        }
        let p = adapted_probabilities(&f, &t, &meta, BiasMode::BiasOnFeature, 0.01).unwrap();
        for v in p {
            assert!((v - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn ensemble_mean_example() {
        let sets = [vec![0.6, 0.4], vec![0.5, 0.5], vec![0.7, 0.3]];
        let p = ensemble_probabilities(3, |k| Ok(sets[k].clone())).unwrap();
        assert!((p[0] - 0.6).abs() < 1e-12 && (p[1] - 0.4).abs() < 1e-12);
        let one = ensemble_probabilities(1, |_| Ok(vec![0.2, 0.8])).unwrap();
        assert_eq!(one, vec![0.2, 0.8]);
        let err = ensemble_probabilities(3, |k| {
            if k == 2 {
                Err(ClassifierError::Config("boom".into()))
            } else {
                Ok(vec![0.5, 0.5])
            }
        })
        .unwrap_err();
        assert!(matches!(err, ClassifierError::EnsembleSet { k: 2, .. }));
    }

    #[test]
    fn loss_examples() {
        assert_eq!(cross_entropy_loss(&[1.0, 0.0], 0).unwrap().value, 0.0);
        let u = cross_entropy_loss(&[0.25; 4], 1).unwrap().value;
        assert!((u - 4f64.ln()).abs() < 1e-15);
        let c = cross_entropy_loss(&[1.0, 0.0], 1).unwrap();
        assert!(c.clamped);
        assert!((c.value - 1e-12f64.ln().abs()).abs() < 1e-9);
        assert!(cross_entropy_loss(&[1.0], 3).is_err());
    }

    #[test]
    fn argmax_first_tie() {
        assert_eq!(argmax(&[0.2, 0.5, 0.5]), 1);
        assert_eq!(argmax(&[1.0]), 0);
    }

    #[test]
    fn config_validation() {
        assert!(ClassifierConfig::default().validate().is_ok());
        let bad = ClassifierConfig {
            temperature: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = ClassifierConfig {
            ensemble_k: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
