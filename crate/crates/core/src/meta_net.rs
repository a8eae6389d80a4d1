//! The meta-network: a two-layer perceptron mapping a (text feature, image
//! feature) pair to a bias vector.

use std::fmt;
use std::str::FromStr;

use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::autodiff::{Tape, Tensor, TensorError, Var};
use crate::rng::{rng_for, stream};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum MetaNetError {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    Dimension { expected: usize, found: usize },
    #[error("invalid meta-net size: {0}")]
    Size(String),
    #[error("unknown bias mode {0:?}")]
    UnknownMode(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Where the meta-net output is applied.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum BiasMode {
    /// `t + β` before the cosine.
    #[default]
    BiasOnFeature,
    /// `β` added to every soft prompt row, then the query is re-encoded.
    BiasOnPrompts,
    /// `(1 + s) ⊙ t + b` with `(s, b)` from a `2d`-wide output.
    AffineOnFeature,
    /// Meta-net unused; plain soft-prompt scoring.
    Off,
}

impl BiasMode {
    /// Meta-net output width for feature width `dim`.
    pub fn out_dim(self, dim: usize) -> usize {
        match self {
            BiasMode::AffineOnFeature => 2 * dim,
            _ => dim,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            BiasMode::BiasOnFeature => "bias_on_feature",
            BiasMode::BiasOnPrompts => "bias_on_prompts",
            BiasMode::AffineOnFeature => "affine_on_feature",
            BiasMode::Off => "off",
        }
    }
}

impl fmt::Display for BiasMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BiasMode {
    type Err = MetaNetError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "bias_on_feature" => BiasMode::BiasOnFeature,
            "bias_on_prompts" => BiasMode::BiasOnPrompts,
            "affine_on_feature" => BiasMode::AffineOnFeature,
            "off" => BiasMode::Off,
            other => return Err(MetaNetError::UnknownMode(other.into())),
        })
    }
}

/// Hidden width used when none is configured: `ceil(d / 2)`.
pub fn default_hidden(dim: usize) -> usize {
    dim.div_ceil(2)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetaNetParams {
    /// `2d × h`.
    pub w1: Tensor,
    pub b1: Tensor,
    /// `h × out`.
    pub w2: Tensor,
    pub b2: Tensor,
}

impl MetaNetParams {
    /// First layer from N(0, (1/√(2d))²); second layer and both biases zero.
    pub fn init(dim: usize, hidden: usize, out: usize, seed: u64) -> Result<Self, MetaNetError> {
        if dim == 0 || hidden == 0 || out == 0 {
            return Err(MetaNetError::Size(format!("dim={dim} hidden={hidden} out={out}")));
        }
        let mut rng = rng_for(seed, stream::META_NET);
        let normal = Normal::new(0.0, 1.0 / ((2 * dim) as f64).sqrt()).expect("finite std");
        let w1 = (0..2 * dim * hidden).map(|_| normal.sample(&mut rng)).collect();
        Ok(Self {
            w1: Tensor::matrix(2 * dim, hidden, w1),
            b1: Tensor::zeros(1, hidden),
            w2: Tensor::zeros(hidden, out),
            b2: Tensor::zeros(1, out),
        })
    }

    pub fn dim(&self) -> usize {
        self.w1.rows() / 2
    }

    pub fn hidden(&self) -> usize {
        self.w1.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.w2.cols()
    }

    pub fn tensors(&self) -> [&Tensor; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }

    pub fn output_is_zero(&self) -> bool {
        self.w2.data().iter().chain(self.b2.data()).all(|&v| v == 0.0)
    }

    pub fn checksum(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for t in self.tensors() {
            t.feed(&mut h);
        }
        h.finalize().into()
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundMetaNet {
        let mut leaf = |t: &Tensor| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        BoundMetaNet {
            w1: leaf(&self.w1),
            b1: leaf(&self.b1),
            w2: leaf(&self.w2),
            b2: leaf(&self.b2),
        }
    }
}

/// Meta-net producing a `dim`-wide bias.
pub fn init_meta_net(dim: usize, hidden: Option<usize>, seed: u64) -> Result<MetaNetParams, MetaNetError> {
    MetaNetParams::init(dim, hidden.unwrap_or_else(|| default_hidden(dim)), dim, seed)
}

/// Meta-net weights on a tape.
#[derive(Clone, Copy, Debug)]
pub struct BoundMetaNet {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl BoundMetaNet {
    pub fn vars(&self) -> [Var; 4] {
        [self.w1, self.b1, self.w2, self.b2]
    }
}

/// Row-wise `g_M([t_r, f_r])` for aligned `r × d` inputs; one evaluation per
/// row.
pub fn bias_rows(tape: &mut Tape, meta: &BoundMetaNet, t: Var, f: Var) -> Result<Var, MetaNetError> {
    let d = tape.value(meta.w1).rows() / 2;
    for v in [t, f] {
        let cols = tape.value(v).cols();
        if cols != d {
            return Err(MetaNetError::Dimension {
                expected: d,
                found: cols,
            });
        }
    }
    let x = tape.concat_cols(&[t, f])?;
    let h = tape.matmul(x, meta.w1)?;
    let h = tape.add_row(h, meta.b1)?;
    let h = tape.relu(h);
    let out = tape.matmul(h, meta.w2)?;
    Ok(tape.add_row(out, meta.b2)?)
}

/// `β = g_M(t, f)` for one pair of `1 × d` features.
pub fn bias(t: &Tensor, f: &Tensor, params: &MetaNetParams) -> Result<Tensor, MetaNetError> {
    let mut tape = Tape::new();
    let meta = params.bind(&mut tape, false);
    let tv = tape.constant(t.clone());
    let fv = tape.constant(f.clone());
    let out = bias_rows(&mut tape, &meta, tv, fv)?;
    Ok(tape.value(out).clone())
}
