//! Binary checkpoints of a [`TrainState`].
//!
//! Layout (little-endian): magic `COAPTCKPT`, u32 version, the dims header
//! (seven u32), one u8 prompt-init tag, f64 blocks for every trainable
//! tensor followed by the matching momentum blocks, u64 step, u64 seed, then
//! a u32-length-prefixed UTF-8 block of `key=value` lines echoing the run
//! configuration.

use std::path::Path;

use crate::autodiff::Tensor;
use crate::meta_net::MetaNetParams;
use crate::prompt::{InitMode, SoftPromptBank};

use super::{ClassifierError, TrainState};

pub const CHECKPOINT_MAGIC: &[u8; 9] = b"COAPTCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CheckpointDims {
    pub dim: usize,
    pub prompts: usize,
    pub vision_prompts: usize,
    pub vision_dim: usize,
    pub meta_in: usize,
    pub meta_hidden: usize,
    pub meta_out: usize,
}

impl CheckpointDims {
    pub fn of(state: &TrainState) -> Self {
        let (prompts, dim) = state
            .bank
            .text
            .as_ref()
            .map_or((0, state.meta.dim()), |t| (t.rows(), t.cols()));
        let (vision_prompts, vision_dim) = state.bank.vision.as_ref().map_or((0, 0), |t| (t.rows(), t.cols()));
        Self {
            dim,
            prompts,
            vision_prompts,
            vision_dim,
            meta_in: state.meta.w1.rows(),
            meta_hidden: state.meta.hidden(),
            meta_out: state.meta.out_dim(),
        }
    }

    fn shapes(&self) -> Vec<(usize, usize)> {
        let mut s = Vec::new();
        if self.prompts > 0 {
            s.push((self.prompts, self.dim));
        }
        if self.vision_prompts > 0 {
            s.push((self.vision_prompts, self.vision_dim));
        }
        s.extend([
            (self.meta_in, self.meta_hidden),
            (1, self.meta_hidden),
            (self.meta_hidden, self.meta_out),
            (1, self.meta_out),
        ]);
        s
    }

    fn fields(&self) -> [usize; 7] {
        [
            self.dim,
            self.prompts,
            self.vision_prompts,
            self.vision_dim,
            self.meta_in,
            self.meta_hidden,
            self.meta_out,
        ]
    }
}

pub fn checkpoint_bytes(state: &TrainState, config: &str) -> Vec<u8> {
    let dims = CheckpointDims::of(state);
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for f in dims.fields() {
        out.extend_from_slice(&(f as u32).to_le_bytes());
    }
    out.push(match state.bank.init_mode {
        InitMode::Gaussian => 0,
        InitMode::Phrase => 1,
    });
    for t in state.params().into_iter().chain(&state.momentum) {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.extend_from_slice(&(state.step as u64).to_le_bytes());
    out.extend_from_slice(&state.seed.to_le_bytes());
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(config.as_bytes());
    out
}

pub fn save_checkpoint(state: &TrainState, config: &str, path: &Path) -> Result<(), ClassifierError> {
    Ok(std::fs::write(path, checkpoint_bytes(state, config))?)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ClassifierError> {
        if self.bytes.len() - self.pos < n {
            return Err(ClassifierError::Format(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, ClassifierError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, ClassifierError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn tensor(&mut self, rows: usize, cols: usize) -> Result<Tensor, ClassifierError> {
        let raw = self.take(rows * cols * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok(Tensor::matrix(rows, cols, data))
    }
}

/// Parses a checkpoint; `expected` rejects files built for other sizes.
pub fn parse_checkpoint(
    bytes: &[u8],
    expected: Option<CheckpointDims>,
) -> Result<(TrainState, String), ClassifierError> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(CHECKPOINT_MAGIC.len())? != CHECKPOINT_MAGIC {
        return Err(ClassifierError::Format("bad magic".into()));
    }
    let version = c.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(ClassifierError::Format(format!("unsupported version {version}")));
    }
    let mut f = [0usize; 7];
    for v in &mut f {
        *v = c.u32()? as usize;
    }
    let dims = CheckpointDims {
        dim: f[0],
        prompts: f[1],
        vision_prompts: f[2],
        vision_dim: f[3],
        meta_in: f[4],
        meta_hidden: f[5],
        meta_out: f[6],
    };
    if let Some(want) = expected {
        if want != dims {
            return Err(ClassifierError::Format(format!(
                "checkpoint dims {dims:?} do not match {want:?}"
            )));
        }
    }
    let init_mode = match c.take(1)?[0] {
        0 => InitMode::Gaussian,
        1 => InitMode::Phrase,
        t => return Err(ClassifierError::Format(format!("unknown init tag {t}"))),
    };
    let shapes = dims.shapes();
    let params = shapes
        .iter()
        .map(|&(r, k)| c.tensor(r, k))
        .collect::<Result<Vec<_>, _>>()?;
    let momentum = shapes
        .iter()
        .map(|&(r, k)| c.tensor(r, k))
        .collect::<Result<Vec<_>, _>>()?;
    let step = c.u64()? as usize;
    let seed = c.u64()?;
    let len = c.u32()? as usize;
    let config = std::str::from_utf8(c.take(len)?)
        .map_err(|_| ClassifierError::Format("config block is not UTF-8".into()))?
        .to_owned();
    if c.pos != bytes.len() {
        return Err(ClassifierError::Format(format!(
            "{} trailing bytes",
            bytes.len() - c.pos
        )));
    }

    let mut it = params.into_iter();
    let text = (dims.prompts > 0).then(|| it.next().expect("shape listed"));
    let vision = (dims.vision_prompts > 0).then(|| it.next().expect("shape listed"));
    let mut next = || it.next().expect("shape listed");
    let meta = MetaNetParams {
        w1: next(),
        b1: next(),
        w2: next(),
        b2: next(),
    };
    let state = TrainState {
        bank: SoftPromptBank {
            text,
            vision,
            init_mode,
        },
        meta,
        momentum,
        step,
        seed,
    };
    Ok((state, config))
}

pub fn load_checkpoint(path: &Path, expected: Option<CheckpointDims>) -> Result<(TrainState, String), ClassifierError> {
    parse_checkpoint(&std::fs::read(path)?, expected)
}
