//! Pre-norm transformer block: multi-head full self-attention followed by a
//! GELU feed-forward layer, each wrapped in a residual connection.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::Sha256;

use super::{Tape, Tensor, TensorError, Var};

/// Default layer-norm epsilon.
pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams {
    pub heads: usize,
    pub ln1_gain: Tensor,
    pub ln1_shift: Tensor,
    pub w_query: Tensor,
    pub w_key: Tensor,
    pub w_value: Tensor,
    pub w_out: Tensor,
    pub b_out: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_shift: Tensor,
    pub w_up: Tensor,
    pub b_up: Tensor,
    pub w_down: Tensor,
    pub b_down: Tensor,
}

/// Block weights registered on a particular tape.
#[derive(Clone, Copy, Debug)]
pub struct BoundBlock {
    heads: usize,
    ln1_gain: Var,
    ln1_shift: Var,
    w_query: Var,
    w_key: Var,
    w_value: Var,
    w_out: Var,
    b_out: Var,
    ln2_gain: Var,
    ln2_shift: Var,
    w_up: Var,
    b_up: Var,
    w_down: Var,
    b_down: Var,
}

pub(crate) fn gaussian(rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> Tensor {
    let normal = Normal::new(0.0, std).expect("finite std");
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| normal.sample(rng)).collect())
}

impl BlockParams {
    /// Weights from N(0, (1/√d)²), unit layer-norm gains, zero biases.
    pub fn random(dim: usize, heads: usize, ffn_mult: usize, rng: &mut impl Rng) -> Self {
        assert!(heads > 0 && dim % heads == 0, "dim must split evenly over heads");
        let std = 1.0 / (dim as f64).sqrt();
        let hidden = dim * ffn_mult;
        Self {
            heads,
            ln1_gain: Tensor::filled(1, dim, 1.0),
            ln1_shift: Tensor::zeros(1, dim),
            w_query: gaussian(dim, dim, std, rng),
            w_key: gaussian(dim, dim, std, rng),
            w_value: gaussian(dim, dim, std, rng),
            w_out: gaussian(dim, dim, std, rng),
            b_out: Tensor::zeros(1, dim),
            ln2_gain: Tensor::filled(1, dim, 1.0),
            ln2_shift: Tensor::zeros(1, dim),
            w_up: gaussian(dim, hidden, std, rng),
            b_up: Tensor::zeros(1, hidden),
            w_down: gaussian(hidden, dim, 1.0 / (hidden as f64).sqrt(), rng),
            b_down: Tensor::zeros(1, dim),
        }
    }

    /// Every weight zero; the block reduces to its residual path.
    pub fn zeros(dim: usize, heads: usize, ffn_mult: usize) -> Self {
        let hidden = dim * ffn_mult;
        Self {
            heads,
            ln1_gain: Tensor::zeros(1, dim),
            ln1_shift: Tensor::zeros(1, dim),
            w_query: Tensor::zeros(dim, dim),
            w_key: Tensor::zeros(dim, dim),
            w_value: Tensor::zeros(dim, dim),
            w_out: Tensor::zeros(dim, dim),
            b_out: Tensor::zeros(1, dim),
            ln2_gain: Tensor::zeros(1, dim),
            ln2_shift: Tensor::zeros(1, dim),
            w_up: Tensor::zeros(dim, hidden),
            b_up: Tensor::zeros(1, hidden),
            w_down: Tensor::zeros(hidden, dim),
            b_down: Tensor::zeros(1, dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.w_query.rows()
    }

    pub fn tensors(&self) -> [&Tensor; 13] {
        [
            &self.ln1_gain,
            &self.ln1_shift,
            &self.w_query,
            &self.w_key,
            &self.w_value,
            &self.w_out,
            &self.b_out,
            &self.ln2_gain,
            &self.ln2_shift,
            &self.w_up,
            &self.b_up,
            &self.w_down,
            &self.b_down,
        ]
    }

    pub(crate) fn feed(&self, h: &mut Sha256) {
        for t in self.tensors() {
            t.feed(h);
        }
    }

    /// Registers the weights as frozen constants.
    pub fn bind(&self, tape: &mut Tape) -> BoundBlock {
        self.bind_with(tape, false)
    }

    /// Registers the weights, as parameters when `trainable` (used by
    /// gradient checks of the block itself).
    pub fn bind_with(&self, tape: &mut Tape, trainable: bool) -> BoundBlock {
        let mut leaf = |t: &Tensor| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        BoundBlock {
            heads: self.heads,
            ln1_gain: leaf(&self.ln1_gain),
            ln1_shift: leaf(&self.ln1_shift),
            w_query: leaf(&self.w_query),
            w_key: leaf(&self.w_key),
            w_value: leaf(&self.w_value),
            w_out: leaf(&self.w_out),
            b_out: leaf(&self.b_out),
            ln2_gain: leaf(&self.ln2_gain),
            ln2_shift: leaf(&self.ln2_shift),
            w_up: leaf(&self.w_up),
            b_up: leaf(&self.b_up),
            w_down: leaf(&self.w_down),
            b_down: leaf(&self.b_down),
        }
    }
}

impl BoundBlock {
    /// Handles in [`BlockParams::tensors`] order.
    pub fn from_vars(heads: usize, v: [Var; 13]) -> Self {
        Self {
            heads,
            ln1_gain: v[0],
            ln1_shift: v[1],
            w_query: v[2],
            w_key: v[3],
            w_value: v[4],
            w_out: v[5],
            b_out: v[6],
            ln2_gain: v[7],
            ln2_shift: v[8],
            w_up: v[9],
            b_up: v[10],
            w_down: v[11],
            b_down: v[12],
        }
    }

    pub fn vars(&self) -> [Var; 13] {
        [
            self.ln1_gain,
            self.ln1_shift,
            self.w_query,
            self.w_key,
            self.w_value,
            self.w_out,
            self.b_out,
            self.ln2_gain,
            self.ln2_shift,
            self.w_up,
            self.b_up,
            self.w_down,
            self.b_down,
        ]
    }
}

/// One transformer block over `x[L×d]` with full (non-causal) attention.
///
/// Callers drop padding rows before the call; every row present attends to
/// every other row.
pub fn attention_block(tape: &mut Tape, x: Var, block: &BoundBlock, ctx_len: usize) -> Result<Var, TensorError> {
    let len = tape.value(x).rows();
    if len > ctx_len {
        return Err(TensorError::ContextOverflow { len, ctx_len });
    }
    let dim = tape.value(block.w_query).rows();
    if tape.value(x).cols() != dim {
        return Err(TensorError::ShapeMismatch {
            op: "attention_block",
            left: tape.value(x).shape().to_vec(),
            right: tape.value(block.w_query).shape().to_vec(),
        });
    }
    let head_dim = dim / block.heads;

    let xn = tape.layer_norm(x, block.ln1_gain, block.ln1_shift, LN_EPS)?;
    let q = tape.matmul(xn, block.w_query)?;
    let k = tape.matmul(xn, block.w_key)?;
    let v = tape.matmul(xn, block.w_value)?;
    let mut heads = Vec::with_capacity(block.heads);
    for h in 0..block.heads {
        let (lo, hi) = (h * head_dim, (h + 1) * head_dim);
        let qh = tape.slice_cols(q, lo, hi)?;
        let kh = tape.slice_cols(k, lo, hi)?;
        let vh = tape.slice_cols(v, lo, hi)?;
        let kt = tape.transpose(kh);
        let scores = tape.matmul(qh, kt)?;
        let weights = tape.softmax_rows(scores, (head_dim as f64).sqrt())?;
        heads.push(tape.matmul(weights, vh)?);
    }
    let merged = tape.concat_cols(&heads)?;
    let projected = tape.matmul(merged, block.w_out)?;
    let projected = tape.add_row(projected, block.b_out)?;
    let x1 = tape.add(x, projected)?;

    let xn2 = tape.layer_norm(x1, block.ln2_gain, block.ln2_shift, LN_EPS)?;
    let up = tape.matmul(xn2, block.w_up)?;
    let up = tape.add_row(up, block.b_up)?;
    let act = tape.gelu(up);
    let down = tape.matmul(act, block.w_down)?;
    let down = tape.add_row(down, block.b_down)?;
    tape.add(x1, down)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn run(params: &BlockParams, x: &Tensor, ctx: usize) -> Result<Tensor, TensorError> {
        let mut tape = Tape::new();
        let b = params.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let out = attention_block(&mut tape, xv, &b, ctx)?;
        Ok(tape.value(out).clone())
    }

    #[test]
    fn single_token_keeps_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = BlockParams::random(8, 2, 4, &mut rng);
        let x = gaussian(1, 8, 1.0, &mut rng);
        let y = run(&p, &x, 4).unwrap();
        assert_eq!(y.shape(), &[1, 8]);
        assert_ne!(y, x);
    }

    #[test]
    fn zero_weights_are_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = BlockParams::zeros(8, 2, 4);
        let x = gaussian(5, 8, 1.0, &mut rng);
        assert_eq!(run(&p, &x, 5).unwrap(), x);
    }

    #[test]
    fn permutation_equivariant_without_positions() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = BlockParams::random(8, 2, 4, &mut rng);
        let x = gaussian(4, 8, 1.0, &mut rng);
        let mut rows: Vec<Vec<f64>> = (0..4).map(|r| x.row_slice(r).to_vec()).collect();
        rows.swap(1, 3);
        let xs = Tensor::from_rows(&rows).unwrap();
        let y = run(&p, &x, 8).unwrap();
        let ys = run(&p, &xs, 8).unwrap();
        for (r, s) in [(0, 0), (1, 3), (2, 2), (3, 1)] {
            for (a, b) in y.row_slice(r).iter().zip(ys.row_slice(s)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn overflow_is_rejected() {
        let p = BlockParams::zeros(4, 1, 1);
        let err = run(&p, &Tensor::zeros(6, 4), 5).unwrap_err();
        assert!(matches!(err, TensorError::ContextOverflow { len: 6, ctx_len: 5 }));
    }
}
