//! Central finite-difference verification of tape gradients.

use std::error::Error as StdError;

use super::{Tape, Tensor, TensorError, Var};
use crate::par::{self, Parallelism};

type BoxError = Box<dyn StdError + Send + Sync>;

#[derive(Debug, thiserror::Error)]
pub enum GradCheckError {
    #[error("step size must be positive, got {0}")]
    Step(f64),
    #[error("function is not deterministic: {first} then {second}")]
    NonDeterministic { first: f64, second: f64 },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("function failed: {0}")]
    Function(BoxError),
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Worst `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
    pub max_rel_error: f64,
    /// `(parameter index, flat coordinate)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub coordinates: usize,
    pub analytic: Vec<Tensor>,
    pub numeric: Vec<Tensor>,
}

const DENOM_FLOOR: f64 = 1e-8;

fn eval<F, E>(f: &F, params: &[Tensor]) -> Result<f64, GradCheckError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, E>,
    E: Into<BoxError>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.constant(p.clone())).collect();
    let out = f(&mut tape, &vars).map_err(|e| GradCheckError::Function(e.into()))?;
    let v = tape.value(out);
    if v.numel() != 1 {
        return Err(TensorError::NonScalarLoss(v.shape().to_vec()).into());
    }
    Ok(v.data()[0])
}

/// Compares `backward()` against central differences with step `h` for every
/// coordinate of every tensor in `params`.
///
/// `f` builds a scalar on the tape from parameter handles, in the same order
/// as `params`. Coordinates are evaluated in parallel when `mode` allows.
pub fn finite_diff_check<F, E>(
    f: F,
    params: &[Tensor],
    h: f64,
    mode: Parallelism,
) -> Result<GradCheckReport, GradCheckError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, E> + Sync + Send,
    E: Into<BoxError>,
{
    if !(h > 0.0) {
        return Err(GradCheckError::Step(h));
    }
    let first = eval(&f, params)?;
    let second = eval(&f, params)?;
    if first.to_bits() != second.to_bits() {
        return Err(GradCheckError::NonDeterministic { first, second });
    }

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let out = f(&mut tape, &vars).map_err(|e| GradCheckError::Function(e.into()))?;
    let mut grads = tape.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| {
            grads
                .take(v)
                .unwrap_or_else(|| Tensor::new(p.shape().to_vec(), vec![0.0; p.numel()]).unwrap())
        })
        .collect();

    let coords: Vec<(usize, usize)> = params
        .iter()
        .enumerate()
        .flat_map(|(i, p)| (0..p.numel()).map(move |j| (i, j)))
        .collect();
    let numeric_flat = par::try_map_range(mode, coords.len(), |c| {
        let (i, j) = coords[c];
        let mut shifted = params.to_vec();
        let x0 = params[i].data()[j];
        shifted[i].data_mut()[j] = x0 + h;
        let up = eval(&f, &shifted)?;
        shifted[i].data_mut()[j] = x0 - h;
        let down = eval(&f, &shifted)?;
        Ok::<f64, GradCheckError>((up - down) / (2.0 * h))
    })?;

    let mut numeric: Vec<Tensor> = params
        .iter()
        .map(|p| Tensor::new(p.shape().to_vec(), vec![0.0; p.numel()]).unwrap())
        .collect();
    let mut max_rel_error = 0.0;
    let mut worst = None;
    for (&(i, j), &n) in coords.iter().zip(&numeric_flat) {
        numeric[i].data_mut()[j] = n;
        let a = analytic[i].data()[j];
        let rel = (a - n).abs() / a.abs().max(n.abs()).max(DENOM_FLOOR);
        if rel > max_rel_error || worst.is_none() {
            max_rel_error = rel;
            worst = Some((i, j));
        }
    }
    Ok(GradCheckReport {
        max_rel_error,
        worst,
        coordinates: coords.len(),
        analytic,
        numeric,
    })
}
