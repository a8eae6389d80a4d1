use crate::autodiff::{finite_diff_check, GradCheckReport, Tape, Var};
use crate::encoders::ImageInput;
use crate::meta_net::{BiasMode, BoundMetaNet};
use crate::par::Parallelism;

use super::graph::{forward_probs, BoundBackbone, BoundTrainables};
use super::{Backbone, ClassQuery, ClassifierConfig, ClassifierError, TrainState};

/// Finite-difference check of the full adapted cross-entropy with respect
/// to every trainable tensor of `state`, in [`TrainState::params`] order.
/// With bias mode `off` only the prompt tensors are checked.
#[allow(clippy::too_many_arguments)]
pub fn pipeline_gradient_check(
    state: &TrainState,
    backbone: &Backbone,
    cfg: &ClassifierConfig,
    classes: &[ClassQuery],
    images: &[ImageInput],
    labels: &[usize],
    h: f64,
    parallelism: Parallelism,
) -> Result<GradCheckReport, ClassifierError> {
    cfg.validate()?;
    let has_text = state.bank.text.is_some();
    let has_vision = state.bank.vision.is_some();
    let with_meta = cfg.bias_mode != BiasMode::Off;
    let n_bank = has_text as usize + has_vision as usize;
    let params: Vec<_> = state
        .params()
        .into_iter()
        .take(if with_meta { n_bank + 4 } else { n_bank })
        .cloned()
        .collect();
    let f = |tape: &mut Tape, vars: &[Var]| -> Result<Var, ClassifierError> {
        let mut it = vars.iter().copied();
        let soft = if has_text { it.next() } else { None };
        let vision = if has_vision { it.next() } else { None };
        let meta = with_meta.then(|| BoundMetaNet {
            w1: it.next().expect("meta var"),
            b1: it.next().expect("meta var"),
            w2: it.next().expect("meta var"),
            b2: it.next().expect("meta var"),
        });
        let bb = BoundBackbone::bind(tape, backbone);
        let tr = BoundTrainables { soft, vision, meta };
        let p = forward_probs(tape, &bb, &state.bank, &tr, cfg, images, classes)?;
        Ok(tape.nll(p, labels)?)
    };
    Ok(finite_diff_check(f, &params, h, parallelism)?)
}
