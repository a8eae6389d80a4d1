use rand::seq::SliceRandom;
use sha2::{Digest, Sha256};

use crate::autodiff::{Tape, Tensor, TensorError};
use crate::encoders::ImageInput;
use crate::meta_net::{BiasMode, MetaNetParams};
use crate::prompt::SoftPromptBank;
use crate::rng::{rng_indexed, stream};

use super::graph::{forward_probs, BoundBackbone, BoundTrainables};
use super::{Backbone, ClassQuery, ClassifierConfig, ClassifierError};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub warmup_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 2e-3,
            momentum: 0.9,
            batch_size: 4,
            steps: 200,
            warmup_steps: 0,
        }
    }
}

impl TrainConfig {
    /// Batches per pass over `examples` training examples.
    pub fn steps_per_epoch(&self, examples: usize) -> usize {
        examples.div_ceil(self.batch_size.max(1))
    }

    /// Sets the warmup to one epoch over `examples`.
    pub fn with_epoch_warmup(mut self, examples: usize) -> Self {
        self.warmup_steps = self.steps_per_epoch(examples).min(self.steps);
        self
    }

    pub fn validate(&self) -> Result<(), ClassifierError> {
        let bad = |m: String| Err(ClassifierError::Config(m));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate must be non-negative, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.warmup_steps > self.steps {
            return bad("warmup_steps exceeds steps".into());
        }
        Ok(())
    }
}

/// Linear warmup to `base_lr` at `warmup_steps`, then half-cosine decay to
/// zero at `total_steps`.
pub fn cosine_lr(step: usize, total_steps: usize, base_lr: f64, warmup_steps: usize) -> f64 {
    if step >= total_steps {
        return 0.0;
    }
    if step < warmup_steps {
        return base_lr * (step + 1) as f64 / (warmup_steps + 1) as f64;
    }
    let progress = (step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64;
    0.5 * base_lr * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Everything a training run mutates.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub bank: SoftPromptBank,
    pub meta: MetaNetParams,
    /// One buffer per trainable tensor, in [`TrainState::params`] order.
    pub momentum: Vec<Tensor>,
    pub step: usize,
    pub seed: u64,
}

impl TrainState {
    pub fn new(bank: SoftPromptBank, meta: MetaNetParams, seed: u64) -> Self {
        let mut s = Self {
            bank,
            meta,
            momentum: Vec::new(),
            step: 0,
            seed,
        };
        s.momentum = s.params().iter().map(|t| Tensor::zeros(t.rows(), t.cols())).collect();
        s
    }

    /// Text prompts, vision prompts (each if present), then meta-net
    /// tensors.
    pub fn params(&self) -> Vec<&Tensor> {
        let mut v: Vec<&Tensor> = self.bank.text.iter().chain(&self.bank.vision).collect();
        v.extend(self.meta.tensors());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v: Vec<&mut Tensor> = self.bank.text.iter_mut().chain(self.bank.vision.iter_mut()).collect();
        v.extend(self.meta.tensors_mut());
        v
    }

    pub fn bank_checksum(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for t in self.bank.text.iter().chain(&self.bank.vision) {
            t.feed(&mut h);
        }
        h.finalize().into()
    }

    pub fn meta_checksum(&self) -> [u8; 32] {
        self.meta.checksum()
    }
}

/// Mean cross-entropy of `images` against `classes` through the full
/// adapted pipeline, without touching any state.
pub fn batch_loss(
    state: &TrainState,
    backbone: &Backbone,
    cfg: &ClassifierConfig,
    classes: &[ClassQuery],
    images: &[ImageInput],
    labels: &[usize],
) -> Result<f64, ClassifierError> {
    let mut tape = Tape::new();
    let bb = BoundBackbone::bind(&mut tape, backbone);
    let tr = BoundTrainables::bind(&mut tape, &state.bank, &state.meta, cfg.bias_mode, false);
    let p = forward_probs(&mut tape, &bb, &state.bank, &tr, cfg, images, classes)?;
    let loss = tape.nll(p, labels)?;
    Ok(tape.value(loss).data()[0])
}

/// One momentum-SGD step on a batch; returns the batch loss before the
/// update.
///
/// Only the soft prompts and (unless the bias mode is `off`) the meta-net
/// move. On a non-finite loss or update the state is left as it was and a
/// divergence error carrying it is returned.
pub fn train_step(
    state: &mut TrainState,
    backbone: &Backbone,
    cfg: &ClassifierConfig,
    tcfg: &TrainConfig,
    classes: &[ClassQuery],
    images: &[ImageInput],
    labels: &[usize],
) -> Result<f64, ClassifierError> {
    backbone.verify_frozen()?;
    let mut tape = Tape::new();
    let bb = BoundBackbone::bind(&mut tape, backbone);
    let tr = BoundTrainables::bind(&mut tape, &state.bank, &state.meta, cfg.bias_mode, true);
    let diverged = |state: &TrainState, loss: f64| ClassifierError::Divergence {
        step: state.step,
        loss,
        last_good: Box::new(state.clone()),
    };
    let p = match forward_probs(&mut tape, &bb, &state.bank, &tr, cfg, images, classes) {
        Ok(p) => p,
        // Overflow from blown-up trainables.
        Err(ClassifierError::Tensor(TensorError::Degenerate(_)))
            if images.iter().all(|i| i.tensor().is_finite()) && state.step > 0 =>
        {
            return Err(diverged(state, f64::NAN));
        }
        Err(e) => return Err(e),
    };
    let loss_var = tape.nll(p, labels)?;
    let loss = tape.value(loss_var).data()[0];
    if !loss.is_finite() {
        return Err(diverged(state, loss));
    }
    let vars = tr.vars();
    let mut grads = tape.backward(loss_var)?;

    let lr = cosine_lr(state.step, tcfg.steps, tcfg.lr, tcfg.warmup_steps);
    let mu = tcfg.momentum;
    let mut next = state.clone();
    let trains_meta = cfg.bias_mode != BiasMode::Off;
    let n_bank = next.bank.text.is_some() as usize + next.bank.vision.is_some() as usize;
    let mut momentum = std::mem::take(&mut next.momentum);
    {
        let mut params = next.params_mut();
        let active = if trains_meta { params.len() } else { n_bank };
        for (i, param) in params.iter_mut().enumerate().take(active) {
            let g = grads.take(vars[i]);
            let v = &mut momentum[i];
            match g {
                Some(g) => {
                    for (vv, gg) in v.data_mut().iter_mut().zip(g.data()) {
                        *vv = mu * *vv + gg;
                    }
                }
                None => v.data_mut().iter_mut().for_each(|vv| *vv *= mu),
            }
            for (pp, vv) in param.data_mut().iter_mut().zip(v.data()) {
                *pp -= lr * vv;
            }
        }
    }
    next.momentum = momentum;
    next.step += 1;
    if !next.bank.is_finite() || !next.meta.is_finite() {
        return Err(diverged(state, loss));
    }
    backbone.verify_frozen()?;
    *state = next;
    Ok(loss)
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub losses: Vec<f64>,
}

/// Trains from `state.step` up to `tcfg.steps`.
///
/// Batches come from a per-epoch shuffle keyed by the run seed and the epoch
/// number, so resuming from a checkpoint replays exactly the batches an
/// uninterrupted run would see.
pub fn train(
    state: TrainState,
    backbone: &Backbone,
    cfg: &ClassifierConfig,
    tcfg: &TrainConfig,
    classes: &[ClassQuery],
    images: &[ImageInput],
    labels: &[usize],
) -> Result<TrainOutcome, ClassifierError> {
    train_until(state, backbone, cfg, tcfg, classes, images, labels, tcfg.steps)
}

/// [`train`], stopping once `state.step` reaches `stop` (or `tcfg.steps`).
/// The learning-rate schedule still spans `tcfg.steps`.
#[allow(clippy::too_many_arguments)]
pub fn train_until(
    mut state: TrainState,
    backbone: &Backbone,
    cfg: &ClassifierConfig,
    tcfg: &TrainConfig,
    classes: &[ClassQuery],
    images: &[ImageInput],
    labels: &[usize],
    stop: usize,
) -> Result<TrainOutcome, ClassifierError> {
    cfg.validate()?;
    tcfg.validate()?;
    if images.is_empty() || images.len() != labels.len() {
        return Err(ClassifierError::Config(format!(
            "{} images with {} labels",
            images.len(),
            labels.len()
        )));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= classes.len()) {
        return Err(ClassifierError::Config(format!(
            "label {l} with {} classes",
            classes.len()
        )));
    }
    let per_epoch = tcfg.steps_per_epoch(images.len());
    let mut order: Option<(usize, Vec<usize>)> = None;
    let stop = stop.min(tcfg.steps);
    let mut losses = Vec::with_capacity(stop.saturating_sub(state.step));
    while state.step < stop {
        let epoch = state.step / per_epoch;
        if order.as_ref().is_none_or(|(e, _)| *e != epoch) {
            let mut idx: Vec<usize> = (0..images.len()).collect();
            idx.shuffle(&mut rng_indexed(state.seed, stream::BATCHES, epoch as u64));
            order = Some((epoch, idx));
        }
        let idx = &order.as_ref().expect("set above").1;
        let b = state.step % per_epoch;
        let pick = &idx[b * tcfg.batch_size..((b + 1) * tcfg.batch_size).min(idx.len())];
        let batch: Vec<ImageInput> = pick.iter().map(|&i| images[i].clone()).collect();
        let batch_labels: Vec<usize> = pick.iter().map(|&i| labels[i]).collect();
        let loss = train_step(&mut state, backbone, cfg, tcfg, classes, &batch, &batch_labels)?;
        log::debug!("step {} loss {loss:.6}", state.step);
        losses.push(loss);
    }
    Ok(TrainOutcome { state, losses })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_landmarks() {
        let (total, base, warm) = (100, 2e-3, 10);
        assert_eq!(cosine_lr(warm, total, base, warm), base);
        assert_eq!(cosine_lr(total, total, base, warm), 0.0);
        let mid = warm + (total - warm) / 2;
        assert!((cosine_lr(mid, total, base, warm) - base / 2.0).abs() < 1e-12);
        assert!(cosine_lr(0, total, base, warm) > 0.0);
        for s in 0..warm {
            assert!(cosine_lr(s, total, base, warm) < cosine_lr(s + 1, total, base, warm));
        }
        for s in warm..total {
            assert!(cosine_lr(s, total, base, warm) >= cosine_lr(s + 1, total, base, warm));
        }
    }

    #[test]
    fn config_checks() {
        assert!(TrainConfig::default().validate().is_ok());
        let c = TrainConfig::default().with_epoch_warmup(48);
        assert_eq!(c.warmup_steps, 12);
        assert!(TrainConfig { batch_size: 0, ..c }.validate().is_err());
        assert!(TrainConfig { momentum: 1.0, ..c }.validate().is_err());
    }
}
