//! Synthetic worlds, evaluation protocols and their reports.

mod config;
mod protocols;
mod world;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::attr_vocab::VocabError;
use crate::classifier::{argmax, ClassifierError};
use crate::encoders::EncoderError;
use crate::meta_net::MetaNetError;
use crate::prompt::PromptError;
use crate::rng::{rng_for, stream};
use crate::tokenizer::TokenizerError;

pub use config::{RunConfig, WorldConfig};
pub use protocols::{
    evaluate, run_base_to_novel, run_base_to_novel_in, run_cross_dataset, run_domain_generalization,
    sweep_attribute_count, sweep_csv, train_on_dataset, SweepRow,
};
pub use world::{initial_trainables, ToyDataset, ToyWorld};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("config line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("harmonic mean needs positive accuracies, got {0} and {1}")]
    Domain(f64, f64),
    #[error("{count} attribute words overflow the context by {excess} tokens")]
    Overflow { count: usize, excess: usize },
    #[error(transparent)]
    Vocab(#[from] VocabError),
    #[error(transparent)]
    Classifier(#[from] ClassifierError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    MetaNet(#[from] MetaNetError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// `2·b·n / (b + n)`; both inputs must be positive.
pub fn harmonic_mean(base: f64, novel: f64) -> Result<f64, EvalError> {
    if !(base > 0.0 && novel > 0.0) {
        return Err(EvalError::Domain(base, novel));
    }
    Ok(2.0 * base * novel / (base + novel))
}

/// Harmonic mean, or 0 when either accuracy is 0.
pub fn harmonic_mean_or_zero(base: f64, novel: f64) -> f64 {
    harmonic_mean(base, novel).unwrap_or(0.0)
}

/// Seeded split of `0..n` into base and novel halves (base gets the extra
/// class when `n` is odd). Each half is sorted.
pub fn split_base_novel(n: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    use rand::seq::SliceRandom;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng_for(seed, stream::SPLIT));
    let mut base = idx[..n.div_ceil(2)].to_vec();
    let mut novel = idx[n.div_ceil(2)..].to_vec();
    base.sort_unstable();
    novel.sort_unstable();
    (base, novel)
}

/// Top-1 accuracy in percent, overall and per class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    pub overall: f64,
    pub per_class: Vec<f64>,
}

impl Accuracy {
    pub fn from_probs(probs: &[Vec<f64>], labels: &[usize], num_classes: usize) -> Self {
        let mut hit = vec![0usize; num_classes];
        let mut seen = vec![0usize; num_classes];
        for (p, &l) in probs.iter().zip(labels) {
            seen[l] += 1;
            hit[l] += (argmax(p) == l) as usize;
        }
        let pct = |h: usize, s: usize| if s == 0 { 0.0 } else { 100.0 * h as f64 / s as f64 };
        Self {
            overall: pct(hit.iter().sum(), seen.iter().sum()),
            per_class: hit.iter().zip(&seen).map(|(&h, &s)| pct(h, s)).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedReport {
    pub seed: u64,
    pub base: Accuracy,
    pub novel: Accuracy,
    pub hm: f64,
    pub final_loss: f64,
}

/// Base-to-novel result averaged over seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub base: f64,
    pub novel: f64,
    /// Harmonic mean of the seed-averaged base and novel accuracies.
    pub hm: f64,
    pub base_classes: Vec<String>,
    pub novel_classes: Vec<String>,
    pub per_seed: Vec<SeedReport>,
    pub config: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetScore {
    pub name: String,
    pub domain_shift: f64,
    pub accuracy: f64,
    pub per_seed: Vec<f64>,
}

/// Accuracy of source-trained prompts on each evaluated dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferReport {
    pub source: String,
    pub datasets: Vec<DatasetScore>,
    /// Mean over all datasets except the source.
    pub target_average: f64,
    pub seeds: Vec<u64>,
    pub config: BTreeMap<String, String>,
}

pub(crate) fn config_echo(cfg: &RunConfig) -> BTreeMap<String, String> {
    cfg.to_pairs().into_iter().map(|(k, v)| (k.to_owned(), v)).collect()
}

pub(crate) fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}
