//! Run configuration and its `key = value` file format.

use std::fmt::Write as _;

use crate::classifier::{ClassifierConfig, TrainConfig};
use crate::encoders::EncoderConfig;
use crate::meta_net::BiasMode;
use crate::par::Parallelism;

use super::EvalError;

/// Shape of the synthetic world.
#[derive(Clone, Debug, PartialEq)]
pub struct WorldConfig {
    /// Classes in the source dataset.
    pub classes: usize,
    pub shots: usize,
    /// Held-out query images per class.
    pub queries: usize,
    /// Noise norm relative to the unit cluster centers.
    pub cluster_spread: f64,
    /// Probability that an attribute word embeds near its class concept.
    pub attr_correlation: f64,
    /// Words per attribute set (N).
    pub num_words: usize,
    /// Attribute sets per class (K).
    pub num_sets: usize,
    /// Concept rows in the hidden reference description of each class.
    pub concept_rows: usize,
    /// Noise on concept-correlated rows, relative to the concept norm.
    pub concept_jitter: f64,
    /// Place source cluster centers orthogonal to the untrained text
    /// features so untrained scoring is exactly at chance in expectation.
    pub symmetric: bool,
    pub target_datasets: usize,
    pub target_classes: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            classes: 10,
            shots: 16,
            queries: 50,
            cluster_spread: 0.5,
            attr_correlation: 0.9,
            num_words: 8,
            num_sets: 3,
            concept_rows: 8,
            concept_jitter: 0.3,
            symmetric: false,
            target_datasets: 2,
            target_classes: 6,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub num_seeds: usize,
    pub encoder: EncoderConfig,
    pub prompts: usize,
    pub init_phrase: Option<String>,
    pub meta_hidden: Option<usize>,
    pub classifier: ClassifierConfig,
    /// `warmup_steps` here is only used when `warmup_override` is set;
    /// otherwise warmup lasts one epoch.
    pub train: TrainConfig,
    pub warmup_override: Option<usize>,
    pub world: WorldConfig,
    /// Attribute words used per query; `None` uses all `num_words`.
    pub num_attrs: Option<usize>,
    pub domain_shifts: Vec<f64>,
    pub parallelism: Parallelism,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            num_seeds: 3,
            encoder: EncoderConfig::default(),
            prompts: 4,
            init_phrase: None,
            meta_hidden: None,
            classifier: ClassifierConfig::default(),
            train: TrainConfig::default(),
            warmup_override: None,
            world: WorldConfig::default(),
            num_attrs: None,
            domain_shifts: vec![0.0, 0.25, 0.5, 0.75],
            parallelism: Parallelism::Parallel,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, EvalError> {
    value
        .parse()
        .map_err(|_| EvalError::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool, EvalError> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(EvalError::Config(format!(
            "{key}: expected true or false, got {value:?}"
        ))),
    }
}

fn parse_optional<T: std::str::FromStr>(key: &str, value: &str) -> Result<Option<T>, EvalError> {
    if value == "auto" || value.is_empty() {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

fn show_optional<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(|| "auto".into(), T::to_string)
}

impl RunConfig {
    /// Seeds of the run: `seed, seed + 1, ...`.
    pub fn seeds(&self) -> Vec<u64> {
        (0..self.num_seeds as u64).map(|i| self.seed.wrapping_add(i)).collect()
    }

    pub fn attrs_used(&self) -> usize {
        self.num_attrs.unwrap_or(self.world.num_words)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), EvalError> {
        match key {
            "seed" => self.seed = parse(key, value)?,
            "seeds" => self.num_seeds = parse(key, value)?,
            "dim" => {
                self.encoder.dim = parse(key, value)?;
                self.encoder.image_width = self.encoder.dim;
            }
            "depth" => self.encoder.depth = parse(key, value)?,
            "heads" => self.encoder.heads = parse(key, value)?,
            "ctx_len" => self.encoder.ctx_len = parse(key, value)?,
            "ffn_mult" => self.encoder.ffn_mult = parse(key, value)?,
            "prompts" => self.prompts = parse(key, value)?,
            "init_phrase" => self.init_phrase = (!value.is_empty() && value != "none").then(|| value.to_owned()),
            "meta_hidden" => self.meta_hidden = parse_optional(key, value)?,
            "temperature" => self.classifier.temperature = parse(key, value)?,
            "ensemble_k" => self.classifier.ensemble_k = parse(key, value)?,
            "bias_mode" => {
                self.classifier.bias_mode = value
                    .parse::<BiasMode>()
                    .map_err(|e| EvalError::Config(format!("{key}: {e}")))?
            }
            "lr" => self.train.lr = parse(key, value)?,
            "momentum" => self.train.momentum = parse(key, value)?,
            "batch_size" => self.train.batch_size = parse(key, value)?,
            "steps" => self.train.steps = parse(key, value)?,
            "warmup_steps" => self.warmup_override = parse_optional(key, value)?,
            "classes" => self.world.classes = parse(key, value)?,
            "shots" => self.world.shots = parse(key, value)?,
            "queries" => self.world.queries = parse(key, value)?,
            "cluster_spread" => self.world.cluster_spread = parse(key, value)?,
            "attr_correlation" => self.world.attr_correlation = parse(key, value)?,
            "num_words" => self.world.num_words = parse(key, value)?,
            "num_sets" => self.world.num_sets = parse(key, value)?,
            "concept_rows" => self.world.concept_rows = parse(key, value)?,
            "concept_jitter" => self.world.concept_jitter = parse(key, value)?,
            "symmetric" => self.world.symmetric = parse_bool(key, value)?,
            "target_datasets" => self.world.target_datasets = parse(key, value)?,
            "target_classes" => self.world.target_classes = parse(key, value)?,
            "num_attrs" => self.num_attrs = parse_optional(key, value)?,
            "domain_shifts" => {
                self.domain_shifts = value
                    .split(',')
                    .map(|s| parse(key, s.trim()))
                    .collect::<Result<_, _>>()?
            }
            "parallel" => {
                self.parallelism = if parse_bool(key, value)? {
                    Parallelism::Parallel
                } else {
                    Parallelism::Sequential
                }
            }
            _ => return Err(EvalError::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Applies a config file on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<(), EvalError> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| EvalError::Parse {
                line: n + 1,
                reason: format!("expected `key = value`, got {line:?}"),
            })?;
            self.set(k.trim(), v.trim()).map_err(|e| EvalError::Parse {
                line: n + 1,
                reason: e.to_string(),
            })?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self, EvalError> {
        let mut c = Self::default();
        c.apply_text(text)?;
        Ok(c)
    }

    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let w = &self.world;
        let shifts: Vec<String> = self.domain_shifts.iter().map(f64::to_string).collect();
        vec![
            ("seed", self.seed.to_string()),
            ("seeds", self.num_seeds.to_string()),
            ("dim", self.encoder.dim.to_string()),
            ("depth", self.encoder.depth.to_string()),
            ("heads", self.encoder.heads.to_string()),
            ("ctx_len", self.encoder.ctx_len.to_string()),
            ("ffn_mult", self.encoder.ffn_mult.to_string()),
            ("prompts", self.prompts.to_string()),
            ("init_phrase", self.init_phrase.clone().unwrap_or_else(|| "none".into())),
            ("meta_hidden", show_optional(&self.meta_hidden)),
            ("temperature", self.classifier.temperature.to_string()),
            ("ensemble_k", self.classifier.ensemble_k.to_string()),
            ("bias_mode", self.classifier.bias_mode.to_string()),
            ("lr", self.train.lr.to_string()),
            ("momentum", self.train.momentum.to_string()),
            ("batch_size", self.train.batch_size.to_string()),
            ("steps", self.train.steps.to_string()),
            ("warmup_steps", show_optional(&self.warmup_override)),
            ("classes", w.classes.to_string()),
            ("shots", w.shots.to_string()),
            ("queries", w.queries.to_string()),
            ("cluster_spread", w.cluster_spread.to_string()),
            ("attr_correlation", w.attr_correlation.to_string()),
            ("num_words", w.num_words.to_string()),
            ("num_sets", w.num_sets.to_string()),
            ("concept_rows", w.concept_rows.to_string()),
            ("concept_jitter", w.concept_jitter.to_string()),
            ("symmetric", w.symmetric.to_string()),
            ("target_datasets", w.target_datasets.to_string()),
            ("target_classes", w.target_classes.to_string()),
            ("num_attrs", show_optional(&self.num_attrs)),
            ("domain_shifts", shifts.join(",")),
            ("parallel", (self.parallelism == Parallelism::Parallel).to_string()),
        ]
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.to_pairs() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        let bad = |m: String| Err(EvalError::Config(m));
        self.encoder.validate()?;
        self.classifier.validate()?;
        self.train.validate()?;
        let w = &self.world;
        if self.num_seeds == 0 {
            return bad("seeds must be at least 1".into());
        }
        if w.classes < 2 {
            return bad(format!("need at least 2 classes, got {}", w.classes));
        }
        if w.shots == 0 || w.queries == 0 {
            return bad("shots and queries must be positive".into());
        }
        if !(0.0..=1.0).contains(&w.attr_correlation) {
            return bad(format!(
                "attr_correlation must lie in [0, 1], got {}",
                w.attr_correlation
            ));
        }
        if !(w.cluster_spread >= 0.0 && w.concept_jitter >= 0.0) {
            return bad("cluster_spread and concept_jitter must be non-negative".into());
        }
        if w.num_sets == 0 {
            return bad("num_sets must be at least 1".into());
        }
        if self.classifier.ensemble_k > w.num_sets {
            return bad(format!(
                "ensemble_k = {} exceeds num_sets = {}",
                self.classifier.ensemble_k, w.num_sets
            ));
        }
        if self.attrs_used() > w.num_words {
            return bad(format!(
                "num_attrs = {} exceeds num_words = {}",
                self.attrs_used(),
                w.num_words
            ));
        }
        if let Some(p) = &self.init_phrase {
            if crate::tokenizer::split_pieces(p).len() != self.prompts {
                return bad(format!("init_phrase {p:?} must have {} words", self.prompts));
            }
        }
        if self.domain_shifts.iter().any(|s| !(0.0..=1.0).contains(s)) {
            return bad("domain shifts must lie in [0, 1]".into());
        }
        Ok(())
    }
}
