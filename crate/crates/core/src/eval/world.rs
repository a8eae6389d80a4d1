//! Seeded synthetic worlds standing in for real image datasets.
//!
//! Every class has a hidden concept vector in token-embedding space. Its
//! image cluster is centered on the frozen text encoder's feature of a hidden
//! reference description built from the class name and concept-like rows.
//! Attribute words embed near the concept with probability
//! `attr_correlation` and at random otherwise, so informative attributes make
//! the prompted query resemble the reference description.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use sha2::{Digest, Sha256};

use crate::attr_vocab::AttributeVocab;
use crate::autodiff::Tensor;
use crate::classifier::{Backbone, ClassQuery};
use crate::encoders::{build_frozen_encoders, token_table_from_export, EmbeddingExport, ExportKind, ImageInput};
use crate::meta_net::{init_meta_net, MetaNetParams};
use crate::par::try_map_range;
use crate::prompt::{init_soft_prompts, AssembledQuery, InitMode, QueryBuilder, Slot, SoftPromptBank};
use crate::rng::{rng_for, rng_indexed, stream};
use crate::tokenizer::{split_pieces, Vocabulary, EOS, SOS};

use super::{EvalError, RunConfig};

/// Hidden prompt rows in every reference description.
const REFERENCE_PROMPTS: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct ToyDataset {
    pub name: String,
    pub class_names: Vec<String>,
    /// Index of each class in the world.
    pub class_ids: Vec<usize>,
    pub support: Vec<ImageInput>,
    pub support_labels: Vec<usize>,
    pub query: Vec<ImageInput>,
    pub query_labels: Vec<usize>,
    pub domain_shift: f64,
}

impl ToyDataset {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn checksum(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(self.name.as_bytes());
        for n in &self.class_names {
            h.update(n.as_bytes());
            h.update([0]);
        }
        for (x, l) in self
            .support
            .iter()
            .zip(&self.support_labels)
            .chain(self.query.iter().zip(&self.query_labels))
        {
            x.tensor().feed(&mut h);
            h.update((*l as u64).to_le_bytes());
        }
        h.update(self.domain_shift.to_le_bytes());
        h.finalize().into()
    }

    /// The dataset restricted to `classes` (local indices), relabeled
    /// `0..classes.len()` in the given order.
    pub fn subset(&self, classes: &[usize]) -> ToyDataset {
        let remap: HashMap<usize, usize> = classes.iter().enumerate().map(|(new, &old)| (old, new)).collect();
        let pick = |xs: &[ImageInput], ls: &[usize]| -> (Vec<ImageInput>, Vec<usize>) {
            xs.iter()
                .zip(ls)
                .filter_map(|(x, l)| remap.get(l).map(|&n| (x.clone(), n)))
                .unzip()
        };
        let (support, support_labels) = pick(&self.support, &self.support_labels);
        let (query, query_labels) = pick(&self.query, &self.query_labels);
        ToyDataset {
            name: self.name.clone(),
            class_names: classes.iter().map(|&c| self.class_names[c].clone()).collect(),
            class_ids: classes.iter().map(|&c| self.class_ids[c]).collect(),
            support,
            support_labels,
            query,
            query_labels,
            domain_shift: self.domain_shift,
        }
    }
}

/// A frozen backbone plus the datasets and attribute vocabulary built for
/// it.
#[derive(Clone, Debug)]
pub struct ToyWorld {
    pub seed: u64,
    pub backbone: Backbone,
    pub vocab: AttributeVocab,
    pub source: ToyDataset,
    pub targets: Vec<ToyDataset>,
    /// Unit cluster center of every world class.
    pub centers: Vec<Vec<f64>>,
    shots: usize,
    queries: usize,
    spread: f64,
}

fn gaussian_vec(rng: &mut ChaCha8Rng, d: usize, std: f64) -> Vec<f64> {
    let n = Normal::new(0.0, std).expect("finite std");
    (0..d).map(|_| n.sample(rng)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalized(mut v: Vec<f64>) -> Result<Vec<f64>, EvalError> {
    let n = dot(&v, &v).sqrt();
    if !(n > 1e-12) {
        return Err(EvalError::Config("degenerate cluster center".into()));
    }
    v.iter_mut().for_each(|x| *x /= n);
    Ok(v)
}

/// Removes the components of `v` along the orthonormal `basis`.
fn project_out(v: &mut [f64], basis: &[Vec<f64>]) {
    for q in basis {
        let c = dot(v, q);
        v.iter_mut().zip(q).for_each(|(x, y)| *x -= c * y);
    }
}

/// Orthonormal basis of the row span, via modified Gram-Schmidt.
fn orthonormal_basis(rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for r in rows {
        let mut v = r.clone();
        project_out(&mut v, &basis);
        let n = dot(&v, &v).sqrt();
        if n > 1e-9 * dot(r, r).sqrt().max(1e-300) {
            basis.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    basis
}

/// One class as the world sees it.
struct ClassSpec {
    name: String,
    /// Unique attribute words in order of first appearance.
    pool: Vec<String>,
    sets: Vec<Vec<String>>,
}

fn generated_classes(prefix: &str, count: usize, cfg: &RunConfig, seed: u64, first_id: usize) -> Vec<ClassSpec> {
    let (n, k) = (cfg.world.num_words, cfg.world.num_sets);
    (0..count)
        .map(|i| {
            let name = format!("{prefix}{i:02}");
            let pool: Vec<String> = (0..2 * n).map(|j| format!("{name}w{j:02}")).collect();
            let mut rng = rng_indexed(seed, stream::ATTR_SETS, (first_id + i) as u64);
            let sets = (0..k)
                .map(|_| {
                    rand::seq::index::sample(&mut rng, pool.len(), n)
                        .into_iter()
                        .map(|j| pool[j].clone())
                        .collect()
                })
                .collect();
            ClassSpec { name, pool, sets }
        })
        .collect()
}

fn file_classes(v: &AttributeVocab) -> Vec<ClassSpec> {
    v.classes
        .iter()
        .map(|(name, sets)| {
            let mut pool: Vec<String> = Vec::new();
            for w in sets.iter().flatten() {
                if !pool.contains(w) {
                    pool.push(w.clone());
                }
            }
            ClassSpec {
                name: name.clone(),
                pool,
                sets: sets.clone(),
            }
        })
        .collect()
}

/// Token rows in first-come order; later duplicates keep the first row.
#[derive(Default)]
struct RowBook {
    order: Vec<String>,
    rows: HashMap<String, Vec<f64>>,
}

impl RowBook {
    fn offer(&mut self, piece: &str, row: Vec<f64>) {
        if !self.rows.contains_key(piece) {
            self.order.push(piece.to_owned());
            self.rows.insert(piece.to_owned(), row);
        }
    }
}

/// Initial soft prompts and meta-net for a run seed.
pub fn initial_trainables(
    cfg: &RunConfig,
    seed: u64,
    backbone: &Backbone,
) -> Result<(SoftPromptBank, MetaNetParams), EvalError> {
    let d = cfg.encoder.dim;
    let mode = if cfg.init_phrase.is_some() {
        InitMode::Phrase
    } else {
        InitMode::Gaussian
    };
    let bank = init_soft_prompts(
        mode,
        d,
        cfg.prompts,
        seed,
        cfg.init_phrase.as_deref(),
        &backbone.vocab,
        backbone.text.token_table(),
    )?;
    let meta = match cfg.classifier.bias_mode.out_dim(d) {
        out if out == d => init_meta_net(d, cfg.meta_hidden, seed)?,
        out => MetaNetParams::init(d, cfg.meta_hidden.unwrap_or(d.div_ceil(2)), out, seed)?,
    };
    Ok((bank, meta))
}

impl ToyWorld {
    /// Builds the world for one seed. `overrides[d]`, when present, supplies
    /// the class names and attribute sets of dataset `d` (0 = source).
    pub fn generate(cfg: &RunConfig, seed: u64, overrides: &[AttributeVocab]) -> Result<Self, EvalError> {
        Self::generate_with(cfg, seed, overrides, None)
    }

    /// [`ToyWorld::generate`] with token rows taken from a token export
    /// wherever it has a record for a piece.
    pub fn generate_with(
        cfg: &RunConfig,
        seed: u64,
        overrides: &[AttributeVocab],
        tokens: Option<&EmbeddingExport>,
    ) -> Result<Self, EvalError> {
        cfg.validate()?;
        let w = &cfg.world;
        let d = cfg.encoder.dim;
        let std = 1.0 / (d as f64).sqrt();
        if overrides.len() > 1 + w.target_datasets {
            return Err(EvalError::Config(format!(
                "{} vocabulary files for {} datasets",
                overrides.len(),
                1 + w.target_datasets
            )));
        }
        for o in overrides {
            if o.num_sets != w.num_sets || o.num_words != w.num_words {
                return Err(EvalError::Config(format!(
                    "vocabulary for {:?} has N={}, K={} but the run uses N={}, K={}",
                    o.dataset, o.num_words, o.num_sets, w.num_words, w.num_sets
                )));
            }
        }

        let mut datasets: Vec<(String, Vec<ClassSpec>)> = Vec::new();
        let mut next_id = 0;
        for di in 0..=w.target_datasets {
            let (name, prefix, count) = if di == 0 {
                ("source".to_string(), "src".to_string(), w.classes)
            } else {
                (format!("target{di}"), format!("t{di}c"), w.target_classes)
            };
            let specs = match overrides.get(di) {
                Some(v) => file_classes(v),
                None => generated_classes(&prefix, count, cfg, seed, next_id),
            };
            let name = overrides.get(di).map_or(name, |v| v.dataset.clone());
            next_id += specs.len();
            datasets.push((name, specs));
        }
        let all: Vec<&ClassSpec> = datasets.iter().flat_map(|(_, s)| s).collect();
        for (i, a) in all.iter().enumerate() {
            if all[..i].iter().any(|b| b.name == a.name) {
                return Err(EvalError::Config(format!("class {:?} appears in two datasets", a.name)));
            }
        }

        // Token rows.
        let mut book = RowBook::default();
        if let Some(export) = tokens {
            if export.kind != ExportKind::Token || export.dim != d {
                return Err(EvalError::Config(format!(
                    "token export must be a {d}-dimensional token table"
                )));
            }
            let (vocab, table) = token_table_from_export(export, seed)?;
            for (name, _) in &export.records {
                let id = match name.as_str() {
                    "<sos>" => SOS,
                    "<eos>" => EOS,
                    "<unk>" => crate::tokenizer::UNK,
                    n => vocab.id(n).expect("built from these names"),
                };
                book.offer(name, table.row_slice(id).to_vec());
            }
        }
        let mut special = rng_for(seed, stream::SPECIAL_TOKENS);
        for tok in ["<sos>", "<eos>", "<unk>"] {
            book.offer(tok, gaussian_vec(&mut special, d, std));
        }
        if let Some(p) = &cfg.init_phrase {
            let mut rng = rng_indexed(seed, stream::SPECIAL_TOKENS, 1);
            for piece in split_pieces(p) {
                book.offer(&piece, gaussian_vec(&mut rng, d, std));
            }
        }
        let mut concepts = Vec::with_capacity(all.len());
        let mut concept_rows = Vec::with_capacity(all.len());
        for (g, spec) in all.iter().enumerate() {
            let mut rng = rng_indexed(seed, stream::CONCEPTS, g as u64);
            let z = gaussian_vec(&mut rng, d, std);
            let jitter = |rng: &mut ChaCha8Rng| -> Vec<f64> {
                let e = gaussian_vec(rng, d, std * w.concept_jitter);
                z.iter().zip(e).map(|(a, b)| a + b).collect()
            };
            concept_rows.push((0..w.concept_rows).map(|_| jitter(&mut rng)).collect::<Vec<_>>());

            let mut crng = rng_indexed(seed, stream::CLASS_TOKENS, g as u64);
            for piece in split_pieces(&spec.name) {
                book.offer(&piece, gaussian_vec(&mut crng, d, std));
            }
            let mut arng = rng_indexed(seed, stream::ATTRIBUTES, g as u64);
            for word in &spec.pool {
                let correlated = arng.random::<f64>() < w.attr_correlation;
                for piece in split_pieces(word) {
                    let row = if correlated {
                        let e = gaussian_vec(&mut arng, d, std * w.concept_jitter);
                        z.iter().zip(e).map(|(a, b)| a + b).collect()
                    } else {
                        gaussian_vec(&mut arng, d, std)
                    };
                    book.offer(&piece, row);
                }
            }
            concepts.push(z);
        }
        let words: Vec<&str> = book
            .order
            .iter()
            .map(String::as_str)
            .filter(|p| !matches!(*p, "<sos>" | "<eos>" | "<unk>"))
            .collect();
        let vocab = Vocabulary::build(&[words])?;
        let mut table = Tensor::zeros(vocab.size(), d);
        for (piece, row) in &book.rows {
            let id = match piece.as_str() {
                "<sos>" => SOS,
                "<eos>" => EOS,
                "<unk>" => crate::tokenizer::UNK,
                p => vocab.id(p).expect("every offered piece is in the vocabulary"),
            };
            table.row_slice_mut(id).copy_from_slice(row);
        }
        let (text, image) = build_frozen_encoders(seed, &cfg.encoder, table, false)?;
        let backbone = Backbone { vocab, text, image };

        // Reference descriptions and cluster centers.
        let mut prng = rng_for(seed, stream::REFERENCE);
        let hidden_prompts: Vec<Vec<f64>> = (0..REFERENCE_PROMPTS)
            .map(|_| gaussian_vec(&mut prng, d, std))
            .collect();
        let raw = try_map_range(cfg.parallelism, all.len(), |g| {
            let q = reference_query(&backbone, &all[g].name, &hidden_prompts, &concept_rows[g])?;
            Ok::<_, EvalError>(backbone.text.encode(&q)?.into_data())
        })?;
        let mean: Vec<f64> = (0..d)
            .map(|j| raw.iter().map(|r| r[j]).sum::<f64>() / raw.len() as f64)
            .collect();
        let mut centers = raw
            .into_iter()
            .map(|r| normalized(r.iter().zip(&mean).map(|(a, b)| a - b).collect()))
            .collect::<Result<Vec<_>, _>>()?;

        let mut class_vocab = Vec::new();
        for spec in &all {
            class_vocab.push((spec.name.clone(), spec.sets.clone()));
        }
        let vocab = AttributeVocab {
            dataset: "toy".into(),
            generator: if overrides.is_empty() { "toy-generator" } else { "mixed" }.into(),
            num_words: w.num_words,
            num_sets: w.num_sets,
            classes: class_vocab,
        };

        let source_count = datasets[0].1.len();
        if w.symmetric {
            let (bank, _) = initial_trainables(cfg, seed, &backbone)?;
            let builder = QueryBuilder::new(&backbone.vocab, backbone.text.token_table(), cfg.encoder.ctx_len);
            let n_attrs = cfg.attrs_used();
            let feats = try_map_range(cfg.parallelism, source_count, |c| {
                let spec = all[c];
                let attrs: Vec<String> = spec.sets[0].iter().take(n_attrs).cloned().collect();
                let q = builder.assemble_text_query(&spec.name, c, &attrs, 0, &bank)?;
                Ok::<_, EvalError>(backbone.text.encode(&q)?.into_data())
            })?;
            let basis = orthonormal_basis(&feats);
            for c in centers.iter_mut().take(source_count) {
                project_out(c, &basis);
                *c = normalized(std::mem::take(c))?;
            }
        }

        let mut world = ToyWorld {
            seed,
            backbone,
            vocab,
            source: ToyDataset {
                name: String::new(),
                class_names: vec![],
                class_ids: vec![],
                support: vec![],
                support_labels: vec![],
                query: vec![],
                query_labels: vec![],
                domain_shift: 0.0,
            },
            targets: Vec::new(),
            centers,
            shots: w.shots,
            queries: w.queries,
            spread: w.cluster_spread,
        };
        let mut first = 0;
        let mut built = Vec::new();
        for (name, specs) in &datasets {
            let ids: Vec<usize> = (first..first + specs.len()).collect();
            first += specs.len();
            let names = specs.iter().map(|s| s.name.clone()).collect();
            built.push(world.make_dataset(name, names, ids, 0.0));
        }
        let mut it = built.into_iter();
        world.source = it.next().expect("source dataset");
        world.targets = it.collect();
        Ok(world)
    }

    fn make_dataset(&self, name: &str, class_names: Vec<String>, class_ids: Vec<usize>, shift: f64) -> ToyDataset {
        let d = self.centers[0].len();
        let mut ds = ToyDataset {
            name: name.to_owned(),
            class_names,
            class_ids: class_ids.clone(),
            support: Vec::new(),
            support_labels: Vec::new(),
            query: Vec::new(),
            query_labels: Vec::new(),
            domain_shift: shift,
        };
        for (label, &g) in class_ids.iter().enumerate() {
            let center = self.shifted_center(g, shift);
            let scale = self.spread * (1.0 + shift) / (d as f64).sqrt();
            let mut rng = rng_indexed(self.seed, stream::IMAGES, g as u64);
            for j in 0..self.shots + self.queries {
                let f: Vec<f64> = center
                    .iter()
                    .map(|c| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        c + scale * z
                    })
                    .collect::<Vec<f64>>();
                let x = ImageInput::Feature(Tensor::row(f));
                if j < self.shots {
                    ds.support.push(x);
                    ds.support_labels.push(label);
                } else {
                    ds.query.push(x);
                    ds.query_labels.push(label);
                }
            }
        }
        ds
    }

    fn shifted_center(&self, g: usize, shift: f64) -> Vec<f64> {
        let u = &self.centers[g];
        if shift == 0.0 {
            return u.clone();
        }
        let mut rng = rng_indexed(self.seed, stream::DOMAIN, g as u64);
        let mut w = gaussian_vec(&mut rng, u.len(), 1.0);
        project_out(&mut w, std::slice::from_ref(u));
        let n = dot(&w, &w).sqrt();
        let theta = shift * std::f64::consts::FRAC_PI_2;
        u.iter()
            .zip(&w)
            .map(|(a, b)| theta.cos() * a + theta.sin() * b / n)
            .collect()
    }

    /// `ds` with its clusters rotated by `shift · 90°` toward a random
    /// direction and noise scaled by `1 + shift`. The per-image noise draws
    /// are shared with the unshifted dataset, so a zero shift reproduces it
    /// exactly.
    pub fn shifted(&self, ds: &ToyDataset, shift: f64) -> ToyDataset {
        let mut out = self.make_dataset(&ds.name, ds.class_names.clone(), ds.class_ids.clone(), shift);
        out.name = format!("{}@{shift}", ds.name);
        out
    }

    /// One query per class of `ds`, using the first `n_attrs` words of set
    /// `k`.
    pub fn class_queries(&self, ds: &ToyDataset, k: usize, n_attrs: usize) -> Result<Vec<ClassQuery>, EvalError> {
        ds.class_names
            .iter()
            .map(|c| {
                let sets = self.vocab.inference_sets(c)?;
                let set = sets
                    .get(k)
                    .ok_or_else(|| crate::attr_vocab::VocabError::UnknownSet { class: c.clone(), k })?;
                Ok(ClassQuery::new(c.clone(), set.iter().take(n_attrs).cloned().collect()))
            })
            .collect()
    }
}

fn reference_query(
    backbone: &Backbone,
    class_name: &str,
    hidden_prompts: &[Vec<f64>],
    concept_rows: &[Vec<f64>],
) -> Result<AssembledQuery, EvalError> {
    let table = backbone.text.token_table();
    let ctx = backbone.text.ctx_len();
    let d = table.cols();
    let class_ids = backbone
        .vocab
        .encode(class_name, crate::tokenizer::OnUnknown::Error)?
        .ids;
    let needed = 2 + hidden_prompts.len() + class_ids.len() + concept_rows.len();
    if needed > ctx {
        return Err(crate::prompt::PromptError::Overflow { needed, ctx_len: ctx }.into());
    }
    let mut data = Vec::with_capacity(ctx * d);
    let mut slots = Vec::with_capacity(ctx);
    data.extend_from_slice(table.row_slice(SOS));
    slots.push(Slot::Sos);
    for (i, p) in hidden_prompts.iter().enumerate() {
        data.extend_from_slice(p);
        slots.push(Slot::Soft(i));
    }
    for id in class_ids {
        data.extend_from_slice(table.row_slice(id));
        slots.push(Slot::Class);
    }
    for (n, r) in concept_rows.iter().enumerate() {
        data.extend_from_slice(r);
        slots.push(Slot::Attr(n));
    }
    data.extend_from_slice(table.row_slice(EOS));
    slots.push(Slot::Eos);
    data.resize(ctx * d, 0.0);
    slots.resize(ctx, Slot::Pad);
    Ok(AssembledQuery {
        embeddings: Tensor::matrix(ctx, d, data),
        slots,
        class_index: 0,
        attr_set_index: 0,
    })
}
