//! Base-to-novel, cross-dataset and domain-shift protocols plus the
//! attribute-count sweep.
//!
//! The world (backbone, classes, images) comes from `cfg.seed`; every run
//! seed re-draws the trainables and the batch order.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::attr_vocab::AttributeVocab;
use crate::classifier::{train, ClassQuery, Scorer, TrainOutcome, TrainState};
use crate::par::try_map_range;
use crate::prompt::{PromptError, QueryBuilder};

use super::{
    config_echo, harmonic_mean_or_zero, initial_trainables, mean, split_base_novel, Accuracy, DatasetScore, EvalError,
    MetricsReport, RunConfig, SeedReport, ToyDataset, ToyWorld, TransferReport,
};

/// Trains fresh trainables for `seed` on the support images of `ds`.
pub fn train_on_dataset(
    cfg: &RunConfig,
    world: &ToyWorld,
    ds: &ToyDataset,
    seed: u64,
) -> Result<TrainOutcome, EvalError> {
    world.vocab.require_classes(&ds.class_names)?;
    let (bank, meta) = initial_trainables(cfg, seed, &world.backbone)?;
    let mut tcfg = cfg.train;
    match cfg.warmup_override {
        Some(w) => tcfg.warmup_steps = w.min(tcfg.steps),
        None => tcfg = tcfg.with_epoch_warmup(ds.support.len()),
    }
    let classes = world.class_queries(ds, 0, cfg.attrs_used())?;
    Ok(train(
        TrainState::new(bank, meta, seed),
        &world.backbone,
        &cfg.classifier,
        &tcfg,
        &classes,
        &ds.support,
        &ds.support_labels,
    )?)
}

/// Query accuracy of `state` on `ds`. Without `ensemble` every class uses
/// its training attribute set; with it, the distributions of the first
/// `ensemble_k` sets are averaged.
pub fn evaluate(
    cfg: &RunConfig,
    world: &ToyWorld,
    state: &TrainState,
    ds: &ToyDataset,
    ensemble: bool,
) -> Result<Accuracy, EvalError> {
    world.vocab.require_classes(&ds.class_names)?;
    let scorer = Scorer {
        backbone: &world.backbone,
        bank: &state.bank,
        meta: &state.meta,
        cfg: &cfg.classifier,
        parallelism: cfg.parallelism,
    };
    let n = cfg.attrs_used();
    let probs = if ensemble {
        let sets = (0..cfg.classifier.ensemble_k)
            .map(|k| {
                world
                    .class_queries(ds, k, n)
                    .map(|qs| qs.into_iter().map(|q| q.attrs).collect::<Vec<_>>())
            })
            .collect::<Result<Vec<_>, _>>()?;
        scorer.ensemble(&ds.query, &ds.class_names, &sets)?
    } else {
        let classes: Vec<ClassQuery> = world.class_queries(ds, 0, n)?;
        scorer.probabilities(&ds.query, &classes)?
    };
    Ok(Accuracy::from_probs(&probs, &ds.query_labels, ds.num_classes()))
}

/// Base-to-novel generalization on a freshly generated world.
pub fn run_base_to_novel(cfg: &RunConfig, overrides: &[AttributeVocab]) -> Result<MetricsReport, EvalError> {
    let world = ToyWorld::generate(cfg, cfg.seed, overrides)?;
    run_base_to_novel_in(cfg, &world)
}

/// Base-to-novel generalization on an existing world: train on the base
/// half of the source classes, score base queries with the training set and
/// novel queries with the ensemble.
pub fn run_base_to_novel_in(cfg: &RunConfig, world: &ToyWorld) -> Result<MetricsReport, EvalError> {
    cfg.validate()?;
    let (base_idx, novel_idx) = split_base_novel(world.source.num_classes(), cfg.seed);
    let base = world.source.subset(&base_idx);
    let novel = world.source.subset(&novel_idx);
    world.vocab.require_classes(&world.source.class_names)?;
    let seeds = cfg.seeds();
    let per_seed = try_map_range(cfg.parallelism, seeds.len(), |i| {
        let seed = seeds[i];
        let out = train_on_dataset(cfg, world, &base, seed)?;
        let b = evaluate(cfg, world, &out.state, &base, false)?;
        let n = evaluate(cfg, world, &out.state, &novel, true)?;
        log::info!("seed {seed}: base {:.2} novel {:.2}", b.overall, n.overall);
        Ok::<_, EvalError>(SeedReport {
            seed,
            hm: harmonic_mean_or_zero(b.overall, n.overall),
            base: b,
            novel: n,
            final_loss: out.losses.last().copied().unwrap_or(f64::NAN),
        })
    })?;
    let b = mean(&per_seed.iter().map(|s| s.base.overall).collect::<Vec<_>>());
    let n = mean(&per_seed.iter().map(|s| s.novel.overall).collect::<Vec<_>>());
    Ok(MetricsReport {
        base: b,
        novel: n,
        hm: harmonic_mean_or_zero(b, n),
        base_classes: base.class_names,
        novel_classes: novel.class_names,
        per_seed,
        config: config_echo(cfg),
    })
}

/// Trains on all source classes and scores each of `evals`, with the
/// ensemble where `ensemble[j]` is set. Entry 0 is the source.
fn transfer(
    cfg: &RunConfig,
    world: &ToyWorld,
    evals: &[ToyDataset],
    ensemble: &[bool],
) -> Result<TransferReport, EvalError> {
    let seeds = cfg.seeds();
    let scores = try_map_range(cfg.parallelism, seeds.len(), |i| {
        let out = train_on_dataset(cfg, world, &world.source, seeds[i])?;
        evals
            .iter()
            .enumerate()
            .map(|(j, ds)| Ok(evaluate(cfg, world, &out.state, ds, ensemble[j])?.overall))
            .collect::<Result<Vec<f64>, EvalError>>()
    })?;
    let datasets: Vec<DatasetScore> = evals
        .iter()
        .enumerate()
        .map(|(j, ds)| {
            let per_seed: Vec<f64> = scores.iter().map(|s| s[j]).collect();
            DatasetScore {
                name: ds.name.clone(),
                domain_shift: ds.domain_shift,
                accuracy: mean(&per_seed),
                per_seed,
            }
        })
        .collect();
    let targets: Vec<f64> = datasets.iter().skip(1).map(|d| d.accuracy).collect();
    Ok(TransferReport {
        source: world.source.name.clone(),
        target_average: mean(&targets),
        datasets,
        seeds,
        config: config_echo(cfg),
    })
}

/// Source-trained prompts evaluated on the source and every target dataset.
pub fn run_cross_dataset(cfg: &RunConfig, overrides: &[AttributeVocab]) -> Result<TransferReport, EvalError> {
    cfg.validate()?;
    let world = ToyWorld::generate(cfg, cfg.seed, overrides)?;
    if world.targets.is_empty() {
        return Err(EvalError::Config(
            "cross-dataset evaluation needs target_datasets >= 1".into(),
        ));
    }
    let evals: Vec<ToyDataset> = std::iter::once(world.source.clone())
        .chain(world.targets.iter().cloned())
        .collect();
    let ensemble: Vec<bool> = (0..evals.len()).map(|j| j > 0).collect();
    transfer(cfg, &world, &evals, &ensemble)
}

/// Source-trained prompts evaluated on the source queries under each
/// configured domain shift. The first entry is the unshifted source.
pub fn run_domain_generalization(cfg: &RunConfig, overrides: &[AttributeVocab]) -> Result<TransferReport, EvalError> {
    cfg.validate()?;
    let world = ToyWorld::generate(cfg, cfg.seed, overrides)?;
    let mut evals = vec![world.source.clone()];
    for &s in cfg.domain_shifts.iter().filter(|&&s| s > 0.0) {
        let shifted = world.shifted(&world.source, s);
        if shifted.class_names != world.source.class_names {
            return Err(EvalError::Config(format!(
                "shifted dataset {} changed its classes",
                shifted.name
            )));
        }
        evals.push(shifted);
    }
    // Shifted copies keep the source classes, so they use the training set.
    transfer(cfg, &world, &evals, &vec![false; evals.len()])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub count: usize,
    pub base: f64,
    pub novel: f64,
    pub hm: f64,
}

/// Base-to-novel results for each attribute-word count. The world is built
/// once with `max(counts)` words per set; each run uses the first `count`.
pub fn sweep_attribute_count(
    cfg: &RunConfig,
    counts: &[usize],
    overrides: &[AttributeVocab],
) -> Result<Vec<SweepRow>, EvalError> {
    let &max = counts
        .iter()
        .max()
        .ok_or_else(|| EvalError::Config("no attribute counts to sweep".into()))?;
    let mut wcfg = cfg.clone();
    wcfg.world.num_words = max;
    wcfg.num_attrs = None;
    let world = ToyWorld::generate(&wcfg, cfg.seed, overrides)?;
    let builder = QueryBuilder::new(
        &world.backbone.vocab,
        world.backbone.text.token_table(),
        cfg.encoder.ctx_len,
    );
    for &count in counts {
        for name in world.vocab.class_names() {
            for set in world.vocab.sets(name)? {
                let words: Vec<String> = set.iter().take(count).cloned().collect();
                let needed = builder.required_slots(name, &words, cfg.prompts)?;
                if needed > cfg.encoder.ctx_len {
                    let e = PromptError::Overflow {
                        needed,
                        ctx_len: cfg.encoder.ctx_len,
                    };
                    return Err(EvalError::Overflow {
                        count,
                        excess: e.excess().unwrap_or(needed - cfg.encoder.ctx_len),
                    });
                }
            }
        }
    }
    counts
        .iter()
        .map(|&count| {
            let mut c = wcfg.clone();
            c.num_attrs = Some(count);
            let r = run_base_to_novel_in(&c, &world)?;
            Ok(SweepRow {
                count,
                base: r.base,
                novel: r.novel,
                hm: r.hm,
            })
        })
        .collect()
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("count,base,novel,hm\n");
    for r in rows {
        let _ = writeln!(s, "{},{:.4},{:.4},{:.4}", r.count, r.base, r.novel, r.hm);
    }
    s
}
