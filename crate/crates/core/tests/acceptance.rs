//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.

mod common;

use std::time::{Duration, Instant};

use coapt::classifier::{
    argmax, class_probabilities, pipeline_gradient_check, train, ClassQuery, ClassifierConfig, Scorer, TrainConfig,
    TrainState,
};
use coapt::eval::{
    evaluate, harmonic_mean, initial_trainables, run_base_to_novel, train_on_dataset, RunConfig, ToyWorld,
};
use coapt::meta_net::{init_meta_net, BiasMode, MetaNetParams};
use coapt::par::Parallelism;
use coapt::prompt::{init_soft_prompts, InitMode, PromptError, QueryBuilder, SoftPromptBank};
use rand::Rng;

use common::*;

const GRAD_TOL: f64 = 1e-4;
const GRAD_STEP: f64 = 1e-5;
const GRAD_BUDGET: Duration = Duration::from_secs(60);
const REDUCTION_TOL: f64 = 1e-12;
const CHANCE: f64 = 100.0 / 3.0;
const CHANCE_BAND: f64 = 5.0;
const LEARNED_FLOOR: f64 = 90.0;
const HM_TOL: f64 = 0.005;
const ENSEMBLE_TOL: f64 = 1e-12;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn gradient_correctness() -> Outcome {
    let cfg = small_encoder(16);
    let bb = backbone(11, &cfg, 3, 4, true);
    let classes = class_queries(3, 4);
    let mut r = rng(12);
    let images = token_images(6, &cfg, &mut r);
    let labels = vec![0, 1, 2, 2, 1, 0];
    let d = cfg.dim;

    let bank = SoftPromptBank {
        text: Some(gaussian(4, d, 0.5, &mut r)),
        vision: Some(gaussian(2, cfg.image_width, 0.5, &mut r)),
        init_mode: InitMode::Gaussian,
    };
    let mut meta = init_meta_net(d, None, 13).map_err(|e| e.to_string())?;
    let h = meta.hidden();
    meta.b1 = gaussian(1, h, 0.1, &mut r);
    meta.w2 = gaussian(h, d, 1.0 / (h as f64).sqrt(), &mut r);
    meta.b2 = gaussian(1, d, 0.1, &mut r);
    let state = TrainState::new(bank, meta, 14);
    let ccfg = ClassifierConfig {
        temperature: 0.01,
        ensemble_k: 1,
        bias_mode: BiasMode::BiasOnFeature,
    };
    let t0 = Instant::now();
    let rep = pipeline_gradient_check(
        &state,
        &bb,
        &ccfg,
        &classes,
        &images,
        &labels,
        GRAD_STEP,
        Parallelism::Parallel,
    )
    .map_err(|e| e.to_string())?;
    let took = t0.elapsed();
    check(
        rep.max_rel_error <= GRAD_TOL && took < GRAD_BUDGET,
        format!(
            "max rel error {:.3e} over {} coordinates (tol {GRAD_TOL:e}), {:.1}s",
            rep.max_rel_error,
            rep.coordinates,
            took.as_secs_f64()
        ),
    )
}

fn baseline_reduction() -> Outcome {
    let cfg = small_encoder(16);
    let bb = backbone(21, &cfg, 6, 0, false);
    let mut r = rng(22);
    let ccfg = ClassifierConfig::default();
    let mut worst: f64 = 0.0;
    for i in 0..100u64 {
        let n_classes = r.random_range(2..=6);
        let classes: Vec<ClassQuery> = (0..n_classes).map(|c| ClassQuery::plain(format!("cls{c}"))).collect();
        let bank = init_soft_prompts(
            InitMode::Gaussian,
            16,
            4,
            100 + i,
            None,
            &bb.vocab,
            bb.text.token_table(),
        )
        .map_err(|e| e.to_string())?;
        let meta = init_meta_net(16, None, 200 + i).map_err(|e| e.to_string())?;
        let image = feature_images(1, 16, &mut r);
        let eq2 = Scorer {
            backbone: &bb,
            bank: &bank,
            meta: &meta,
            cfg: &ccfg,
            parallelism: Parallelism::Sequential,
        }
        .probabilities(&image, &classes)
        .map_err(|e| e.to_string())?;

        let builder = QueryBuilder::new(&bb.vocab, bb.text.token_table(), cfg.ctx_len);
        let mut rows = Vec::new();
        for (ci, q) in classes.iter().enumerate() {
            let query = builder
                .assemble_text_query(&q.name, ci, &[], 0, &bank)
                .map_err(|e| e.to_string())?;
            rows.push(bb.text.encode(&query).map_err(|e| e.to_string())?.into_data());
        }
        let t = coapt::autodiff::Tensor::from_rows(&rows).map_err(|e| e.to_string())?;
        let eq1 = class_probabilities(image[0].tensor(), &t, ccfg.temperature).map_err(|e| e.to_string())?;
        for (a, b) in eq1.iter().zip(&eq2[0]) {
            worst = worst.max((a - b).abs());
        }
    }
    check(
        worst <= REDUCTION_TOL,
        format!("max |adapted - unadapted| = {worst:.2e} over 100 instances (tol {REDUCTION_TOL:e})"),
    )
}

fn frozen_backbone() -> Outcome {
    let mut c = RunConfig::default();
    c.world.classes = 3;
    c.world.target_datasets = 0;
    let world = ToyWorld::generate(&c, 31, &[]).map_err(|e| e.to_string())?;
    let bb = &world.backbone;
    let before = (
        bb.text.checksum(),
        bb.image.checksum(),
        bb.text.token_table().checksum(),
    );
    let (bank, meta) = initial_trainables(&c, 31, bb).map_err(|e| e.to_string())?;
    let start = TrainState::new(bank, meta, 31);
    let tcfg = TrainConfig {
        steps: 100,
        ..TrainConfig::default()
    }
    .with_epoch_warmup(world.source.support.len());
    let classes = world
        .class_queries(&world.source, 0, c.attrs_used())
        .map_err(|e| e.to_string())?;
    let out = train(
        start.clone(),
        bb,
        &c.classifier,
        &tcfg,
        &classes,
        &world.source.support,
        &world.source.support_labels,
    )
    .map_err(|e| e.to_string())?;
    let after = (
        bb.text.checksum(),
        bb.image.checksum(),
        bb.text.token_table().checksum(),
    );
    let bank_moved = out.state.bank_checksum() != start.bank_checksum();
    let meta_moved = out.state.meta_checksum() != start.meta_checksum();
    check(
        before == after && bank_moved && meta_moved && out.state.step == 100,
        format!(
            "encoders unchanged: {}, prompts changed: {bank_moved}, meta-net changed: {meta_moved}",
            before == after
        ),
    )
}

fn toy_learning_once() -> Result<(f64, f64, TrainState), String> {
    let mut c = RunConfig::default();
    c.seed = 41;
    c.world.classes = 3;
    c.world.shots = 16;
    c.world.queries = 334;
    c.world.symmetric = true;
    c.world.target_datasets = 0;
    let world = ToyWorld::generate(&c, c.seed, &[]).map_err(|e| e.to_string())?;
    let (bank, meta) = initial_trainables(&c, c.seed, &world.backbone).map_err(|e| e.to_string())?;
    let untrained =
        evaluate(&c, &world, &TrainState::new(bank, meta, c.seed), &world.source, false).map_err(|e| e.to_string())?;
    let out = train_on_dataset(&c, &world, &world.source, c.seed).map_err(|e| e.to_string())?;
    let trained = evaluate(&c, &world, &out.state, &world.source, false).map_err(|e| e.to_string())?;
    Ok((untrained.overall, trained.overall, out.state))
}

fn toy_learning() -> Outcome {
    let (u1, t1, s1) = toy_learning_once()?;
    let (u2, t2, s2) = toy_learning_once()?;
    let same = u1 == u2 && t1 == t2 && s1 == s2;
    check(
        (u1 - CHANCE).abs() <= CHANCE_BAND && t1 >= LEARNED_FLOOR && same,
        format!("untrained {u1:.2}%, trained {t1:.2}% after 200 steps, repeat identical: {same}"),
    )
}

fn metric_fidelity() -> Outcome {
    let a = harmonic_mean(84.74, 77.07).map_err(|e| e.to_string())?;
    let b = harmonic_mean(82.69, 63.22).map_err(|e| e.to_string())?;
    check(
        (a - 80.72).abs() <= HM_TOL && (b - 71.66).abs() <= HM_TOL,
        format!("HM(84.74, 77.07) = {a:.4}, HM(82.69, 63.22) = {b:.4}"),
    )
}

fn ensemble_properties() -> Outcome {
    let cfg = small_encoder(16);
    let bb = backbone(61, &cfg, 3, 6, false);
    let mut r = rng(62);
    let bank = init_soft_prompts(InitMode::Gaussian, 16, 4, 63, None, &bb.vocab, bb.text.token_table())
        .map_err(|e| e.to_string())?;
    let mut meta: MetaNetParams = init_meta_net(16, None, 64).map_err(|e| e.to_string())?;
    meta.w2 = gaussian(meta.hidden(), 16, 0.3, &mut r);
    let ccfg = ClassifierConfig::default();
    let scorer = Scorer {
        backbone: &bb,
        bank: &bank,
        meta: &meta,
        cfg: &ccfg,
        parallelism: Parallelism::Parallel,
    };
    let images = feature_images(20, 16, &mut r);
    let names: Vec<String> = (0..3).map(|c| format!("cls{c}")).collect();
    let set = |k: usize| -> Vec<Vec<String>> {
        (0..3)
            .map(|c| (0..3).map(|j| format!("cls{c}a{}", (j + 2 * k) % 6)).collect())
            .collect()
    };
    let per_set = |k: usize| {
        let qs: Vec<ClassQuery> = names
            .iter()
            .zip(set(k))
            .map(|(n, a)| ClassQuery::new(n.clone(), a))
            .collect();
        scorer.probabilities(&images, &qs)
    };
    let err = |e: coapt::classifier::ClassifierError| e.to_string();

    let single = per_set(0).map_err(err)?;
    let same = scorer
        .ensemble(&images, &names, &[set(0), set(0), set(0)])
        .map_err(err)?;
    let mut identical_gap: f64 = 0.0;
    for (a, b) in single.iter().flatten().zip(same.iter().flatten()) {
        identical_gap = identical_gap.max((a - b).abs());
    }

    let parts: Vec<Vec<Vec<f64>>> = (0..3).map(per_set).collect::<Result<_, _>>().map_err(err)?;
    let mixed = scorer
        .ensemble(&images, &names, &[set(0), set(1), set(2)])
        .map_err(err)?;
    let mut mean_gap: f64 = 0.0;
    let mut argmax_agree = true;
    for (j, p) in mixed.iter().enumerate() {
        let sum: Vec<f64> = (0..3).map(|c| parts.iter().map(|s| s[j][c]).sum()).collect();
        for (c, v) in p.iter().enumerate() {
            mean_gap = mean_gap.max((v - sum[c] / 3.0).abs());
        }
        argmax_agree &= argmax(p) == argmax(&sum);
    }
    let distinct = (0..3).any(|k| parts[k] != parts[0]);
    check(
        identical_gap <= ENSEMBLE_TOL && mean_gap <= ENSEMBLE_TOL && argmax_agree && distinct,
        format!(
            "identical-set gap {identical_gap:.1e}, mean gap {mean_gap:.1e}, mean/sum argmax agree: {argmax_agree}"
        ),
    )
}

fn budget_enforcement() -> Outcome {
    let cfg = small_encoder(16);
    let bb = backbone(71, &cfg, 1, 80, false);
    let bank = init_soft_prompts(InitMode::Gaussian, 16, 4, 72, None, &bb.vocab, bb.text.token_table())
        .map_err(|e| e.to_string())?;
    let builder = QueryBuilder::new(&bb.vocab, bb.text.token_table(), 77);
    let words = |n: usize| (0..n).map(|j| format!("cls0a{j}")).collect::<Vec<_>>();
    let q = builder
        .assemble_text_query("cls0", 0, &words(32), 0, &bank)
        .map_err(|e| e.to_string())?;
    let used = q.used_len();
    let full = builder
        .assemble_text_query("cls0", 0, &words(70), 0, &bank)
        .map_err(|e| e.to_string())?;
    let mut named = true;
    for n in 71..=80 {
        match builder.assemble_text_query("cls0", 0, &words(n), 0, &bank) {
            Err(e @ PromptError::Overflow { .. }) => {
                named &= e.excess() == Some(n - 70) && e.to_string().contains(&format!("({} over)", n - 70));
            }
            _ => named = false,
        }
    }
    check(
        used == 39 && q.ctx_len() == 77 && full.used_len() == 77 && named,
        format!("32 attributes use {used}/77 slots, 70 fill the context, 71..=80 rejected with the excess: {named}"),
    )
}

fn attribute_usefulness() -> Outcome {
    let novel = |rho: f64| -> Result<f64, String> {
        let mut c = RunConfig::default();
        c.world.attr_correlation = rho;
        c.world.target_datasets = 0;
        c.num_seeds = 3;
        Ok(run_base_to_novel(&c, &[]).map_err(|e| e.to_string())?.novel)
    };
    let (hi, lo) = (novel(0.9)?, novel(0.0)?);
    check(
        hi >= lo,
        format!("novel accuracy over 3 seeds: correlated {hi:.2}%, random {lo:.2}%"),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("gradient correctness", gradient_correctness),
        ("baseline reduction", baseline_reduction),
        ("frozen backbone", frozen_backbone),
        ("toy learning", toy_learning),
        ("metric fidelity", metric_fidelity),
        ("ensemble properties", ensemble_properties),
        ("budget enforcement", budget_enforcement),
        ("attribute usefulness", attribute_usefulness),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        match run() {
            Ok(d) => println!("criterion {}: PASS  {name}: {d}", i + 1),
            Err(d) => {
                failed += 1;
                println!("criterion {}: FAIL  {name}: {d}", i + 1);
            }
        }
    }
    if failed > 0 {
        println!("{failed} of {} criteria failed", criteria.len());
        std::process::exit(1);
    }
}
