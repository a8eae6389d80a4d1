mod common;

use std::path::PathBuf;

use coapt::attr_vocab::{fit_to_budget, load_vocab, AttributeVocab, VocabError};
use coapt::classifier::{ClassQuery, Scorer};
use coapt::eval::{
    run_base_to_novel, run_cross_dataset, run_domain_generalization, sweep_attribute_count, train_on_dataset,
    EvalError, MetricsReport, RunConfig, ToyWorld, TransferReport,
};
use coapt::meta_net::init_meta_net;
use coapt::par::Parallelism;

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}

fn vocab(name: &str) -> AttributeVocab {
    load_vocab(&fixture(name)).unwrap().0
}

fn quick() -> RunConfig {
    let mut c = RunConfig::default();
    c.encoder.dim = 16;
    c.encoder.image_width = 16;
    c.encoder.heads = 2;
    c.world.classes = 4;
    c.world.shots = 4;
    c.world.queries = 6;
    c.world.num_words = 4;
    c.world.target_datasets = 1;
    c.world.target_classes = 2;
    c.num_seeds = 2;
    c.train.steps = 20;
    c
}

#[test]
fn fixture_files_load_with_warnings() {
    let (v, warnings) = load_vocab(&fixture("pets.json")).unwrap();
    assert!(warnings.is_empty());
    assert_eq!(
        v.class_names().collect::<Vec<_>>(),
        ["goldfish", "tabby cat", "golden retriever", "hamster"]
    );
    assert_eq!(v.training_set("hamster").unwrap(), ["tiny", "cheeks", "wheel", "fur"]);

    let (short, warnings) = load_vocab(&fixture("short_set.json")).unwrap();
    assert_eq!(short.sets("goldfish").unwrap()[0], ["orange", "fins", "scales"]);
    assert_eq!(warnings.len(), 3);

    assert!(matches!(
        load_vocab(&fixture("missing_set.json")),
        Err(VocabError::Structure(_))
    ));
    assert!(matches!(load_vocab(&fixture("absent.json")), Err(VocabError::Io(_))));

    let round = AttributeVocab::from_json(&v.to_json()).unwrap().0;
    assert_eq!(round, v);
}

#[test]
fn budget_fitting_keeps_whole_words() {
    let v = vocab("pets.json");
    let words = fit_to_budget(&v, "tabby cat", 1, 4, 2, 77).unwrap();
    assert_eq!(words.len(), 4);
    // SOS + 4 prompts + 2 class tokens + EOS leaves two slots.
    assert_eq!(
        fit_to_budget(&v, "tabby cat", 1, 4, 2, 10).unwrap(),
        ["purring", "striped"]
    );
    assert!(fit_to_budget(&v, "tabby cat", 1, 4, 2, 7).is_err());
    assert!(matches!(
        fit_to_budget(&v, "tabby cat", 5, 4, 2, 77),
        Err(VocabError::UnknownSet { .. })
    ));
}

#[test]
fn vocab_files_define_the_world() {
    let mut c = quick();
    c.classifier.ensemble_k = 3;
    let w = ToyWorld::generate(&c, 1, &[vocab("pets.json"), vocab("vehicles.json")]).unwrap();
    assert_eq!(w.source.name, "pets");
    assert_eq!(w.source.class_names.len(), 4);
    assert_eq!(w.targets[0].class_names, ["fire-truck", "bicycle"]);
    assert!(w.backbone.vocab.id("fire").is_some() && w.backbone.vocab.id("truck").is_some());
    let r = run_cross_dataset(&c, &[vocab("pets.json"), vocab("vehicles.json")]).unwrap();
    assert_eq!(
        r.datasets.iter().map(|d| d.name.as_str()).collect::<Vec<_>>(),
        ["pets", "vehicles"]
    );

    let mut other = c.clone();
    other.world.num_words = 8;
    assert!(matches!(
        ToyWorld::generate(&other, 1, &[vocab("pets.json")]),
        Err(EvalError::Config(_))
    ));
    assert!(matches!(
        ToyWorld::generate(&c, 1, &[vocab("pets.json"), vocab("pets.json")]),
        Err(EvalError::Config(_))
    ));
}

#[test]
fn missing_class_fails_before_training() {
    let c = quick();
    let w = ToyWorld::generate(&c, 1, &[]).unwrap();
    let mut ds = w.source.clone();
    ds.class_names[1] = "unicorn".into();
    match train_on_dataset(&c, &w, &ds, 1) {
        Err(EvalError::Vocab(VocabError::UnknownClass(name))) => assert_eq!(name, "unicorn"),
        other => panic!("expected a missing-class error, got {:?}", other.map(|o| o.state.step)),
    }
}

#[test]
fn reports_serialize_and_agree_across_parallelism() {
    let c = quick();
    let r = run_base_to_novel(&c, &[]).unwrap();
    let json = serde_json::to_string(&r).unwrap();
    let back: MetricsReport = serde_json::from_str(&json).unwrap();
    assert_eq!(back, r);
    assert_eq!(r.config["steps"], "20");

    let mut seq = c.clone();
    seq.parallelism = Parallelism::Sequential;
    let s = run_base_to_novel(&seq, &[]).unwrap();
    assert_eq!((s.base, s.novel, s.hm), (r.base, r.novel, r.hm));
    assert_eq!(s.per_seed, r.per_seed);
}

#[test]
fn domain_shift_reports() {
    let mut c = quick();
    c.domain_shifts = vec![0.0, 0.5, 1.0];
    let r: TransferReport = run_domain_generalization(&c, &[]).unwrap();
    assert_eq!(
        r.datasets.iter().map(|d| d.domain_shift).collect::<Vec<_>>(),
        [0.0, 0.5, 1.0]
    );
    assert_eq!(r.datasets[0].per_seed.len(), 2);
    assert!(r.datasets.iter().all(|d| (0.0..=100.0).contains(&d.accuracy)));
    let expect = (r.datasets[1].accuracy + r.datasets[2].accuracy) / 2.0;
    assert!((r.target_average - expect).abs() < 1e-12);
}

#[test]
fn sweep_names_the_overflowing_count() {
    let mut c = quick();
    c.num_seeds = 1;
    c.train.steps = 4;
    c.encoder.ctx_len = 20;
    c.world.concept_rows = 4;
    let rows = sweep_attribute_count(&c, &[0, 4], &[]).unwrap();
    assert_eq!(rows.len(), 2);
    match sweep_attribute_count(&c, &[4, 16], &[]) {
        Err(EvalError::Overflow { count: 16, excess: 3 }) => {}
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn trained_meta_net_beats_the_unadapted_score() {
    let mut c = RunConfig::default();
    c.world.classes = 3;
    c.world.symmetric = true;
    c.world.queries = 40;
    c.world.target_datasets = 0;
    let w = ToyWorld::generate(&c, 41, &[]).unwrap();
    let out = train_on_dataset(&c, &w, &w.source, 41).unwrap();
    let classes: Vec<ClassQuery> = w.class_queries(&w.source, 0, 8).unwrap();
    let zero = init_meta_net(64, None, 0).unwrap();
    let score = |meta| {
        Scorer {
            backbone: &w.backbone,
            bank: &out.state.bank,
            meta,
            cfg: &c.classifier,
            parallelism: Parallelism::Parallel,
        }
        .probabilities(&w.source.query, &classes)
        .unwrap()
    };
    let adapted = score(&out.state.meta);
    let plain = score(&zero);
    let gt = |p: &[Vec<f64>]| -> f64 {
        p.iter().zip(&w.source.query_labels).map(|(r, &l)| r[l]).sum::<f64>() / p.len() as f64
    };
    assert!(gt(&adapted) > gt(&plain), "{} vs {}", gt(&adapted), gt(&plain));
}
