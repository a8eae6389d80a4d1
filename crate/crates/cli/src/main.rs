use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use coapt::attr_vocab::{load_vocab, AttributeVocab, VocabError};
use coapt::autodiff::Tensor;
use coapt::classifier::{pipeline_gradient_check, save_checkpoint, ClassifierError, TrainState};
use coapt::encoders::{load_embedding_export, EmbeddingExport};
use coapt::eval::{
    evaluate, initial_trainables, run_base_to_novel, run_cross_dataset, run_domain_generalization,
    sweep_attribute_count, sweep_csv, train_on_dataset, EvalError, MetricsReport, RunConfig, ToyWorld, TransferReport,
};
use coapt::rng::{rng_for, stream};
use rand_distr::{Distribution, Normal};

#[derive(Parser)]
#[command(
    name = "coapt",
    version,
    about = "Attribute-augmented prompt tuning experiments on toy worlds"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// `key = value` run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Attribute words per query.
    #[arg(long, global = true)]
    num_attrs: Option<usize>,
    /// Attribute sets averaged at novel-class inference.
    #[arg(long, global = true)]
    k_ensemble: Option<usize>,
    /// Attribute vocabulary JSON; the first file is the source dataset,
    /// later files are targets.
    #[arg(long, global = true)]
    vocab: Vec<PathBuf>,
    /// Token-embedding export (COAPTEMB) overriding toy token rows.
    #[arg(long, global = true)]
    embeddings: Option<PathBuf>,
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Train on all source classes and save a checkpoint.
    Train,
    /// Base-to-novel generalization.
    EvalBaseNovel,
    /// Source-trained prompts on the target datasets.
    EvalCross,
    /// Source-trained prompts under domain shift.
    EvalDomain,
    /// Base-to-novel results per attribute-word count.
    SweepAttrs {
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,4,8")]
        counts: Vec<usize>,
    },
    /// Finite-difference check of the training loss gradients.
    Gradcheck {
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
    /// Validate attribute vocabulary files.
    VocabValidate {
        #[arg(long)]
        expect_sets: Option<usize>,
        #[arg(long)]
        expect_words: Option<usize>,
    },
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("{0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("gradient check failed: max relative error {0:.3e}")]
    GradCheck(f64),
}

impl From<VocabError> for CliError {
    fn from(e: VocabError) -> Self {
        CliError::Eval(e.into())
    }
}

impl From<ClassifierError> for CliError {
    fn from(e: ClassifierError) -> Self {
        CliError::Eval(e.into())
    }
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|source| CliError::File {
        path: path.to_owned(),
        source,
    })
}

fn run_config(c: &Common) -> Result<RunConfig, CliError> {
    let mut cfg = match &c.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|source| CliError::File {
                path: p.clone(),
                source,
            })?;
            RunConfig::parse(&text)?
        }
        None => RunConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(n) = c.num_attrs {
        cfg.num_attrs = Some(n);
    }
    if let Some(k) = c.k_ensemble {
        cfg.classifier.ensemble_k = k;
    }
    if !c.vocab.is_empty() {
        cfg.world.target_datasets = c.vocab.len() - 1;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn vocabularies(c: &Common) -> Result<Vec<AttributeVocab>, CliError> {
    c.vocab.iter().map(|p| Ok(load_vocab(p)?.0)).collect()
}

fn embeddings(c: &Common, dim: usize) -> Result<Option<EmbeddingExport>, CliError> {
    c.embeddings
        .as_ref()
        .map(|p| load_embedding_export(p, Some(dim)).map_err(|e| CliError::Eval(e.into())))
        .transpose()
}

fn world(c: &Common, cfg: &RunConfig) -> Result<ToyWorld, CliError> {
    let vocabs = vocabularies(c)?;
    let tokens = embeddings(c, cfg.encoder.dim)?;
    Ok(ToyWorld::generate_with(cfg, cfg.seed, &vocabs, tokens.as_ref())?)
}

fn base_novel_csv(r: &MetricsReport) -> String {
    let mut s = String::from("seed,base,novel,hm\n");
    for p in &r.per_seed {
        let _ = writeln!(s, "{},{:.4},{:.4},{:.4}", p.seed, p.base.overall, p.novel.overall, p.hm);
    }
    let _ = writeln!(s, "mean,{:.4},{:.4},{:.4}", r.base, r.novel, r.hm);
    s
}

fn transfer_csv(r: &TransferReport) -> String {
    let mut s = String::from("dataset,domain_shift,accuracy\n");
    for d in &r.datasets {
        let _ = writeln!(s, "{},{},{:.4}", d.name, d.domain_shift, d.accuracy);
    }
    let _ = writeln!(s, "target_average,,{:.4}", r.target_average);
    s
}

fn to_json<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("reports serialize") + "\n"
}

fn cmd_train(c: &Common, cfg: &RunConfig) -> Result<(), CliError> {
    let w = world(c, cfg)?;
    let out = train_on_dataset(cfg, &w, &w.source, cfg.seed)?;
    let acc = evaluate(cfg, &w, &out.state, &w.source, false)?;
    save_checkpoint(&out.state, &cfg.to_text(), &c.out.join("checkpoint.bin"))?;
    let mut losses = String::from("step,loss\n");
    for (i, l) in out.losses.iter().enumerate() {
        let _ = writeln!(losses, "{i},{l}");
    }
    write_file(&c.out.join("losses.csv"), &losses)?;
    let report = serde_json::json!({
        "dataset": w.source.name,
        "seed": cfg.seed,
        "steps": out.state.step,
        "final_loss": out.losses.last(),
        "query_accuracy": acc,
    });
    write_file(&c.out.join("train.json"), &to_json(&report))?;
    println!(
        "trained {} steps on {}: final loss {:.4}, query accuracy {:.2}%",
        out.state.step,
        w.source.name,
        out.losses.last().copied().unwrap_or(f64::NAN),
        acc.overall
    );
    Ok(())
}

fn cmd_base_novel(c: &Common, cfg: &RunConfig) -> Result<(), CliError> {
    let vocabs = vocabularies(c)?;
    let r = if c.embeddings.is_some() {
        coapt::eval::run_base_to_novel_in(cfg, &world(c, cfg)?)?
    } else {
        run_base_to_novel(cfg, &vocabs)?
    };
    write_file(&c.out.join("base_novel.json"), &to_json(&r))?;
    write_file(&c.out.join("base_novel.csv"), &base_novel_csv(&r))?;
    println!("base {:.2}  novel {:.2}  hm {:.2}", r.base, r.novel, r.hm);
    Ok(())
}

fn cmd_transfer(c: &Common, cfg: &RunConfig, domain: bool) -> Result<(), CliError> {
    if c.embeddings.is_some() {
        return Err(CliError::Invalid(
            "--embeddings is supported by train, eval-base-novel and gradcheck".into(),
        ));
    }
    let vocabs = vocabularies(c)?;
    let (r, stem) = if domain {
        (run_domain_generalization(cfg, &vocabs)?, "domain")
    } else {
        (run_cross_dataset(cfg, &vocabs)?, "cross")
    };
    write_file(&c.out.join(format!("{stem}.json")), &to_json(&r))?;
    write_file(&c.out.join(format!("{stem}.csv")), &transfer_csv(&r))?;
    for d in &r.datasets {
        println!("{:<24} {:>8.2}", d.name, d.accuracy);
    }
    println!("{:<24} {:>8.2}", "target average", r.target_average);
    Ok(())
}

fn cmd_sweep(c: &Common, cfg: &RunConfig, counts: &[usize]) -> Result<(), CliError> {
    if c.embeddings.is_some() {
        return Err(CliError::Invalid("--embeddings is not supported by sweep-attrs".into()));
    }
    let mut cfg = cfg.clone();
    cfg.num_attrs = None;
    if let Some(&max) = counts.iter().max() {
        cfg.world.num_words = cfg.world.num_words.max(max);
    }
    let rows = sweep_attribute_count(&cfg, counts, &vocabularies(c)?)?;
    let csv = sweep_csv(&rows);
    write_file(&c.out.join("sweep.csv"), &csv)?;
    write_file(&c.out.join("sweep.json"), &to_json(&rows))?;
    print!("{csv}");
    Ok(())
}

fn cmd_gradcheck(c: &Common, cfg: &RunConfig, step: f64, tolerance: f64) -> Result<(), CliError> {
    let w = world(c, cfg)?;
    let (bank, mut meta) = initial_trainables(cfg, cfg.seed, &w.backbone)?;
    let mut rng = rng_for(cfg.seed, stream::META_NET);
    let normal = Normal::new(0.0, 1.0 / (meta.hidden() as f64).sqrt()).expect("finite std");
    meta.w2 = Tensor::matrix(
        meta.hidden(),
        meta.out_dim(),
        (0..meta.hidden() * meta.out_dim())
            .map(|_| normal.sample(&mut rng))
            .collect(),
    );
    let state = TrainState::new(bank, meta, cfg.seed);
    let classes = w.class_queries(&w.source, 0, cfg.attrs_used())?;
    let n = cfg.train.batch_size.min(w.source.support.len());
    let ds = &w.source;
    let rep = pipeline_gradient_check(
        &state,
        &w.backbone,
        &cfg.classifier,
        &classes,
        &ds.support[..n],
        &ds.support_labels[..n],
        step,
        cfg.parallelism,
    )?;
    println!(
        "{} coordinates, max relative error {:.3e} (tolerance {tolerance:e})",
        rep.coordinates, rep.max_rel_error
    );
    if rep.max_rel_error > tolerance {
        return Err(CliError::GradCheck(rep.max_rel_error));
    }
    Ok(())
}

fn cmd_vocab_validate(c: &Common, sets: Option<usize>, words: Option<usize>) -> Result<(), CliError> {
    if c.vocab.is_empty() {
        return Err(CliError::Invalid("pass at least one --vocab file".into()));
    }
    for p in &c.vocab {
        let (v, warnings) = load_vocab(p)?;
        if let Some(k) = sets {
            if v.num_sets != k {
                return Err(CliError::Invalid(format!(
                    "{}: {} sets, expected {k}",
                    p.display(),
                    v.num_sets
                )));
            }
        }
        if let Some(n) = words {
            for (class, class_sets) in &v.classes {
                if let Some((k, s)) = class_sets.iter().enumerate().find(|(_, s)| s.len() != n) {
                    return Err(CliError::Invalid(format!(
                        "{}: class {class:?} set {k} has {} words, expected {n}",
                        p.display(),
                        s.len()
                    )));
                }
            }
        }
        println!(
            "{}: ok ({} classes, {} sets of {} words, {} warnings)",
            p.display(),
            v.classes.len(),
            v.num_sets,
            v.num_words,
            warnings.len()
        );
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let c = &cli.common;
    if let Command::VocabValidate {
        expect_sets,
        expect_words,
    } = cli.command
    {
        return cmd_vocab_validate(c, expect_sets, expect_words);
    }
    let cfg = run_config(c)?;
    fs::create_dir_all(&c.out).map_err(|source| CliError::File {
        path: c.out.clone(),
        source,
    })?;
    match &cli.command {
        Command::Train => cmd_train(c, &cfg),
        Command::EvalBaseNovel => cmd_base_novel(c, &cfg),
        Command::EvalCross => cmd_transfer(c, &cfg, false),
        Command::EvalDomain => cmd_transfer(c, &cfg, true),
        Command::SweepAttrs { counts } => cmd_sweep(c, &cfg, counts),
        Command::Gradcheck { step, tolerance } => cmd_gradcheck(c, &cfg, *step, *tolerance),
        Command::VocabValidate { .. } => unreachable!("handled above"),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                CliError::Eval(EvalError::Classifier(ClassifierError::Divergence { last_good, .. })) => {
                    let path = cli.common.out.join("last_good.ckpt");
                    let cfg = run_config(&cli.common).map(|c| c.to_text()).unwrap_or_default();
                    match save_checkpoint(&last_good, &cfg, &path) {
                        Ok(()) => eprintln!("last good state written to {}", path.display()),
                        Err(e) => eprintln!("could not write {}: {e}", path.display()),
                    }
                    ExitCode::from(3)
                }
                CliError::GradCheck(_) => ExitCode::from(1),
                CliError::File { .. } | CliError::Eval(EvalError::Io(_)) => ExitCode::from(1),
                _ => ExitCode::from(2),
            }
        }
    }
}
