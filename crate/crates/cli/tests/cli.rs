use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = "\
# four source classes, one two-class target
dim = 16
heads = 2
classes = 4
shots = 4
queries = 6
num_words = 4
target_datasets = 1
target_classes = 2
seeds = 2
steps = 20
";

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../core/tests/fixtures")
        .join(name)
}

fn coapt(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_coapt"))
        .args(args)
        .arg("--out")
        .arg(dir.join("out"))
        .env("RUST_LOG", "error")
        .output()
        .unwrap()
}

fn with_config(text: &str) -> (tempfile::TempDir, String) {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.cfg");
    std::fs::write(&path, text).unwrap();
    let p = path.to_str().unwrap().to_owned();
    (dir, p)
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn vocab_validate_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let pets = fixture("pets.json");
    let ok = coapt(
        &[
            "vocab-validate",
            "--vocab",
            pets.to_str().unwrap(),
            "--expect-sets",
            "3",
        ],
        dir.path(),
    );
    assert_eq!(ok.status.code(), Some(0), "{}", stderr(&ok));
    assert!(String::from_utf8_lossy(&ok.stdout).contains("4 classes, 3 sets of 4 words"));

    let words = coapt(
        &[
            "vocab-validate",
            "--vocab",
            pets.to_str().unwrap(),
            "--expect-words",
            "8",
        ],
        dir.path(),
    );
    assert_eq!(words.status.code(), Some(2));

    let missing = fixture("missing_set.json");
    let bad = coapt(&["vocab-validate", "--vocab", missing.to_str().unwrap()], dir.path());
    assert_eq!(bad.status.code(), Some(2));
    assert!(stderr(&bad).contains("goldfish"));
}

#[test]
fn base_novel_writes_json_and_csv() {
    let (dir, cfg) = with_config(TINY);
    let o = coapt(
        &["eval-base-novel", "--config", &cfg, "--seed", "3", "--k-ensemble", "2"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = dir.path().join("out");
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("base_novel.json")).unwrap()).unwrap();
    assert_eq!(json["per_seed"].as_array().unwrap().len(), 2);
    assert_eq!(json["config"]["seed"], "3");
    assert_eq!(json["config"]["ensemble_k"], "2");
    let csv = std::fs::read_to_string(out.join("base_novel.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "seed,base,novel,hm");
    assert_eq!(lines.len(), 4);
    assert!(lines[3].starts_with("mean,"));
}

#[test]
fn cross_dataset_takes_vocab_files() {
    let (dir, cfg) = with_config(TINY);
    let (pets, vehicles) = (fixture("pets.json"), fixture("vehicles.json"));
    let o = coapt(
        &[
            "eval-cross",
            "--config",
            &cfg,
            "--vocab",
            pets.to_str().unwrap(),
            "--vocab",
            vehicles.to_str().unwrap(),
            "--num-attrs",
            "3",
        ],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = std::fs::read_to_string(dir.path().join("out/cross.csv")).unwrap();
    assert!(csv.lines().nth(1).unwrap().starts_with("pets,"));
    assert!(csv.lines().nth(2).unwrap().starts_with("vehicles,"));
}

#[test]
fn train_writes_checkpoint_and_diverges_with_code_3() {
    let (dir, cfg) = with_config(TINY);
    let o = coapt(&["train", "--config", &cfg], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = dir.path().join("out");
    let bytes = std::fs::read(out.join("checkpoint.bin")).unwrap();
    let (state, text) = coapt::classifier::parse_checkpoint(&bytes, None).unwrap();
    assert_eq!(state.step, 20);
    assert!(text.contains("steps = 20"));
    assert_eq!(
        std::fs::read_to_string(out.join("losses.csv")).unwrap().lines().count(),
        21
    );

    let (dir, cfg) = with_config(&format!("{TINY}lr = 1e308\n"));
    let o = coapt(&["train", "--config", &cfg], dir.path());
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    let bytes = std::fs::read(dir.path().join("out/last_good.ckpt")).unwrap();
    assert!(coapt::classifier::parse_checkpoint(&bytes, None).is_ok());
}

#[test]
fn validation_errors_exit_with_2() {
    let (dir, cfg) = with_config("dim = 16\nheads = 3\n");
    assert_eq!(coapt(&["train", "--config", &cfg], dir.path()).status.code(), Some(2));
    let (dir, cfg) = with_config("no equals sign\n");
    let o = coapt(&["train", "--config", &cfg], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 1"), "{}", stderr(&o));

    let (dir, cfg) = with_config(&format!("{TINY}ctx_len = 16\nconcept_rows = 2\n"));
    let o = coapt(&["sweep-attrs", "--config", &cfg, "--counts", "2,4,12"], dir.path());
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("12"));
}

#[test]
fn gradcheck_passes_on_a_small_model() {
    let (dir, cfg) = with_config(
        "dim = 8\nheads = 2\nclasses = 3\nshots = 2\nqueries = 1\nnum_words = 2\ntarget_datasets = 0\nbatch_size = 3\n",
    );
    let o = coapt(&["gradcheck", "--config", &cfg], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("max relative error"));
}
