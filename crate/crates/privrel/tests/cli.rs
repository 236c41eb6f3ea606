//! End-to-end runs of the binary on a tiny configuration.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use privrel::{RunConfigFile, RESOLVED_CONFIG};

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_privrel"));
    cmd.env("RUST_LOG", "warn");
    cmd
}

fn tiny_config() -> RunConfigFile {
    let mut cfg = RunConfigFile::default();
    cfg.data.synthetic.houses = 5;
    cfg.data.synthetic.days_per_house = 12;
    cfg.model.releaser = vec![4];
    cfg.model.attacker = vec![3];
    cfg.model.test_attacker = vec![3];
    cfg.train.batch_size = 8;
    cfg.train.attacker_steps = 2;
    cfg.train.iterations = 3;
    cfg.train.test_attacker_epochs = 2;
    cfg.oracle.specs = 20;
    cfg
}

fn write_config(dir: &Path, cfg: &RunConfigFile) -> PathBuf {
    let path = dir.join("config.json");
    fs::write(&path, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    path
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn ok(args: &[&str]) {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gen_data_is_reproducible_and_reloads() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &tiny_config());
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    ok(&["gen-data", "--config", s(&config), "--out", s(&a)]);
    ok(&["gen-data", "--config", s(&config), "--out", s(&b)]);
    let bytes = fs::read(a.join("data.csv")).unwrap();
    assert_eq!(bytes, fs::read(b.join("data.csv")).unwrap());
    let loaded = privrel_core::data::load_csv(&a.join("data.csv")).unwrap();
    let generated = privrel_core::data::generate(&tiny_config().data.synthetic).unwrap();
    assert_eq!(loaded, generated);

    let c = dir.path().join("c");
    ok(&["gen-data", "--config", s(&config), "--out", s(&c), "--seed", "8"]);
    assert_ne!(bytes, fs::read(c.join("data.csv")).unwrap());
    let resolved = RunConfigFile::load(&c.join(RESOLVED_CONFIG)).unwrap();
    assert_eq!(resolved.data.synthetic.seed, 8);
}

#[test]
fn invalid_probability_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config();
    cfg.data.synthetic.arrive_prob = 1.5;
    let config = write_config(dir.path(), &cfg);
    let out = run(&["gen-data", "--config", s(&config), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.starts_with("error[config]:"), "{err}");
    assert!(err.contains("arrive_prob"), "{err}");
}

#[test]
fn unknown_keys_are_schema_errors() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("config.json");
    fs::write(&config, r#"{"train": {"iterations": 3, "lamda": 1}}"#).unwrap();
    let out = run(&["train", "--config", s(&config), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error[schema]:"));
}

#[test]
fn missing_checkpoint_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &tiny_config());
    let out = run(&[
        "attack",
        "--config",
        s(&config),
        "--out",
        s(dir.path()),
        "--checkpoint",
        "/nonexistent/releaser.json",
    ]);
    assert_eq!(out.status.code(), Some(6));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error[io]:"));
}

#[test]
fn commands_needing_a_checkpoint_say_so() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &tiny_config());
    let out = run(&["indicators", "--config", s(&config), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error[usage]:"));
}

#[test]
fn train_rerun_from_resolved_config_is_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &tiny_config());
    let first = dir.path().join("first");
    let second = dir.path().join("second");
    ok(&["train", "--config", s(&config), "--out", s(&first), "--seed", "11"]);
    ok(&["train", "--config", s(&first.join(RESOLVED_CONFIG)), "--out", s(&second)]);
    for name in ["releaser.json", "attacker.json", "history.csv", RESOLVED_CONFIG] {
        assert_eq!(
            fs::read(first.join(name)).unwrap(),
            fs::read(second.join(name)).unwrap(),
            "{name} differs"
        );
    }
}

#[test]
fn downstream_commands_consume_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config();
    cfg.eval.indicators = true;
    cfg.eval.welch.signals = 3;
    let config = write_config(dir.path(), &cfg);
    let train = dir.path().join("train");
    ok(&["train", "--config", s(&config), "--out", s(&train)]);
    let ckpt = train.join("releaser.json");

    let attack = dir.path().join("attack");
    ok(&["attack", "--config", s(&config), "--out", s(&attack), "--checkpoint", s(&ckpt)]);
    assert!(attack.join("test_attacker.json").exists());

    let eval = dir.path().join("eval");
    ok(&[
        "eval",
        "--config",
        s(&config),
        "--out",
        s(&eval),
        "--checkpoint",
        s(&ckpt),
        "--attacker",
        s(&attack.join("test_attacker.json")),
    ]);
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(eval.join("eval.json")).unwrap()).unwrap();
    let acc = summary["balanced_accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
    assert_eq!(summary["indicator_errors_pct"].as_array().unwrap().len(), 5);

    let psd = dir.path().join("psd");
    ok(&[
        "psd", "--config", s(&config), "--out", s(&psd), "--checkpoint", s(&ckpt), "--checkpoint", s(&ckpt),
    ]);
    let text = fs::read_to_string(psd.join("psd.csv")).unwrap();
    assert!(text.lines().count() > 1);

    let ind = dir.path().join("ind");
    ok(&["indicators", "--config", s(&config), "--out", s(&ind), "--checkpoint", s(&ckpt)]);
    let text = fs::read_to_string(ind.join("indicators.csv")).unwrap();
    assert_eq!(text.lines().count(), 6);
}

#[test]
fn architecture_mismatch_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &tiny_config());
    let train = dir.path().join("train");
    ok(&["train", "--config", s(&config), "--out", s(&train)]);
    let mut other = tiny_config();
    other.model.releaser = vec![5];
    let other_path = dir.path().join("other.json");
    fs::write(&other_path, serde_json::to_string(&other).unwrap()).unwrap();
    let out = run(&[
        "eval",
        "--config",
        s(&other_path),
        "--out",
        s(&dir.path().join("eval")),
        "--checkpoint",
        s(&train.join("releaser.json")),
    ]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn sweep_writes_one_row_per_lambda() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config();
    cfg.train.iterations = 1;
    cfg.train.test_attacker_epochs = 1;
    let config = write_config(dir.path(), &cfg);
    let out = dir.path().join("sweep");
    ok(&["sweep", "--config", s(&config), "--out", s(&out), "--lambda-grid", "8,0,0.5,1,2,4"]);
    let text = fs::read_to_string(out.join("tradeoff.csv")).unwrap();
    let lambdas: Vec<f64> = text
        .lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap().parse().unwrap())
        .collect();
    assert_eq!(lambdas, vec![0.0, 0.5, 1.0, 2.0, 4.0, 8.0]);
    let header = text.lines().next().unwrap();
    assert!(header.starts_with("lambda,ne2,ne4,accuracy"), "{header}");
    let checkpoints = fs::read_dir(&out)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().starts_with("releaser_lambda_"))
        .count();
    assert_eq!(checkpoints, 6);
}

#[test]
fn mismatch_writes_every_scenario() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config();
    cfg.train.iterations = 1;
    cfg.train.test_attacker_epochs = 1;
    // Enough days that a single house still has validation days.
    cfg.data.synthetic.days_per_house = 40;
    let config = write_config(dir.path(), &cfg);
    let out = dir.path().join("mismatch");
    ok(&["mismatch", "--config", s(&config), "--out", s(&out), "--lambda-grid", "0,1"]);
    let text = fs::read_to_string(out.join("mismatch.csv")).unwrap();
    assert_eq!(text.lines().count(), 1 + 3 * 2);
}

#[test]
fn oracle_verify_writes_non_negative_chain_slacks() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("oracle");
    ok(&["oracle-verify", "--out", s(&out), "--specs", "200", "--seed", "3"]);
    let mut rdr = csv::Reader::from_path(out.join("oracle.csv")).unwrap();
    let headers = rdr.headers().unwrap().clone();
    let col = |name: &str| headers.iter().position(|h| h == name).unwrap();
    let (cond, ceil, label) = (col("conditioning_slack"), col("ceiling_slack"), col("label_slack"));
    let mut rows = 0;
    for record in rdr.records() {
        let r = record.unwrap();
        for c in [cond, ceil, label] {
            assert!(r[c].parse::<f64>().unwrap() >= -1e-9);
        }
        rows += 1;
    }
    assert_eq!(rows, 200);
    let resolved = RunConfigFile::load(&out.join(RESOLVED_CONFIG)).unwrap();
    assert_eq!((resolved.oracle.specs, resolved.oracle.seed), (200, 3));
}
