use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = r#"{
    "seed": 5,
    "suite": {"num_languages": 3, "concept_vocab_size": 8},
    "data": {"train_sentences": 16, "test_sentences": 4, "multiway_sentences": 5, "len_min": 2, "len_max": 4},
    "model": {"d_model": 8, "n_heads": 2, "n_layers": 1, "d_ff": 16, "max_seq_len": 32},
    "train": {"mode": "xconst", "epochs": 1, "batch_size": 8, "strategy_mode": {"fixed": "t-enc"}},
    "decode": {"method": "greedy"},
    "sweep": {"alphas": [0.0, 0.1]}
}"#;

fn xconst(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_xconst")).args(args).output().expect("binary runs")
}

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("config.json");
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gen_data_writes_splits() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), CONFIG);
    let out = dir.path().join("data");
    let o = xconst(&["gen-data", "--config", &cfg, "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["suite.json", "train.tsv", "test.tsv", "multiway.txt", "config.json"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    assert_eq!(fs::read_to_string(out.join("multiway.txt")).unwrap().lines().count(), 5);
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &CONFIG.replace("\"seed\": 5", "\"seed\": 5, \"sede\": 1"));
    let o = xconst(&["train", "--config", &cfg, "--out", s(&dir.path().join("r"))]);
    assert_eq!(o.status.code(), Some(2));
    let o = xconst(&["train", "--config", s(&dir.path().join("missing.json")), "--out", s(&dir.path().join("r"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn train_evaluate_analyze_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), CONFIG);
    let run = dir.path().join("run");
    let ckpt = run.join("model.ckpt");
    assert!(xconst(&["train", "--config", &cfg, "--out", s(&run)]).status.success());
    assert!(xconst(&["evaluate", "--config", &cfg, "--out", s(&run), "--checkpoint", s(&ckpt)]).status.success());
    let o = xconst(&["analyze", "--config", &cfg, "--out", s(&run), "--checkpoint", s(&ckpt)]);
    assert!(String::from_utf8_lossy(&o.stdout).starts_with("alignment_score "));

    let rep = dir.path().join("rep");
    let o = xconst(&["report", "--out", s(&rep), s(&run)]);
    assert!(o.status.success());
    let first = fs::read_to_string(rep.join("report.md")).unwrap();
    assert!(first.contains("| t-enc | full | xconst α=0.1 |"));
    xconst(&["report", "--out", s(&rep), s(&run)]);
    assert_eq!(fs::read_to_string(rep.join("report.md")).unwrap(), first);

    let o = xconst(&["report", "--out", s(&rep), s(&run), s(&dir.path().join("bogus"))]);
    assert_eq!(o.status.code(), Some(3));
    assert_eq!(fs::read_to_string(rep.join("report.md")).unwrap(), first);
}

#[test]
fn seed_flag_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), CONFIG);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    xconst(&["gen-data", "--config", &cfg, "--out", s(&a)]);
    xconst(&["gen-data", "--config", &cfg, "--out", s(&b), "--seed", "6"]);
    let read = |d: &Path| fs::read_to_string(d.join("train.tsv")).unwrap();
    assert_ne!(read(&a), read(&b));
    assert!(fs::read_to_string(b.join("config.json")).unwrap().contains("\"seed\": 6"));
}

#[test]
fn sweep_writes_combined_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), CONFIG);
    let out = dir.path().join("sweep");
    let o = xconst(&["sweep", "--config", &cfg, "--out", s(&out), "--parallel", "2"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 * 3);
    assert!(out.join("report.md").exists());
}
