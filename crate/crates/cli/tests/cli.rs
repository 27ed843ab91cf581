use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn tagmt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tagmt"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = tagmt(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const TINY: &str = r#"
[experiment]
epochs = 2
batch_size_sentences = 16
eval_every_steps = 5
monitor_sentences = 2

[experiment.bt]
start_epoch = 2
num_bt = [4]
max_new_tokens = 8

[experiment.model]
d_model = 16
n_heads = 2
n_enc_layers = 1
n_dec_layers = 1
d_ff = 32
max_positions = 24
"#;

/// synth → tokenizer → train, all inside `dir`.
fn pipeline(dir: &Path) {
    let data = dir.join("data");
    ok(&[
        "synth",
        "generate",
        "--langs",
        "sy1,sy2,sy3",
        "--low-resource",
        "sy3",
        "--n-parallel",
        "40",
        "--n-dev",
        "4",
        "--n-test",
        "6",
        "--n-mono",
        "20",
        "--concepts",
        "20",
        "--seed",
        "3",
        "--out",
        p(&data),
    ]);
    ok(&[
        "tokenizer",
        "train",
        "--data",
        p(&data),
        "--vocab-size",
        "320",
        "--out",
        p(&data.join("tokenizer.txt")),
    ]);
    let cfg = dir.join("tiny.toml");
    fs::write(&cfg, TINY).unwrap();
    ok(&[
        "train",
        "--config",
        p(&cfg),
        "--data",
        p(&data),
        "--setting",
        "btrec",
        "--seed",
        "3",
        "--out",
        p(&dir.join("run")),
    ]);
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let out = tagmt(&["train", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error[usage]"));
}

#[test]
fn missing_input_is_a_usage_error() {
    let out = tagmt(&["data", "stats", "--data", "/definitely/not/here"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unknown_config_key_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    fs::write(&cfg, "[experiment]\nepochz = 3\n").unwrap();
    let out = tagmt(&[
        "train",
        "--dry-run",
        "--langs",
        "sy1,sy2",
        "--config",
        p(&cfg),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("experiment.epochz"));
}

#[test]
fn dry_run_shows_derived_values() {
    let out = ok(&[
        "train",
        "--dry-run",
        "--preset",
        "paper-baseline",
        "--setting",
        "btrec",
        "--langs",
        "eng,fra,ibo,fon",
    ]);
    let v: Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v["derived"]["effective_batch_sentences"], 256);
    assert_eq!(v["derived"]["bt_rec_ratio"], "500:50");
    assert_eq!(v["derived"]["directions"], 10);
    assert_eq!(v["experiment"]["optimizer"]["lr"], 5e-4);
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    fs::write(
        &cfg,
        "preset = \"desk\"\n[experiment]\nepochs = 7\nbatch_size_sentences = 8\n",
    )
    .unwrap();
    let out = ok(&[
        "train",
        "--dry-run",
        "--langs",
        "sy1,sy2",
        "--config",
        p(&cfg),
        "--epochs",
        "2",
    ]);
    let v: Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v["experiment"]["epochs"], 2);
    assert_eq!(v["experiment"]["batch_size_sentences"], 8);
    assert_eq!(v["preset"], "desk");
}

#[test]
fn end_to_end_and_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    pipeline(a.path());
    pipeline(b.path());

    for f in [
        "data/parallel.jsonl",
        "data/mono.jsonl",
        "data/truth.json",
        "data/tokenizer.txt",
        "run/best.ckpt",
    ] {
        let x = fs::read(a.path().join(f)).unwrap();
        let y = fs::read(b.path().join(f)).unwrap();
        assert!(x == y, "{f} differs between identical runs");
    }

    let run = a.path().join("run");
    let data = a.path().join("data");
    let eval = a.path().join("eval");
    ok(&[
        "evaluate",
        "--model",
        p(&run),
        "--test",
        p(&data),
        "--direction",
        "sy1-sy3",
        "--out",
        p(&eval),
    ]);
    let report: Value =
        serde_json::from_str(&fs::read_to_string(eval.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["report"]["test_size"], 6);
    assert!(report["off_target"].is_number());
    assert_eq!(
        fs::read_to_string(eval.join("hypotheses.txt"))
            .unwrap()
            .lines()
            .count(),
        6
    );

    let input = a.path().join("in.txt");
    fs::write(&input, "<sy2> hello\n").unwrap();
    let translated = ok(&["translate", "--model", p(&run), "--input", p(&input)]);
    assert_eq!(translated.lines().count(), 1);

    let rep = a.path().join("report");
    ok(&[
        "report",
        "--eval",
        p(&eval.join("report.json")),
        "--out",
        p(&rep),
    ]);
    let svg = fs::read_to_string(rep.join("eval_chart.svg")).unwrap();
    assert!(svg.starts_with("<svg"));
    assert!(fs::read_to_string(rep.join("eval_table.txt"))
        .unwrap()
        .contains("sy1-sy3"));

    let manifest: Value =
        serde_json::from_str(&fs::read_to_string(run.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 3);
    assert!(manifest["artifacts"]["best.ckpt"].is_string());
}

#[test]
fn wrong_tokenizer_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    pipeline(dir.path());
    let data = dir.path().join("data");
    let other = dir.path().join("other.txt");
    ok(&[
        "tokenizer",
        "train",
        "--data",
        p(&data),
        "--vocab-size",
        "300",
        "--out",
        p(&other),
    ]);
    let input = dir.path().join("in.txt");
    fs::write(&input, "<sy2> hello\n").unwrap();
    let out = tagmt(&[
        "translate",
        "--model",
        p(&dir.path().join("run")),
        "--tokenizer",
        p(&other),
        "--input",
        p(&input),
    ]);
    assert_eq!(out.status.code(), Some(2));
}
