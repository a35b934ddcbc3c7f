use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "\
model.enc_layers=2
model.dec_layers=2
model.d_model=8
model.heads=2
model.d_ff=16
task.symbols=6
task.size=60
task.min_len=2
task.max_len=5
train.steps=20
train.batch_size=4
train.warmup=5
train.checkpoint_every=5
train.keep_last=2
decode.max_len=8
selector.layers=1
selector.heads=2
selector.d_ff=8
selector.epochs=2
";

fn tiedmulti(dir: &Path, args: &[&str]) -> Output {
    let cfg = dir.join("tiny.cfg");
    if !cfg.exists() {
        std::fs::write(&cfg, TINY).unwrap();
    }
    Command::new(env!("CARGO_BIN_EXE_tiedmulti"))
        .current_dir(dir)
        .args(args)
        .args(["--config", "tiny.cfg", "--seed", "3"])
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = tiedmulti(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn read(dir: &Path, name: &str) -> String {
    std::fs::read_to_string(dir.join(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

#[test]
fn full_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    assert!(ok(d, &["gen-data", "--out", "data"]).contains("train=54 test=6"));
    ok(d, &["train", "--data", "data/train.tsv", "--out", "run"]);
    assert_eq!(read(d, "run/train.log").lines().count(), 20);
    assert!(d.join("run/checkpoints/step-000020.ckpt").exists());
    assert!(!d.join("run/checkpoints/step-000010.ckpt").exists());

    let out = ok(d, &["decode", "--model", "run/model.ckpt", "--data", "data/test.tsv", "--combo", "1,2", "--out", "dec"]);
    assert!(out.contains("combo=(1,2) sentences=6"));
    assert_eq!(read(d, "dec/decode.log").lines().count(), 6);
    assert!(ok(d, &["evaluate", "--model", "run/model.ckpt", "--data", "data/test.tsv", "--mode", "beam"]).contains("combo=(2,2)"));

    ok(d, &["cost-benefit", "--model", "run/model.ckpt", "--data", "data/test.tsv", "--out", "cb"]);
    assert_eq!(read(d, "cb/cost_benefit.csv").lines().count(), 5);
    assert_eq!(read(d, "cb/decode-greedy.log").lines().count(), 24);
    assert!(read(d, "cb/cost_benefit.json").contains("\"train.steps\": \"20\""));

    ok(d, &["oracle", "--logs", "cb/decode-greedy.log", "--data", "data/test.tsv", "--out", "or"]);
    assert!(read(d, "or/grid.tsv").starts_with("#grid N=2 M=2"));
    assert!(read(d, "or/oracle.txt").contains("total 6"));

    ok(d, &["report", "--logs", "cb/decode-greedy.log", "--data", "data/test.tsv", "--grid", "or/grid.tsv", "--out", "rep"]);
    let with_grid = read(d, "rep/report.txt");
    assert!(!with_grid.contains("sec"));
    ok(d, &["report", "--logs", "cb/decode-greedy.log", "--data", "data/test.tsv", "--out", "rep2"]);
    assert_eq!(read(d, "rep2/report.txt"), with_grid);

    ok(d, &["build-selector-data", "--model", "run/model.ckpt", "--data", "data/test.tsv", "--out", "sel"]);
    assert!(read(d, "sel/selector_data.tsv").starts_with("#selector N=2 M=2"));
    ok(d, &["train-selector", "--model", "run/model.ckpt", "--dataset", "sel/selector_data.tsv", "--out", "sel"]);
    assert_eq!(read(d, "sel/selector.log").lines().count(), 2);
    let out = ok(d, &["select-decode", "--model", "run/model.ckpt", "--selector", "sel/selector.ckpt", "--data", "data/test.tsv", "--out", "sel"]);
    assert!(out.starts_with("bleu="));

    ok(d, &["distill", "--model", "run/model.ckpt", "--data", "data/train.tsv", "--test", "data/test.tsv", "--child", "tied-rs", "--out", "dist"]);
    let report = read(d, "dist/distill.txt");
    assert!(report.contains("pseudo-parallel pairs=54"));
    assert_eq!(report.matches("child=tied-rs").count(), 2);
    assert_eq!(read(d, "dist/pseudo.tsv").lines().count(), 54);

    let sizes = ok(d, &["sizes", "--paper"]);
    assert!(sizes.contains("36 vanilla models"));
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    assert_eq!(tiedmulti(d, &["no-such-command"]).status.code(), Some(1));
    assert_eq!(tiedmulti(d, &["sizes", "--mode", "sideways"]).status.code(), Some(1));
    std::fs::write(d.join("bad.cfg"), "train.steps=oops\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_tiedmulti")).current_dir(d).args(["sizes", "--config", "bad.cfg"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("train.steps"));
    let missing = tiedmulti(d, &["train", "--data", "missing.tsv"]);
    assert_eq!(missing.status.code(), Some(2));
    assert_eq!(tiedmulti(d, &["--help"]).status.code(), Some(0));
}

#[test]
fn runs_with_one_seed_are_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    for run in ["a", "b"] {
        ok(d, &["gen-data", "--out", run]);
        let data = format!("{run}/train.tsv");
        ok(d, &["train", "--data", &data, "--out", run]);
    }
    for f in ["train.tsv", "test.tsv", "train.log"] {
        assert_eq!(read(d, &format!("a/{f}")), read(d, &format!("b/{f}")), "{f}");
    }
    assert_eq!(std::fs::read(d.join("a/model.ckpt")).unwrap(), std::fs::read(d.join("b/model.ckpt")).unwrap());
}
