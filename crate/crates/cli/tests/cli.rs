use std::path::Path;
use std::process::{Command, Output};

fn glomseg(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_glomseg"))
        .current_dir(dir)
        .env("RUST_LOG", "error")
        .env_remove("GLOMSEG_SEED")
        .args(args)
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn assert_one_error_line(o: &Output, kind: &str) {
    let err = stderr(o);
    let lines: Vec<&str> = err.lines().collect();
    assert_eq!(lines.len(), 1, "{err}");
    assert!(lines[0].starts_with(&format!("error: {kind}: ")), "{err}");
}

fn fixture(dir: &Path) {
    let o = glomseg(
        dir,
        &["--out", ".", "--run-id", "data", "make-fixture", "--size", "32", "--labeled", "4", "--labeled-wsis", "2", "--unlabeled", "8", "--test", "4", "--centers", "2"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn help_and_version_exit_zero() {
    let dir = tempfile::tempdir().unwrap();
    assert!(glomseg(dir.path(), &["--help"]).status.success());
    assert!(glomseg(dir.path(), &["--version"]).status.success());
}

#[test]
fn usage_errors_exit_two_with_one_line() {
    let dir = tempfile::tempdir().unwrap();
    for args in [&["frobnicate"][..], &["train", "--no-such-flag"], &["train", "--set", "noequals"]] {
        let o = glomseg(dir.path(), args);
        assert_eq!(o.status.code(), Some(2), "{args:?}");
        assert_one_error_line(&o, "usage");
    }
}

#[test]
fn unknown_config_key_exits_two_and_lists_keys() {
    let dir = tempfile::tempdir().unwrap();
    let o = glomseg(dir.path(), &["--set", "train.lrr=1", "train"]);
    assert_eq!(o.status.code(), Some(2));
    assert_one_error_line(&o, "config");
    assert!(stderr(&o).contains("train.lr,"));
}

#[test]
fn semi_supervised_training_without_unlabeled_data_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path());
    let o = glomseg(dir.path(), &["--config", "data/synthetic.cfg", "--set", "data.unlabeled=", "train", "--method", "unimatch"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert_one_error_line(&o, "config");
}

#[test]
fn train_then_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fixture(d);
    let train = ["--config", "data/synthetic.cfg", "--out", "runs", "--run-id", "r1", "--set", "train.epochs=1", "train", "--method", "fixmatch"];
    let o = glomseg(d, &train);
    assert!(o.status.success(), "{}", stderr(&o));
    let run = d.join("runs/r1");
    for f in ["config.cfg", "history.csv", "metrics.csv", "best.ckpt"] {
        assert!(run.join(f).exists(), "{f}");
    }
    assert!(String::from_utf8_lossy(&o.stdout).contains("Dice"));

    // same run id again
    let o = glomseg(d, &train);
    assert_eq!(o.status.code(), Some(2));
    assert_one_error_line(&o, "config");

    // the snapshot reproduces the configuration
    let o = glomseg(d, &["--config", "runs/r1/config.cfg", "--run-id", "r2", "train"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let a = std::fs::read_to_string(run.join("config.cfg")).unwrap();
    let b = std::fs::read_to_string(d.join("runs/r2/config.cfg")).unwrap();
    assert_eq!(a.replace("run_id = r1", "run_id = r2"), b);
    assert_eq!(
        std::fs::read(run.join("history.csv")).unwrap(),
        std::fs::read(d.join("runs/r2/history.csv")).unwrap()
    );

    let o = glomseg(d, &["--out", "runs", "--run-id", "ev", "evaluate", "--checkpoint", "runs/r1/best.ckpt", "--manifest", "data/manifests/test.jsonl"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(d.join("runs/ev/metrics.csv").exists());

    let o = glomseg(d, &["--out", "runs", "--run-id", "ev2", "--set", "model.arch=att_unet", "evaluate", "--checkpoint", "runs/r1/best.ckpt", "--manifest", "data/manifests/test.jsonl"]);
    assert_eq!(o.status.code(), Some(1));
    assert_one_error_line(&o, "checkpoint");
}

#[test]
fn prepare_reports_layout_problems() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::create_dir_all(d.join("ds/images")).unwrap();
    std::fs::create_dir_all(d.join("ds/masks")).unwrap();
    std::fs::write(d.join("ds/images/not_matching_the_pattern.png"), b"").unwrap();
    let o = glomseg(d, &["--out", "runs", "prepare", "--root", "ds", "--dataset", "KPMP", "--pattern", "^(?P<wsi>W\\d+)_\\d+$"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("not_matching_the_pattern"));

    let o = glomseg(d, &["prepare", "--root", "ds", "--dataset", "NOPE"]);
    assert_eq!(o.status.code(), Some(2));
}
