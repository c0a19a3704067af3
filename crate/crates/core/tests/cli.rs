use std::path::Path;
use std::process::{Command, Output};

fn capae(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_capae")).args(args).output().expect("binary runs")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn bad_arguments_exit_2() {
    assert_eq!(capae(&["train", "--beta", "-2"]).status.code(), Some(2));
    assert_eq!(capae(&["verify", "no-such-suite"]).status.code(), Some(2));
    assert_eq!(capae(&["train", "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(capae(&["capacity-search", "--snr-db", "5,3"]).status.code(), Some(2));
}

#[test]
fn missing_inputs_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("absent.json");
    let out = dir.path().join("out");
    assert_eq!(capae(&["bler", "--checkpoint", path(&missing), "--snr-db", "5", "--out", path(&out)]).status.code(), Some(3));
    assert_eq!(capae(&["train", "--config", path(&missing), "--out", path(&out)]).status.code(), Some(3));
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, r#"{"k": 2, "bogus": 1}"#).unwrap();
    let out = dir.path().join("out");
    assert_eq!(capae(&["train", "--config", path(&cfg), "--out", path(&out)]).status.code(), Some(2));
}

#[test]
fn train_then_bler_and_mi_curve() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let out = capae(&[
        "train", "--k", "2", "--n", "1", "--iterations", "100", "--batch-size", "32", "--hidden", "16",
        "--mine-hidden", "16", "--eval-trials", "0", "--mi-eval-samples", "0", "--out", path(&run),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["config.json", "checkpoint.json", "curves.csv", "constellation.csv"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let curves = std::fs::read_to_string(run.join("curves.csv")).unwrap();
    assert!(curves.starts_with("iteration,"));
    let constellation = std::fs::read_to_string(run.join("constellation.csv")).unwrap();
    assert_eq!(constellation.lines().next(), Some("message,re_1,im_1"));
    assert_eq!(constellation.lines().count(), 5);

    let ckpt = run.join("checkpoint.json");
    let bler_dir = dir.path().join("bler");
    let out = capae(&["bler", "--checkpoint", path(&ckpt), "--snr-db", "0,10", "--trials", "2000", "--out", path(&bler_dir)]);
    assert!(out.status.success());
    let bler = std::fs::read_to_string(bler_dir.join("bler.csv")).unwrap();
    assert_eq!(bler.lines().count(), 3);

    let mi_dir = dir.path().join("mi");
    let out = capae(&[
        "mi-curve", "--checkpoint", path(&ckpt), "--oracle", "awgn-capacity,qam", "--qam-m", "4", "--snr-db", "0,10",
        "--samples", "2048", "--oracle-samples", "5000", "--out", path(&mi_dir),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let mi = std::fs::read_to_string(mi_dir.join("mi_curve.csv")).unwrap();
    assert_eq!(mi.lines().next(), Some("snr_db,mi_bits,stderr,label"));
    assert_eq!(mi.lines().count(), 1 + 3 * 2);
}

#[test]
fn verify_writes_results() {
    let dir = tempfile::tempdir().unwrap();
    let out = capae(&["verify", "lemma1", "--out", path(dir.path())]);
    assert!(out.status.success());
    let csv = std::fs::read_to_string(dir.path().join("verify.csv")).unwrap();
    assert!(csv.lines().skip(1).all(|l| l.ends_with("true")), "{csv}");
}
