//! Exit codes and outputs of the command-line tool.

use std::path::Path;
use std::process::{Command, Output};

fn acunet(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_acunet"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("run acunet")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

#[test]
fn synth_train_eval_predict_round() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = acunet(&["synth", "--out", "corpus", "--pieces", "6", "--seed", "2"], d);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));

    let train = [
        "train", "--data", "corpus", "--out", "m.acun", "--log", "log.csv", "--max-epochs", "1", "--batch-size", "8",
        "--base-filters", "2",
    ];
    let out = acunet(&train, d);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let log = std::fs::read_to_string(d.join("log.csv")).unwrap();
    assert!(log.starts_with("epoch,train_loss,val_loss,lr\n1,"), "{log}");

    let out = acunet(&["eval", "--data", "corpus", "--ckpt", "m.acun", "--report", "r.csv"], d);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let report = std::fs::read_to_string(d.join("r.csv")).unwrap();
    assert!(report.starts_with("piece,tp,fp,fn,tn,precision,recall,f1\n"));
    assert!(report.contains("\nmicro,") && report.contains("\nmacro,"));

    let piece = "corpus/piece_005";
    let page = format!("{piece}/page.png");
    let audio = format!("{piece}/audio.wav");
    let predict = ["predict", "--ckpt", "m.acun", "--page", &page, "--audio", &audio, "--frame", "30", "--out", "o.png"];
    let out = acunet(&predict, d);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(d.join("o.png").is_file() && d.join("o_prob.png").is_file());

    let mut beyond = predict;
    beyond[8] = "100000";
    assert_eq!(code(&acunet(&beyond, d)), 1);
}

#[test]
fn validation_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(code(&acunet(&["bogus"], d)), 1);
    assert_eq!(code(&acunet(&["synth", "--out", "c", "--pieces", "0"], d)), 1);
    assert_eq!(code(&acunet(&["train", "--data", "c", "--out", "m", "--film", "J"], d)), 1);
    assert_eq!(code(&acunet(&["--help"], d)), 0);
}

#[test]
fn missing_files_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(code(&acunet(&["eval", "--data", "nowhere", "--ckpt", "m.acun", "--report", "r.csv"], d)), 2);
    assert_eq!(code(&acunet(&["train", "--data", "nowhere", "--out", "m.acun"], d)), 2);
}
