//! End-to-end tests of the `modmix` binary: subcommand plumbing, exit
//! codes, and byte-level determinism of everything it writes.

use std::path::Path;
use std::process::{Command, Output};

fn modmix() -> Command {
    Command::new(env!("CARGO_BIN_EXE_modmix"))
}

fn write_config(dir: &Path, extra: &str) -> std::path::PathBuf {
    let path = dir.join("run.cfg");
    let text = format!(
        "preset = separable\nn_samples = 24\nd = 8\nh = 2\nepochs = 1\nbatch_size = 8\n\
         split = 0.6, 0.2, 0.2\n{extra}"
    );
    std::fs::write(&path, text).unwrap();
    path
}

fn stdout_of(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn stderr_of(out: &Output) -> String {
    String::from_utf8(out.stderr.clone()).unwrap()
}

#[test]
fn synth_train_eval_sweep_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "out_dir = out\n");

    let out = modmix().arg("synth").arg(&cfg).output().unwrap();
    assert!(out.status.success(), "{}", stderr_of(&out));
    let dataset = dir.path().join("out/dataset.csv");
    assert!(dataset.exists());

    let out = modmix().arg("train").arg(&cfg).output().unwrap();
    assert!(out.status.success(), "{}", stderr_of(&out));
    let ckpt = dir.path().join("out/model.ckpt");
    assert!(ckpt.exists());
    assert!(dir.path().join("out/train_report.csv").exists());

    let report_file = dir.path().join("eval.csv");
    let out = modmix()
        .arg("eval")
        .arg(&ckpt)
        .arg(&dataset)
        .args(["--missing", "marker0,cohort"])
        .arg("--out")
        .arg(&report_file)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr_of(&out));
    let stdout = stdout_of(&out);
    assert!(
        stdout.starts_with("scenario,accuracy,sensitivity,specificity,auc,n\n"),
        "{stdout}"
    );
    assert!(stdout.lines().nth(1).unwrap().starts_with("\"marker0,cohort\","), "{stdout}");
    assert_eq!(std::fs::read_to_string(&report_file).unwrap(), stdout);

    let out = modmix()
        .arg("sweep")
        .arg(&cfg)
        .args(["--p", "0,0.5"])
        .args(["--scenario", "full"])
        .args(["--scenario", "marker1"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr_of(&out));
    let stdout = stdout_of(&out);
    let lines: Vec<&str> = stdout.lines().collect();
    assert_eq!(lines[0], "p,scenario,accuracy,sensitivity,specificity,auc,n");
    assert_eq!(lines.len(), 5, "{stdout}");
}

#[test]
fn outputs_are_byte_identical_for_identical_config_and_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");

    let run = |out_dir: &str| {
        let out = modmix()
            .arg("train")
            .arg(&cfg)
            .env("MODMIX_OUT_DIR", dir.path().join(out_dir))
            .output()
            .unwrap();
        assert!(out.status.success(), "{}", stderr_of(&out));
        (
            std::fs::read(dir.path().join(out_dir).join("model.ckpt")).unwrap(),
            std::fs::read(dir.path().join(out_dir).join("train_report.csv")).unwrap(),
        )
    };
    let (ckpt_a, report_a) = run("a");
    let (ckpt_b, report_b) = run("b");
    assert_eq!(ckpt_a, ckpt_b);
    assert_eq!(report_a, report_b);

    let sweep = || {
        let out = modmix()
            .arg("sweep")
            .arg(&cfg)
            .args(["--p", "0,0.9"])
            .output()
            .unwrap();
        assert!(out.status.success(), "{}", stderr_of(&out));
        stdout_of(&out)
    };
    assert_eq!(sweep(), sweep());
}

#[test]
fn exit_codes_follow_the_contract() {
    let dir = tempfile::tempdir().unwrap();

    // Usage problems exit 1.
    let out = modmix().arg("frobnicate").output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let out = modmix().output().unwrap();
    assert_eq!(out.status.code(), Some(1));

    // Help and version are not failures.
    let out = modmix().arg("--help").output().unwrap();
    assert_eq!(out.status.code(), Some(0));

    // Config mistakes exit 1 and name the problem.
    let bad = dir.path().join("bad.cfg");
    std::fs::write(&bad, "preset = separable\nwat = 1\n").unwrap();
    let out = modmix().arg("train").arg(&bad).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr_of(&out).contains("wat"), "{}", stderr_of(&out));

    // Missing or malformed data exits 2.
    let cfg = write_config(dir.path(), "out_dir = out\n");
    let out = modmix().arg("train").arg(&cfg).output().unwrap();
    assert!(out.status.success(), "{}", stderr_of(&out));
    let ckpt = dir.path().join("out/model.ckpt");
    let out = modmix().arg("eval").arg(&ckpt).arg("no_such.csv").output().unwrap();
    assert_eq!(out.status.code(), Some(2), "{}", stderr_of(&out));

    // A checkpoint that is not a checkpoint also exits 2.
    let out = modmix().arg("eval").arg(&bad).arg("no_such.csv").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn eval_rejects_unknown_modalities_with_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "out_dir = out\n");
    let out = modmix().arg("train").arg(&cfg).output().unwrap();
    assert!(out.status.success(), "{}", stderr_of(&out));
    let out = modmix().arg("synth").arg(&cfg).output().unwrap();
    assert!(out.status.success(), "{}", stderr_of(&out));

    let out = modmix()
        .arg("eval")
        .arg(dir.path().join("out/model.ckpt"))
        .arg(dir.path().join("out/dataset.csv"))
        .args(["--missing", "ghost"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2), "{}", stderr_of(&out));
    assert!(stderr_of(&out).contains("ghost"), "{}", stderr_of(&out));
}

#[test]
fn gradcheck_prints_a_row_per_check_and_passes() {
    let out = modmix()
        .arg("gradcheck")
        .args(["--d", "8", "--h", "2"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr_of(&out));
    let stdout = stdout_of(&out);
    let pass_rows = stdout.lines().filter(|l| l.starts_with("PASS ")).count();
    assert!(pass_rows >= 19, "{stdout}");
    assert!(!stdout.contains("FAIL"), "{stdout}");
    assert!(stdout.contains("pipeline"), "{stdout}");

    // Invalid head split is a config mistake.
    let out = modmix().arg("gradcheck").args(["--d", "9", "--h", "2"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
}
