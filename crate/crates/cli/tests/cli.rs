use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_starprompt"))
}

fn quick_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/quick.json")
}

fn text(o: &Output) -> (String, String) {
    (
        String::from_utf8_lossy(&o.stdout).into_owned(),
        String::from_utf8_lossy(&o.stderr).into_owned(),
    )
}

#[test]
fn gradcheck_exits_zero() {
    let o = bin().arg("gradcheck").output().unwrap();
    let (out, err) = text(&o);
    assert!(o.status.success(), "{out}{err}");
    assert!(out.contains("100/100"), "{out}");
}

#[test]
fn missing_config_names_the_path() {
    let o = bin()
        .args(["run", "/no/such/experiment.cfg"])
        .output()
        .unwrap();
    assert!(!o.status.success());
    assert!(text(&o).1.contains("/no/such/experiment.cfg"));
}

#[test]
fn unknown_subcommand_and_flag_print_usage() {
    for args in [vec!["train"], vec!["gradcheck", "--turbo"], vec![]] {
        let o = bin().args(&args).output().unwrap();
        assert!(!o.status.success(), "{args:?}");
        assert!(text(&o).1.contains("Usage"), "{args:?}");
    }
}

#[test]
fn bad_variant_is_rejected() {
    let o = bin()
        .args(["run", "x.cfg", "--variant", "bogus"])
        .output()
        .unwrap();
    assert!(!o.status.success());
    assert!(text(&o).1.contains("bogus"));
}

#[test]
fn run_is_byte_deterministic_and_diag_reads_the_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let outputs: Vec<PathBuf> = ["a", "b"].iter().map(|n| dir.path().join(n)).collect();
    for out in &outputs {
        let o = bin()
            .arg("run")
            .arg(quick_config())
            .args(["--seed", "1996", "--out"])
            .arg(out)
            .output()
            .unwrap();
        let (stdout, stderr) = text(&o);
        assert!(o.status.success(), "{stdout}{stderr}");
        assert!(stdout.contains("seed 1996: FAA"), "{stdout}");
    }
    for f in [
        "accuracy_seed1996.csv",
        "retrieval_seed1996.csv",
        "summary.json",
    ] {
        assert_eq!(
            fs::read(outputs[0].join(f)).unwrap(),
            fs::read(outputs[1].join(f)).unwrap(),
            "{f}"
        );
    }

    let o = bin()
        .arg("diag")
        .arg(outputs[0].join("checkpoint_seed1996"))
        .arg(quick_config())
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    let (stdout, stderr) = text(&o);
    assert!(o.status.success(), "{stdout}{stderr}");
    assert!(stdout.contains("after task 1"), "{stdout}");
    let csv = fs::read_to_string(dir.path().join("retrieval_confusion.csv")).unwrap();
    let full = fs::read_to_string(outputs[0].join("retrieval_seed1996.csv")).unwrap();
    let last_rows: Vec<&str> = full.lines().filter(|l| l.starts_with("1,")).collect();
    assert_eq!(csv.lines().skip(1).collect::<Vec<_>>(), last_rows);
}

#[test]
fn ablate_emits_one_row_per_variant() {
    let dir = tempfile::tempdir().unwrap();
    let o = bin()
        .arg("ablate")
        .arg(quick_config())
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    let (stdout, stderr) = text(&o);
    assert!(o.status.success(), "{stdout}{stderr}");
    let csv = fs::read_to_string(dir.path().join("ablation.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "variant,label,faa_mean,faa_std,ff_mean,ff_std");
    assert_eq!(lines.len(), 8);
    for name in [
        "full",
        "first_level_only",
        "no_first_level",
        "prefix_tuning",
        "no_replay",
        "unimodal",
        "no_conf_mod",
    ] {
        assert!(
            lines.iter().any(|l| l.starts_with(&format!("{name},"))),
            "{name}"
        );
    }
}
