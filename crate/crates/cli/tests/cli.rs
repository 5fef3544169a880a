use std::path::Path;
use std::process::{Command, Output};
use vsr_cli::commands::resolve_config;
use vsr_cli::CommonArgs;
use vsr_core::raster::{decode_mask, encode_mask, BinaryMask};

fn vsr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vsr"))
        .args(args)
        .env("VSR_LOG", "error")
        .output()
        .expect("run vsr")
}

fn path(dir: &Path, name: &str) -> String {
    dir.join(name).to_string_lossy().into_owned()
}

fn small_germ(dir: &Path) -> String {
    let data = path(dir, "data");
    assert!(vsr(&["synth", "--out", &data, "--samples", "3"]).status.success());
    let ckpt = path(dir, "g.ckpt");
    assert!(vsr(&["train-germ", "--in", &data, "--out", &ckpt, "--epochs", "2"])
        .status
        .success());
    ckpt
}

#[test]
fn empty_mask_rehab_stays_empty() {
    let dir = tempfile::tempdir().unwrap();
    let germ = small_germ(dir.path());
    let input = path(dir.path(), "m.pbm");
    std::fs::write(&input, encode_mask(&BinaryMask::new_2d(40, 50))).unwrap();
    let out = path(dir.path(), "r.pbm");
    let run = vsr(&["rehab", "--in", &input, "--germ", &germ, "--out", &out]);
    assert_eq!(run.status.code(), Some(0), "{}", String::from_utf8_lossy(&run.stderr));
    let r = decode_mask(&std::fs::read(&out).unwrap()).unwrap();
    assert_eq!(r.dims(), &[40, 50]);
    assert_eq!(r.count_ones(), 0);
}

#[test]
fn self_evaluation_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let data = path(dir.path(), "data");
    assert!(vsr(&["synth", "--out", &data, "--samples", "1"]).status.success());
    let a = path(dir.path(), "data/sample_00000_clean.pbm");
    let run = vsr(&["eval", "--pred", &a, "--gt", &a]);
    assert_eq!(run.status.code(), Some(0));
    let text = String::from_utf8(run.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "# vsr eval seed=7");
    assert_eq!(lines[1], "sample\tPA\tDice\tJaccard\tVBN_err\tFD_err\tVT_err\tECE");
    let mean: Vec<f64> = lines[3].split('\t').skip(1).map(|v| v.parse().unwrap()).collect();
    assert!(lines[3].starts_with("mean\t"));
    assert_eq!(mean, vec![1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
}

#[test]
fn seeded_training_is_replayable() {
    let dir = tempfile::tempdir().unwrap();
    let data = path(dir.path(), "data");
    assert!(vsr(&["synth", "--out", &data, "--samples", "3"]).status.success());
    let mut ckpts = Vec::new();
    for name in ["a.ckpt", "b.ckpt"] {
        let out = path(dir.path(), name);
        assert!(vsr(&[
            "train-germ",
            "--in",
            &data,
            "--out",
            &out,
            "--seed",
            "7",
            "--epochs",
            "3"
        ])
        .status
        .success());
        ckpts.push(std::fs::read(&out).unwrap());
    }
    assert_eq!(ckpts[0], ckpts[1]);
    let trace = std::fs::read_to_string(path(dir.path(), "a.ckpt.loss.tsv")).unwrap();
    assert!(trace.starts_with("# vsr train-germ seed=7\nepoch\tloss\n1\t"));
    assert_eq!(trace.lines().count(), 5);
}

#[test]
fn synth_records_the_seed() {
    let dir = tempfile::tempdir().unwrap();
    let data = path(dir.path(), "data");
    assert!(vsr(&["synth", "--out", &data, "--samples", "1", "--seed", "42"])
        .status
        .success());
    let bytes = std::fs::read(path(dir.path(), "data/sample_00000_ruptured.pbm")).unwrap();
    assert!(bytes.starts_with(b"P4\n# vsr synth seed=42 index=0\n"));
    let image = std::fs::read(path(dir.path(), "data/sample_00000_image.pgm")).unwrap();
    assert!(image.starts_with(b"P5\n# vsr synth seed=42"));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(vsr(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(vsr(&["rehab", "--in", "x.pbm"]).status.code(), Some(2));
    let bad = path(dir.path(), "bad.cfg");
    std::fs::write(&bad, "tau = -3\n").unwrap();
    let run = vsr(&["selftest", "--config", &bad]);
    assert_eq!(run.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&run.stderr).contains("tau"));
    let missing = path(dir.path(), "missing.pbm");
    let out = path(dir.path(), "out.pbm");
    assert_eq!(vsr(&["rehab", "--in", &missing, "--out", &out]).status.code(), Some(1));
    assert_eq!(vsr(&["--help"]).status.code(), Some(0));
}

#[test]
fn flags_override_file_over_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("run.cfg");
    std::fs::write(&file, "k = 3\ntau = 12\ngerm_epochs = 9\n").unwrap();
    let args = CommonArgs {
        config: Some(file),
        k: Some("5".into()),
        epochs: Some("4".into()),
        ..CommonArgs::default()
    };
    let cfg = resolve_config("train-germ", &args).unwrap();
    assert_eq!((cfg.k, cfg.tau, cfg.germ_epochs, cfg.heads), (5, 12.0, 4, 4));
    let cfg = resolve_config("train-cmm", &args).unwrap();
    assert_eq!((cfg.germ_epochs, cfg.cmm_epochs), (9, 4));
    assert!(resolve_config("rehab", &args).is_err());
}

#[test]
fn selftest_passes() {
    let run = vsr(&["selftest"]);
    let text = String::from_utf8(run.stdout).unwrap();
    assert_eq!(run.status.code(), Some(0), "{text}");
    assert!(text.lines().all(|l| l.starts_with("PASS ")));
    assert!(text.contains("edge_oracle"));
}
