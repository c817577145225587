use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use irs_harness::output::{read_csv, ResultRow};

fn irs_sim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_irs-sim"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("run irs-sim")
}

fn write_spec(dir: &Path, body: &str) -> PathBuf {
    let path = dir.join("spec.toml");
    std::fs::write(&path, format!("base = \"smoke\"\n{body}")).unwrap();
    path
}

fn stage(cmd: &str, spec: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![cmd, "--spec", spec.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    irs_sim(&args)
}

fn ok(o: Output) -> Output {
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    o
}

const FAST: &str = "[training]\nmax_epochs = 1\n[timing]\nin_sweep = false\n";

#[test]
fn zero_training_samples_is_rejected_before_writing() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_spec(dir.path(), "[experiment]\nn_train = 0\n");
    let out = dir.path().join("out");
    let o = stage("generate", &spec, &out, &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("n_train"));
    assert!(!out.exists());
}

#[test]
fn unknown_provenance_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_spec(dir.path(), "[experiment]\nreference_provenance = \"oracle\"\n");
    let o = stage("sweep", &spec, &dir.path().join("out"), &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("oracle"));
}

#[test]
fn unknown_spec_key_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_spec(dir.path(), "[system]\nnum_antennas = 4\n");
    let o = stage("generate", &spec, &dir.path().join("out"), &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("system.num_antennas"));
}

#[test]
fn sweep_without_dataset_fails_at_runtime() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_spec(dir.path(), FAST);
    let o = stage("sweep", &spec, &dir.path().join("out"), &[]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("dataset not found"));
}

#[test]
fn missing_spec_file() {
    let dir = tempfile::tempdir().unwrap();
    let o = stage("generate", &dir.path().join("nope.toml"), &dir.path().join("out"), &[]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("spec file not found"));
}

#[test]
fn bad_arguments_exit_2() {
    assert_eq!(irs_sim(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(irs_sim(&["sweep"]).status.code(), Some(2));
}

#[test]
fn desk_sweep_shape_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_spec(
        dir.path(),
        &format!("{FAST}[experiment]\nsnr_sweep_db = [-5, 0, 5, 10, 15]\nn_train = 32\nn_test = 4\n"),
    );
    let run = |name: &str| {
        let out = dir.path().join(name);
        ok(stage("generate", &spec, &out, &["--seed", "3"]));
        ok(stage("train", &spec, &out, &["--seed", "3"]));
        ok(stage("sweep", &spec, &out, &["--seed", "3"]));
        out
    };
    let a = run("a");
    let b = run("b");
    let rows: Vec<ResultRow> = read_csv(&a.join("results.csv")).unwrap();
    assert_eq!(rows.len(), 20);
    let snrs: Vec<f64> = rows.iter().step_by(4).map(|r| r.snr_db).collect();
    assert_eq!(snrs, vec![-5.0, 0.0, 5.0, 10.0, 15.0]);
    for r in &rows {
        assert_eq!((r.n_samples, r.seed), (4, 3));
        assert!(r.mean_nmse.is_finite() && r.mean_se_bps_hz.is_finite());
    }
    for f in ["results.csv", "fig3_nmse.dat", "fig4_se.dat", "sweep.manifest.json"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    // outputs of another seed are not reused
    let o = stage("sweep", &spec, &a, &["--seed", "4"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("seed"));
}

#[test]
fn resume_extends_loss_curve() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_spec(dir.path(), &format!("{FAST}[experiment]\nsnr_sweep_db = [5]\nestimators = [\"ls\", \"mismatch\"]\n"));
    let out = dir.path().join("out");
    ok(stage("generate", &spec, &out, &[]));
    ok(stage("train", &spec, &out, &[]));
    let loss = out.join("loss/mismatch-ls_snr5.csv");
    assert_eq!(std::fs::read_to_string(&loss).unwrap().lines().count(), 2);
    ok(stage("train", &spec, &out, &["--resume"]));
    let text = std::fs::read_to_string(&loss).unwrap();
    let epochs: Vec<&str> = text.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(epochs, vec!["1", "2"]);
    ok(stage("sweep", &spec, &out, &[]));
}

#[test]
fn tampered_checkpoint_is_detected() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_spec(dir.path(), &format!("{FAST}[experiment]\nsnr_sweep_db = [5]\nestimators = [\"ls\", \"mismatch\"]\n"));
    let out = dir.path().join("out");
    ok(stage("generate", &spec, &out, &[]));
    ok(stage("train", &spec, &out, &[]));
    let ckpt = out.join("checkpoints/mismatch-ls_snr5.irsm");
    let mut bytes = std::fs::read(&ckpt).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 1;
    std::fs::write(&ckpt, bytes).unwrap();
    let o = stage("sweep", &spec, &out, &[]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("changed"));
}

#[test]
fn bench_and_ablation_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_spec(
        dir.path(),
        &format!("{FAST}[experiment]\nsnr_sweep_db = [10]\n[ablation]\nsizes = [[2, 2]]\n"),
    );
    let out = dir.path().join("out");
    ok(stage("generate", &spec, &out, &[]));
    ok(stage("train", &spec, &out, &[]));
    ok(stage("bench", &spec, &out, &[]));
    let timing = std::fs::read_to_string(out.join("timing.csv")).unwrap();
    assert!(timing.starts_with("run,method,mean_ms,std_ms,trials,params,flops\n"));
    assert_eq!(timing.lines().count(), 1 + 2 * 3);
    ok(stage("ablate-ref", &spec, &out, &[]));
    let ablation = std::fs::read_to_string(out.join("ablation.csv")).unwrap();
    let lines: Vec<&str> = ablation.lines().collect();
    assert_eq!(lines[0], "snr_db,m,n,provenance,mean_nmse,n_samples,seed");
    assert_eq!(lines.len(), 1 + 3 + 1);
    assert!(lines[4].starts_with("10.0000,2,2,exact,"));
}
