use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use svcca_core::convdft;
use svcca_core::fixtures::gaussian;
use svcca_core::linalg::RealMatrix;
use svcca_core::tensorio::{self, ActivationDump, Manifest};
use svcca_core::toynet::{self, NetSpec, TrainConfig};
use tempfile::TempDir;

fn svcca(args: &[&str]) -> Output {
    svcca_with_env(args, &[])
}

fn svcca_with_env(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_svcca"));
    cmd.args(args).env_remove("SVCCA_THREADS");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_dense(dir: &Path, file: &str, name: &str, m: &RealMatrix) -> String {
    let path = dir.join(file);
    tensorio::write_dump(&ActivationDump::dense(name, None, m), &path).unwrap();
    path.to_str().unwrap().to_string()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn sorted_names(dir: &Path) -> Vec<String> {
    let mut names: Vec<String> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    names
}

fn read_all(dir: &Path) -> Vec<(String, Vec<u8>)> {
    sorted_names(dir)
        .into_iter()
        .map(|n| {
            let bytes = fs::read(dir.join(&n)).unwrap();
            (n, bytes)
        })
        .collect()
}

#[test]
fn compare_same_dump_prints_one() {
    let tmp = TempDir::new().unwrap();
    let a = write_dense(tmp.path(), "a.dump", "fc1", &gaussian(6, 80, 1));
    let o = svcca(&["compare", &a, &a]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("mean similarity: 1.000000"), "{}", stdout(&o));
    // Nothing is written without --out.
    assert_eq!(sorted_names(tmp.path()), vec!["a.dump"]);
}

#[test]
fn compare_dense_against_conv_via_cross_layer_view() {
    let tmp = TempDir::new().unwrap();
    let fx = convdft::translation_fixture(4, 2, 2, true, 3).unwrap();
    let d = fx.layer1.datapoints();
    let conv = tmp.path().join("conv.dump");
    tensorio::write_dump(&ActivationDump::conv("conv1", None, &fx.layer1), &conv).unwrap();
    let dense = write_dense(tmp.path(), "dense.dump", "fc", &gaussian(5, d, 4));
    let out = tmp.path().join("report");
    let o = svcca(&["compare", s(&conv), &dense, "--mode", "cross-layer", "--out", s(&out), "--format", "csv,json"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("(cross-layer)"), "{}", stdout(&o));
    assert_eq!(sorted_names(&out), vec!["compare.csv", "compare.json"]);
}

#[test]
fn compare_rejects_mismatched_datapoints() {
    let tmp = TempDir::new().unwrap();
    let a = write_dense(tmp.path(), "a.dump", "fc1", &gaussian(4, 50, 1));
    let b = write_dense(tmp.path(), "b.dump", "fc1", &gaussian(4, 60, 2));
    let o = svcca(&["compare", &a, &b]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("datapoint count mismatch"), "{}", stderr(&o));
}

#[test]
fn compare_reports_bad_files_and_degenerate_layers() {
    let tmp = TempDir::new().unwrap();
    let junk = tmp.path().join("junk.dump");
    fs::write(&junk, b"not a dump at all").unwrap();
    let o = svcca(&["compare", s(&junk), s(&junk)]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));

    let flat = write_dense(tmp.path(), "flat.dump", "fc", &RealMatrix::from_element(3, 40, 0.5));
    let good = write_dense(tmp.path(), "good.dump", "fc", &gaussian(3, 40, 9));
    let o = svcca(&["compare", &flat, &good]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("zero variance"), "{}", stderr(&o));
}

fn write_run(dir: &Path) -> PathBuf {
    let task = toynet::toy_regression_task(0);
    let config = TrainConfig {
        steps: 60,
        batch_size: 8,
        learning_rate: 0.05,
        checkpoint_every: 20,
        shuffle_seed: 1,
    };
    let run = toynet::train(&NetSpec::mlp(1, 10, 2, 4, 3), &task, &config, None).unwrap();
    run.checkpoints.write(dir).unwrap();
    dir.join("manifest.json")
}

#[test]
fn dynamics_writes_one_grid_per_checkpoint_deterministically() {
    let tmp = TempDir::new().unwrap();
    let manifest = write_run(&tmp.path().join("dumps"));
    let (out1, out2) = (tmp.path().join("one"), tmp.path().join("two"));
    for out in [&out1, &out2] {
        let o = svcca(&["dynamics", s(&manifest), "--out", s(out)]);
        assert!(o.status.success(), "{}", stderr(&o));
        assert!(stdout(&o).contains("bottom-up:"));
    }
    let mut expected = Vec::new();
    for step in [0, 20, 40, 60] {
        for ext in ["csv", "json", "svg"] {
            expected.push(format!("grid_step{step:08}.{ext}"));
        }
    }
    for ext in ["csv", "json", "svg"] {
        expected.push(format!("convergence.{ext}"));
    }
    expected.push("convergence_steps.csv".into());
    expected.push("convergence_steps.json".into());
    expected.sort();
    assert_eq!(sorted_names(&out1), expected);
    assert_eq!(read_all(&out1), read_all(&out2));
}

#[test]
fn dynamics_rejects_an_empty_manifest() {
    let tmp = TempDir::new().unwrap();
    let path = tmp.path().join("manifest.json");
    let m = Manifest {
        model_id: "m".into(),
        dataset_id: "probe".into(),
        datapoint_count: 10,
        checkpoints: vec![],
    };
    fs::write(&path, m.to_json()).unwrap();
    let out = tmp.path().join("out");
    let o = svcca(&["dynamics", s(&path), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("no checkpoints"), "{}", stderr(&o));
    assert!(!out.exists());
}

#[test]
fn verify_subcommands_pass_on_generated_fixtures() {
    for args in [
        &["verify", "dft-diagonal", "--n", "8"][..],
        &["verify", "block-cov", "--n", "4", "--c", "2"],
        &["verify", "circulant", "--n", "4", "--c", "1"],
        &["verify", "dft-cca-equiv", "--n", "4", "--c", "2"],
        &["verify", "kronecker", "--n", "5", "--c", "3"],
    ] {
        let o = svcca(args);
        assert!(o.status.success(), "{args:?}: {}", stdout(&o));
        assert!(stdout(&o).trim_end().ends_with("PASS"), "{args:?}: {}", stdout(&o));
    }
}

#[test]
fn verify_without_augmentation_is_labelled_approximate() {
    let o = svcca(&["verify", "block-cov", "--n", "4", "--c", "2", "--no-augment"]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.contains("approximate"), "{text}");
    let ratio: f64 = text
        .lines()
        .find(|l| l.contains("layer1 x layer2"))
        .and_then(|l| l.split(": ").nth(1))
        .and_then(|v| v.split_whitespace().next())
        .and_then(|v| v.parse().ok())
        .unwrap();
    assert!(ratio > 1e-3, "{text}");
}

#[test]
fn verify_rejects_zero_sizes() {
    let o = svcca(&["verify", "circulant", "--n", "0"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn unknown_experiment_is_a_usage_error() {
    let o = svcca(&["experiment", "nope"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("unknown experiment"));
}

#[test]
fn bad_config_is_a_usage_error() {
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("bad.toml");
    fs::write(&cfg, "[regression]\nhiden = 3\n").unwrap();
    let o = svcca(&["experiment", "two-inits", "--config", s(&cfg)]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

const SMALL: &str = "seed = 3\n\n[regression]\nhidden = 16\nsteps = 120\ncheckpoint_every = 40\n\n[sweep]\nks = [2, 4, 16]\nbaseline_ks = [2, 4]\n";

#[test]
fn experiments_are_reproducible_byte_for_byte() {
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("small.toml");
    fs::write(&cfg, SMALL).unwrap();
    for name in ["two-inits", "projection-sweep"] {
        let (a, b) = (tmp.path().join(format!("{name}-a")), tmp.path().join(format!("{name}-b")));
        let mut outputs = Vec::new();
        for (out, threads) in [(&a, "1"), (&b, "2")] {
            let o = svcca_with_env(
                &["experiment", name, "--config", s(&cfg), "--out", s(out)],
                &[("SVCCA_THREADS", threads)],
            );
            assert!(o.status.success(), "{name}: {}", stderr(&o));
            // The last line names the output directory.
            let text = stdout(&o);
            outputs.push(text.lines().filter(|l| !l.starts_with("wrote ")).collect::<Vec<_>>().join("\n"));
        }
        assert_eq!(outputs[0], outputs[1], "{name}");
        assert!(!sorted_names(&a).is_empty());
        assert_eq!(read_all(&a), read_all(&b), "{name}");
    }
}

#[test]
fn seed_flag_overrides_config() {
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("small.toml");
    fs::write(&cfg, SMALL).unwrap();
    let run = |seed: &str| stdout(&svcca(&["experiment", "two-inits", "--config", s(&cfg), "--seed", seed]));
    assert_eq!(run("5"), run("5"));
    assert_ne!(run("5"), run("6"));
}

#[test]
fn invalid_thread_count_is_rejected() {
    let o = svcca_with_env(&["verify", "kronecker"], &[("SVCCA_THREADS", "lots")]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("SVCCA_THREADS"));
}
