use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use fode::analysis::{hidden_spectrogram, spectral_entropy, SpectrogramConfig};
use fode::datasets::{gen_periodic3d, window_split, Variant, WindowDataset};
use fode::trainer::{train, TrainConfig, TrainData};
use fode::Matrix;

#[test]
fn single_pair_overfits() {
    let series = gen_periodic3d(Variant::A, 0.05).unwrap();
    let ds = WindowDataset {
        inputs: vec![series.slice_rows(0, 10), series.slice_rows(300, 10)],
        targets: vec![series.slice_rows(10, 10), series.slice_rows(310, 10)],
        starts: vec![0, 300],
        split_index: 1,
    };
    let data = TrainData::from_windows(&ds, false).unwrap();
    let cfg = TrainConfig {
        epochs: 1000,
        batch_size: 1,
        hidden: 32,
        ..TrainConfig::default()
    };
    let out = train(&data.init_model(&cfg).unwrap(), &data, &cfg).unwrap();
    let first = out.history.initial_train_loss.unwrap();
    let last = out.history.final_train_loss().unwrap();
    assert!(last * 100.0 <= first, "{first} -> {last}");
}

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_fode")
}

fn only_subdir(root: &Path) -> PathBuf {
    let dirs: Vec<PathBuf> = fs::read_dir(root).unwrap().map(|e| e.unwrap().path()).filter(|p| p.is_dir()).collect();
    assert_eq!(dirs.len(), 1, "{dirs:?}");
    dirs[0].clone()
}

fn fode(args: &[&str]) -> std::process::Output {
    Command::new(bin()).args(args).output().unwrap()
}

#[test]
fn train_is_reproducible_and_evaluable() {
    let tmp = tempfile::tempdir().unwrap();
    let mut metrics = Vec::new();
    for i in 0..2 {
        let out = tmp.path().join(format!("r{i}"));
        let o = fode(&["train", "--system", "periodic3d-a", "--epochs", "3", "--seed", "5", "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        let dir = only_subdir(&out);
        for f in ["model.ckpt", "best.ckpt", "history.csv", "metrics.json", "resolved_config.json"] {
            assert!(dir.join(f).is_file(), "missing {f}");
        }
        metrics.push((dir.clone(), fs::read(dir.join("metrics.json")).unwrap()));
    }
    assert_eq!(metrics[0].1, metrics[1].1);
    assert_eq!(
        fs::read(metrics[0].0.join("model.ckpt")).unwrap(),
        fs::read(metrics[1].0.join("model.ckpt")).unwrap()
    );

    let eval_out = tmp.path().join("eval");
    let ckpt = metrics[0].0.join("model.ckpt");
    let o = fode(&["eval", "--system", "periodic3d-a", "--checkpoint", ckpt.to_str().unwrap(), "--out", eval_out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let a: serde_json::Value = serde_json::from_slice(&metrics[0].1).unwrap();
    let b: serde_json::Value = serde_json::from_slice(&fs::read(only_subdir(&eval_out).join("metrics.json")).unwrap()).unwrap();
    assert_eq!(a["mse"], b["mse"]);
}

#[test]
fn gen_lipschitz_and_gradcheck_commands() {
    let tmp = tempfile::tempdir().unwrap();
    let root = |name: &str| tmp.path().join(name).to_str().unwrap().to_string();
    let o = fode(&["gen", "--system", "lotka-volterra", "--out", &root("gen")]);
    assert!(o.status.success());
    let csv = only_subdir(&tmp.path().join("gen")).join("data.csv");
    assert_eq!(fs::read_to_string(&csv).unwrap().lines().count(), 501);

    let o = fode(&["lipschitz", "--data", csv.to_str().unwrap(), "--pairs", "100", "--out", &root("lip")]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let lip: serde_json::Value =
        serde_json::from_slice(&fs::read(only_subdir(&tmp.path().join("lip")).join("lipschitz.json")).unwrap()).unwrap();
    assert_eq!(lip["pass"], true);

    let o = fode(&["gradcheck", "--system", "forced-vibration", "--solver", "rk4", "--rk4-steps", "2", "--eps", "1e-4", "--out", &root("gc")]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let gc: serde_json::Value =
        serde_json::from_slice(&fs::read(only_subdir(&tmp.path().join("gc")).join("gradcheck.json")).unwrap()).unwrap();
    assert!(gc["n_checked"].as_u64().unwrap() > 0);
}

#[test]
fn bad_invocations_exit_with_usage_code() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().to_str().unwrap();
    for args in [
        vec!["frobnicate"],
        vec!["train", "--lr=-1", "--out", out],
        vec!["train", "--system", "not-a-system", "--out", out],
        vec!["train", "--k-init", "gaussian", "--out", out],
    ] {
        let o = fode(&args);
        assert_eq!(o.status.code(), Some(2), "{args:?}");
    }
    let o = fode(&["eval", "--system", "periodic3d-a", "--checkpoint", "/nonexistent/model.ckpt", "--out", out]);
    assert_eq!(o.status.code(), Some(2));
    let junk = tmp.path().join("junk.ckpt");
    fs::write(&junk, b"not a checkpoint").unwrap();
    let o = fode(&["eval", "--system", "periodic3d-a", "--checkpoint", junk.to_str().unwrap(), "--out", out]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!o.stderr.is_empty());
}

#[test]
#[ignore = "tracked-entry trajectories over one solver span are near-linear ramps; entropy rises slightly with training"]
fn training_concentrates_hidden_spectrum() {
    let s = gen_periodic3d(Variant::A, 0.05).unwrap();
    let ds = window_split(&s, 10, 10, 0.8).unwrap();
    let data = TrainData::from_windows(&ds, true).unwrap();
    let cfg = TrainConfig {
        epochs: 300,
        ..TrainConfig::default()
    };
    let initial = data.init_model(&cfg).unwrap();
    let trained = train(&initial, &data, &cfg).unwrap().model;
    let norm = data.normalizer.as_ref().unwrap();
    let window: Matrix = norm.normalize(&ds.test().0[0]);
    let specs = hidden_spectrogram(&[initial, trained], &window, &cfg.eval_solver, &SpectrogramConfig::default()).unwrap();
    let (before, after) = (spectral_entropy(&specs[0]), spectral_entropy(&specs[1]));
    assert!(after < before, "{before} -> {after}");
}
