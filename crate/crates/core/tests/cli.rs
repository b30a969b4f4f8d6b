use std::path::Path;
use std::process::Command;

use ngrc_core::basins::BasinGrid;
use ngrc_core::harness::{ExperimentConfig, FeatureDescriptor, SweepConfig};
use ngrc_core::ngrc::NgrcModel;

fn ngrc(args: &[&str]) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_ngrc"))
        .args(args)
        .output()
        .expect("binary runs");
    let text = String::from_utf8_lossy(&out.stdout).to_string() + &String::from_utf8_lossy(&out.stderr);
    (out.status.code().unwrap_or(-1), text)
}

fn write_config(dir: &Path, cfg: &ExperimentConfig) -> String {
    let path = dir.join("config_in.json");
    std::fs::write(&path, cfg.to_json().unwrap()).unwrap();
    path.to_string_lossy().into_owned()
}

fn tiny() -> ExperimentConfig {
    ExperimentConfig {
        n_traj: 3,
        n_train: 300,
        resolution: 6,
        horizon: 10.0,
        ..ExperimentConfig::pendulum(FeatureDescriptor::PendulumExact { delta: 0.0 })
    }
}

#[test]
fn subcommands_write_their_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = write_config(dir.path(), &tiny());
    let out = dir.path().join("run");
    let out_s = out.to_string_lossy().into_owned();

    let (code, text) = ngrc(&["truth-basins", "--config", &cfg_path, "--out", &out_s]);
    assert_eq!(code, 0, "{text}");
    let truth = BasinGrid::load_csv(&out.join("basins_truth.csv")).unwrap();
    assert_eq!(truth.labels.len(), 36);

    let (code, text) = ngrc(&["train", "--config", &cfg_path, "--out", &out_s, "--seed", "5"]);
    assert_eq!(code, 0, "{text}");
    let model = NgrcModel::load(&out.join("model.ngrc")).unwrap();
    assert_eq!(model.seeds()["master"], 5);

    let model_s = out.join("model.ngrc").to_string_lossy().into_owned();
    let (code, text) = ngrc(&[
        "predict-basins", "--config", &cfg_path, "--out", &out_s, "--model", &model_s,
    ]);
    assert_eq!(code, 0, "{text}");
    assert!(text.contains("p = "));

    let (code, text) = ngrc(&[
        "diagnose", "--config", &cfg_path, "--out", &out_s, "--model", &model_s, "--ic-index", "0",
    ]);
    assert_eq!(code, 0, "{text}");
    assert!(out.join("diagnose.json").exists() && out.join("diagnose_0.csv").exists());

    let img = dir.path().join("overlay.ppm");
    let (code, text) = ngrc(&[
        "render",
        "--grid",
        &out.join("basins_pred.csv").to_string_lossy(),
        "--truth",
        &out.join("basins_truth.csv").to_string_lossy(),
        "--mode",
        "overlay",
        "--out",
        &img.to_string_lossy(),
    ]);
    assert_eq!(code, 0, "{text}");
    assert!(std::fs::read(&img).unwrap().starts_with(b"P6\n6 6\n255\n"));

    let (code, text) = ngrc(&["run", "--config", &cfg_path, "--out", &out_s, "--lambda", "0.5", "--k", "3"]);
    assert_eq!(code, 0, "{text}");
    let resolved = ExperimentConfig::load(&out.join("config.json")).unwrap();
    assert_eq!((resolved.lambda, resolved.k), (0.5, 3));
    assert!(out.join("basins_overlay.png").exists());
}

#[test]
fn sweep_writes_one_row_per_value_and_replicate() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny();
    cfg.resolution = 3;
    cfg.sweep = Some(SweepConfig {
        param: "n_traj".into(),
        values: vec![1.0, 2.0, 3.0],
        replicates: 1,
    });
    let cfg_path = write_config(dir.path(), &cfg);
    let out = dir.path().join("sweep");
    let (code, text) = ngrc(&[
        "sweep", "--config", &cfg_path, "--out", &out.to_string_lossy(), "--replicates", "2",
    ]);
    assert_eq!(code, 0, "{text}");
    let csv = std::fs::read_to_string(out.join("sweep.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().filter(|l| l.starts_with("n_traj,")).collect();
    assert_eq!(rows.len(), 6);
    assert!(csv.contains("param,value,replicate,p,frac_diverged,rmse,seconds"));
}

#[test]
fn invalid_configuration_exits_with_code_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = write_config(dir.path(), &tiny());
    let out = dir.path().join("x").to_string_lossy().into_owned();
    let (code, _) = ngrc(&["train", "--config", &cfg_path, "--out", &out, "--n-train", "0"]);
    assert_eq!(code, 2);
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{\"schema_version\": 1}").unwrap();
    let (code, _) = ngrc(&["train", "--config", &bad.to_string_lossy(), "--out", &out]);
    assert_eq!(code, 2);
    let (code, _) = ngrc(&["train", "--config", &cfg_path, "--out", &out, "--height", "-1"]);
    assert_eq!(code, 2);
}

#[test]
fn numeric_failure_exits_with_code_3() {
    let dir = tempfile::tempdir().unwrap();
    // Quartic features of 1e100 overflow, so the Gram matrix is not finite.
    let mut cfg = tiny();
    cfg.features = FeatureDescriptor::Polynomial { d_max: 4 };
    cfg.k = 1;
    cfg.region = ngrc_core::harness::RegionConfig::PendulumRect {
        x_range: [1e100, 2e100],
        y_range: [1e100, 2e100],
    };
    let cfg_path = write_config(dir.path(), &cfg);
    let out = dir.path().join("x").to_string_lossy().into_owned();
    let (code, text) = ngrc(&["train", "--config", &cfg_path, "--out", &out]);
    assert_eq!(code, 3, "{text}");
}
