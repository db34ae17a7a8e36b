//! Command-line behavior: exit statuses, stage-tagged failures and the
//! single-stage subcommands on a small synthetic fleet.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use shaftpower::synth::FleetConfig;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_shaftpower"))
}

fn tiny_config(dir: &Path, extra: serde_json::Value) -> PathBuf {
    let mut synth = FleetConfig {
        duration_days: 30,
        ..FleetConfig::default()
    };
    for v in &mut synth.vessels {
        v.start_date = None;
        v.duration_days = None;
    }
    let mut cfg = serde_json::json!({
        "data_dir": dir.join("data"),
        "out_dir": dir.join("out"),
        "seeds": [0],
        "split_date": "2023-05-24",
        "baseline": {"epochs": 2},
        "fine_tune": {"epochs": 3},
        "scratch": {"epochs": 3},
        "synth": synth,
    });
    for (k, v) in extra.as_object().unwrap() {
        cfg[k] = v.clone();
    }
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_vec_pretty(&cfg).unwrap()).unwrap();
    path
}

fn run(args: &[&str], config: &Path) -> Output {
    bin().args(args).arg("--config").arg(config).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn bad_configuration_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), serde_json::json!({}));
    let o = run(&["full-experiment", "--seeds", "5-1"], &cfg);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));

    let typo = dir.path().join("typo.json");
    std::fs::write(&typo, r#"{"sedes": [1]}"#).unwrap();
    let o = run(&["full-experiment"], &typo);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("stage `config`"));

    let empty = tiny_config(dir.path(), serde_json::json!({"seeds": []}));
    assert_eq!(run(&["train-baseline"], &empty).status.code(), Some(2));
}

#[test]
fn missing_grid_aborts_in_fuse_stage() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), serde_json::json!({}));
    assert!(run(&["gen-synth"], &cfg).status.success());
    std::fs::remove_file(dir.path().join("data/weather_grid.json")).unwrap();

    let o = run(&["full-experiment"], &cfg);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("stage `fuse`"), "{}", stderr(&o));
    let out = dir.path().join("out");
    assert!(out.join("INCOMPLETE").exists());
    assert!(!out.join("manifest.json").exists());

    let o = run(&["fuse"], &cfg);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("stage `fuse`"));
}

#[test]
fn single_seed_gives_one_row_per_vessel_with_zero_sd() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), serde_json::json!({}));
    let o = run(&["full-experiment"], &cfg);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = dir.path().join("out");
    assert!(!out.join("INCOMPLETE").exists());

    let mut reader = csv::Reader::from_path(out.join("tables/scratch_vs_tl.csv")).unwrap();
    let header = reader.headers().unwrap().clone();
    let rows: Vec<csv::StringRecord> = reader.records().map(Result::unwrap).collect();
    let ids: Vec<&str> = rows.iter().map(|r| &r[0]).collect();
    assert_eq!(ids, ["SIS2", "SIS3", "SIS4", "SIM1", "DIF1"]);
    for row in &rows {
        assert_eq!(&row[2], "1");
        for (h, cell) in header.iter().zip(row.iter()) {
            if h.ends_with("_sd") {
                assert_eq!(cell.parse::<f64>().unwrap(), 0.0, "{h}");
            }
        }
    }
    for table in ["sensor_vs_noon", "nmae_bridge"] {
        let mut r = csv::Reader::from_path(out.join(format!("tables/{table}.csv"))).unwrap();
        assert!(r.headers().unwrap().iter().any(|h| h == "n_seeds"));
        assert!(r.headers().unwrap().iter().any(|h| h.ends_with("_sd")));
        assert!(r.records().count() >= 5);
    }

    let manifest: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["status"], "complete");
    assert_eq!(manifest["base_vessel"], "SIS1");
    for v in manifest["vessels"].as_array().unwrap() {
        if v["role"] == "target" {
            let sums = &v["noon_train_sha256"];
            assert_eq!(sums["scratch"], sums["tl"], "{}", v["vessel_id"]);
        }
    }
    let plot = std::fs::read_to_string(out.join("plots/SIS2_noon_test.csv")).unwrap();
    assert!(plot.starts_with("date,actual,predicted_scratch,predicted_tl\n"));
}

#[test]
fn stage_commands_run_in_sequence() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), serde_json::json!({}));
    let out = dir.path().join("out");
    for args in [
        &["gen-synth"][..],
        &["fuse", "--vessel", "SIS1"],
        &["train-baseline"],
        &["finetune"],
        &["train-scratch", "--vessel", "SIS2"],
        &["correlations", "--vessel", "SIS2"],
    ] {
        let o = run(args, &cfg);
        assert!(o.status.success(), "{args:?}: {}", stderr(&o));
    }
    for f in [
        "fused/SIS1.csv",
        "checkpoints/sensor_SIS1_seed0.json",
        "checkpoints/tl_DIF1_seed0.json",
        "checkpoints/scratch_SIS2_seed0.json",
        "tables/baseline.csv",
        "tables/finetune.csv",
        "tables/scratch.csv",
        "tables/correlations_SIS2_noon.csv",
    ] {
        assert!(out.join(f).exists(), "{f}");
    }
    let fused = shaftpower::data::load_sensor_csv(&out.join("fused/SIS1.csv")).unwrap();
    assert!(fused.records.iter().all(|r| r.weather.is_some()));

    let ckpt = out.join("checkpoints/tl_SIM1_seed0.json");
    let o = bin()
        .args(["evaluate", "--vessel", "SIM1", "--checkpoint"])
        .arg(&ckpt)
        .arg("--config")
        .arg(&cfg)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(report["mape"].as_f64().unwrap() > 0.0);

    let o = bin().args(["evaluate", "--checkpoint"]).arg(&ckpt).arg("--config").arg(&cfg).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn diverging_training_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(
        dir.path(),
        serde_json::json!({"scratch": {"epochs": 5, "initial_lr": 1e300, "min_lr": 1e299}}),
    );
    let o = run(&["train-scratch", "--vessel", "SIS2"], &cfg);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
    assert!(stderr(&o).contains("stage `train-scratch`"));
}
