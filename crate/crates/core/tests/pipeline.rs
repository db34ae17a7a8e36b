//! End-to-end checks across modules: generated data survives CSV storage and
//! re-fusion unchanged, and a trained model predicts the same after a
//! checkpoint round-trip.

use shaftpower::data::{load_noon_csv, load_sensor_csv, preprocess, temporal_split, PreprocessConfig, SplitSpec};
use shaftpower::features::{build_features, standardize, FeatureOptions, TargetScaler};
use shaftpower::model::{load_checkpoint, save_checkpoint, ShaftPowerModel};
use shaftpower::nn::{init_params, DEFAULT_ARCHITECTURE};
use shaftpower::synth::{generate_fleet, write_fleet, FleetConfig};
use shaftpower::trainer::{train, FreezeMask, TrainConfig};
use shaftpower::weather::{fuse, load_grid};

fn tiny_fleet() -> FleetConfig {
    let mut cfg = FleetConfig {
        duration_days: 6,
        ..FleetConfig::default()
    };
    cfg.vessels.truncate(2);
    for v in &mut cfg.vessels {
        v.start_date = None;
        v.duration_days = None;
    }
    cfg
}

#[test]
fn stored_fleet_fuses_back_to_identical_weather() {
    let cfg = tiny_fleet();
    let fleet = generate_fleet(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_fleet(dir.path(), &cfg, &fleet).unwrap();
    let grid = load_grid(&dir.path().join(&manifest.grid_file)).unwrap();
    assert_eq!(grid, fleet.grid);
    for (v, entry) in fleet.vessels.iter().zip(&manifest.vessels) {
        let raw = load_sensor_csv(&dir.path().join(&entry.sensor_file)).unwrap();
        assert!(raw.records.iter().all(|r| r.weather.is_none()));
        let fused = fuse(raw.records, &grid).unwrap();
        assert!(fused.rejects.is_empty());
        assert_eq!(fused.fused, v.sensor);
        let noon = load_noon_csv(&dir.path().join(&entry.noon_file)).unwrap();
        assert_eq!(noon.records, v.noon);
    }
}

#[test]
fn generation_is_deterministic_per_seed() {
    let cfg = tiny_fleet();
    let a = generate_fleet(&cfg).unwrap();
    let b = generate_fleet(&cfg).unwrap();
    assert_eq!(a.grid, b.grid);
    for (x, y) in a.vessels.iter().zip(&b.vessels) {
        assert_eq!(x.sensor, y.sensor);
        assert_eq!(x.noon, y.noon);
    }
    let other = generate_fleet(&FleetConfig { seed: 7, ..cfg }).unwrap();
    assert_ne!(other.vessels[0].sensor, a.vessels[0].sensor);
}

#[test]
fn checkpointed_model_predicts_identically() {
    let fleet = generate_fleet(&tiny_fleet()).unwrap();
    let kept = preprocess(fleet.vessels[0].sensor.clone(), &PreprocessConfig::default()).kept;
    let boundary = kept[kept.len() * 3 / 4].timestamp;
    let (train_rows, test_rows) = temporal_split(kept, SplitSpec { train_end: boundary }).unwrap();
    let (train_m, _) = build_features(&train_rows, FeatureOptions::default()).unwrap();
    let (test_m, _) = build_features(&test_rows, FeatureOptions::default()).unwrap();

    let z = standardize(&train_m).unwrap();
    let scaler = TargetScaler::fit(&train_m.targets).unwrap();
    let z = z.with_targets(z.targets.iter().map(|&y| scaler.scale(y)).collect());
    let config = TrainConfig {
        epochs: 3,
        ..TrainConfig::baseline(1)
    };
    let (params, report) = train(&init_params(&DEFAULT_ARCHITECTURE, 1).unwrap(), &z, &config, &FreezeMask::all_trainable(4)).unwrap();
    assert_eq!(report.val_loss_history.len(), 3);
    let model = ShaftPowerModel {
        params,
        feature_stats: z.standardization.clone().unwrap(),
        target_scaler: scaler,
        options: FeatureOptions::default(),
        seed: 1,
        trained_on: "sensor:SIS1".into(),
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.json");
    save_checkpoint(&path, &model).unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    let a = model.predict_kw(&test_m).unwrap();
    let b = loaded.predict_kw(&test_m).unwrap();
    assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
}
