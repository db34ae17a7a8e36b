//! Single-stage subcommands. `full-experiment` lives in [`crate::experiment`].

use std::path::{Path, PathBuf};

use shaftpower::data::write_sensor_csv;
use shaftpower::features::{correlation_report, write_correlations_csv};
use shaftpower::model::{load_checkpoint, save_checkpoint, save_train_report, ShaftPowerModel};
use shaftpower::numfmt::to_json_pretty;
use shaftpower::synth::{generate_fleet, write_fleet, VesselRole};
use shaftpower::Error;

use crate::config::{CatalogEntry, ExperimentConfig};
use crate::experiment::{run_arm, run_jobs, Arm, RunRecord, Trained};
use crate::pipeline::{
    checkpoint_name, ensure_data, evaluate, feature_options, fine_tune_model, load_fused_sensor, load_vessel,
    load_weather, report_name, train_from_scratch, AtStage, StageError, StageResult, VesselData,
};
use crate::tables::{num, stat_cells, Table};

/// Writes the synthetic fleet described by `cfg.synth` into the data directory.
pub fn gen_synth(cfg: &ExperimentConfig) -> StageResult<()> {
    let fleet = generate_fleet(&cfg.synth).at("generate")?;
    let manifest = write_fleet(&cfg.data_dir, &cfg.synth, &fleet).at("generate")?;
    for v in &manifest.vessels {
        println!(
            "{} ({}, {:?}): {} sensor rows, {} noon rows",
            v.spec.vessel_id, v.spec.category, v.role, v.sensor_rows, v.noon_rows
        );
    }
    println!("wrote fleet to {}", cfg.data_dir.display());
    Ok(())
}

fn catalog(cfg: &ExperimentConfig) -> StageResult<Vec<CatalogEntry>> {
    ensure_data(cfg)?;
    cfg.resolve_catalog().at("load")
}

/// Attaches weather to each vessel's sensor file and writes `fused/<vessel>.csv`.
pub fn fuse_cmd(cfg: &ExperimentConfig) -> StageResult<()> {
    let entries = catalog(cfg)?;
    let grid = load_weather(cfg)?;
    for e in &entries {
        let (fused, raw, ingest, outside) = load_fused_sensor(cfg, e, &grid)?;
        let path = cfg.out_dir.join("fused").join(format!("{}.csv", e.vessel_id));
        write_sensor_csv(&path, &fused).map_err(|err| StageError::new("fuse", err).vessel(&e.vessel_id))?;
        println!(
            "{}: {raw} rows read, {ingest} rejected on ingest, {outside} outside the grid, {} fused -> {}",
            e.vessel_id,
            fused.len(),
            path.display()
        );
    }
    Ok(())
}

fn load_all(cfg: &ExperimentConfig, keep: impl Fn(&CatalogEntry) -> bool) -> StageResult<Vec<VesselData>> {
    let entries: Vec<CatalogEntry> = catalog(cfg)?.into_iter().filter(|e| keep(e)).collect();
    if entries.is_empty() {
        return Err(StageError::new("load", Error::Config("no vessels selected".into())));
    }
    let grid = load_weather(cfg)?;
    entries.iter().map(|e| load_vessel(cfg, e, &grid)).collect()
}

fn save_runs(cfg: &ExperimentConfig, name: &str, trained: &[Trained]) -> StageResult<()> {
    let dir = cfg.out_dir.join("checkpoints");
    for t in trained {
        let r = &t.record;
        save_checkpoint(&dir.join(checkpoint_name(r.arm.as_str(), &r.vessel_id, r.seed)), &t.model).at("write")?;
        save_train_report(&dir.join(report_name(r.arm.as_str(), &r.vessel_id, r.seed)), &t.report).at("write")?;
    }
    let records: Vec<RunRecord> = trained.iter().map(|t| t.record.clone()).collect();
    write_run_tables(&cfg.out_dir, name, &records).at("write")
}

/// Per-run rows in `<name>_runs.csv` and a per-vessel summary in `tables/<name>.csv`.
pub fn write_run_tables(out: &Path, name: &str, records: &[RunRecord]) -> shaftpower::Result<()> {
    let mut runs = Table::new(["seed", "vessel", "arm", "n_test", "best_epoch", "r2", "nmae", "mae", "mape"]);
    for r in records {
        runs.push(vec![
            r.seed.to_string(),
            r.vessel_id.clone(),
            r.arm.as_str().into(),
            r.metrics.n.to_string(),
            r.best_epoch.to_string(),
            num(r.metrics.r2),
            num(r.metrics.nmae),
            num(r.metrics.mae),
            num(r.metrics.mape),
        ]);
    }
    runs.write_csv(&out.join(format!("{name}_runs.csv")))?;

    let mut header = vec!["vessel".to_string(), "arm".into(), "n_seeds".into()];
    for m in ["r2", "nmae", "mae", "mape"] {
        header.extend(["mean", "sd", "median"].map(|s| format!("{m}_{s}")));
    }
    let mut summary = Table::new(header);
    let mut keys: Vec<(&str, Arm)> = records.iter().map(|r| (r.vessel_id.as_str(), r.arm)).collect();
    keys.dedup();
    for (vessel, arm) in keys {
        let group: Vec<&RunRecord> = records.iter().filter(|r| r.vessel_id == vessel && r.arm == arm).collect();
        let mut row = vec![vessel.to_string(), arm.as_str().into(), group.len().to_string()];
        for f in [
            |r: &RunRecord| r.metrics.r2,
            |r: &RunRecord| r.metrics.nmae,
            |r: &RunRecord| r.metrics.mae,
            |r: &RunRecord| r.metrics.mape,
        ] {
            row.extend(stat_cells(&group.iter().map(|r| f(r)).collect::<Vec<_>>())?);
        }
        summary.push(row);
    }
    summary.write_csv(&out.join("tables").join(format!("{name}.csv")))
}

fn print_records(records: impl IntoIterator<Item = RunRecord>) {
    for r in records {
        println!(
            "{} seed {} {}: R2 {:.4}  NMAE {:.4}  MAE {:.2}  MAPE {:.3}",
            r.vessel_id,
            r.seed,
            r.arm.as_str(),
            r.metrics.r2,
            r.metrics.nmae,
            r.metrics.mae,
            r.metrics.mape
        );
    }
}

fn jobs(cfg: &ExperimentConfig, n: usize) -> Vec<(u64, usize)> {
    cfg.seeds.iter().flat_map(|&s| (0..n).map(move |v| (s, v))).collect()
}

/// Sensor-data models for the selected vessels (default: source vessels).
pub fn train_baseline_cmd(cfg: &ExperimentConfig) -> StageResult<()> {
    let explicit = cfg.vessels.is_some();
    let vessels = load_all(cfg, |e| explicit || e.role == VesselRole::Source)?;
    let options = feature_options(cfg);
    let trained = run_jobs(&jobs(cfg, vessels.len()), |&(seed, v)| {
        let vessel = &vessels[v];
        run_arm(Arm::Sensor, seed, vessel, cfg, |train| {
            train_from_scratch(train, options, &cfg.baseline_config(seed), format!("sensor:{}", vessel.entry.vessel_id))
        })
    })?;
    save_runs(cfg, "baseline", &trained)?;
    print_records(trained.into_iter().map(|t| t.record));
    Ok(())
}

/// Noon-report models trained from scratch.
pub fn train_scratch_cmd(cfg: &ExperimentConfig) -> StageResult<()> {
    let vessels = load_all(cfg, |_| true)?;
    let options = feature_options(cfg);
    let trained = run_jobs(&jobs(cfg, vessels.len()), |&(seed, v)| {
        let vessel = &vessels[v];
        run_arm(Arm::Scratch, seed, vessel, cfg, |train| {
            train_from_scratch(train, options, &cfg.scratch_config(seed), format!("noon-scratch:{}", vessel.entry.vessel_id))
        })
    })?;
    save_runs(cfg, "scratch", &trained)?;
    print_records(trained.into_iter().map(|t| t.record));
    Ok(())
}

/// Fine-tunes a sensor model on each target vessel's noon reports. Without
/// an explicit checkpoint, seed `k` uses `checkpoints/sensor_<base>_seed<k>.json`.
pub fn finetune_cmd(cfg: &ExperimentConfig, checkpoint: Option<&Path>, base: Option<&str>) -> StageResult<()> {
    let entries = catalog(cfg)?;
    let base_id = match base {
        Some(b) => b.to_string(),
        None => entries
            .iter()
            .find(|e| e.role == VesselRole::Source)
            .map(|e| e.vessel_id.clone())
            .ok_or_else(|| StageError::new("finetune", Error::Config("no source vessel; pass --base".into())))?,
    };
    let explicit = cfg.vessels.is_some();
    let vessels = load_all(cfg, |e| e.vessel_id != base_id && (explicit || e.role == VesselRole::Target))?;
    let base_path = |seed: u64| -> PathBuf {
        checkpoint
            .map(Path::to_path_buf)
            .unwrap_or_else(|| cfg.out_dir.join("checkpoints").join(checkpoint_name("sensor", &base_id, seed)))
    };
    let bases: Vec<ShaftPowerModel> = cfg
        .seeds
        .iter()
        .map(|&s| load_checkpoint(&base_path(s)).map_err(|e| StageError::new("load", e).seed(s)))
        .collect::<StageResult<_>>()?;
    let seed_index = |seed: u64| cfg.seeds.iter().position(|&s| s == seed).expect("listed seed");
    let trained = run_jobs(&jobs(cfg, vessels.len()), |&(seed, v)| {
        let vessel = &vessels[v];
        run_arm(Arm::Tl, seed, vessel, cfg, |train| {
            fine_tune_model(
                &bases[seed_index(seed)],
                train,
                &cfg.fine_tune_config(seed),
                cfg.tl_target_scaling,
                format!("noon-tl:{}<-sensor:{base_id}", vessel.entry.vessel_id),
            )
        })
    })?;
    save_runs(cfg, "finetune", &trained)?;
    print_records(trained.into_iter().map(|t| t.record));
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Dataset {
    Sensor,
    Noon,
}

/// Scores a checkpoint on one vessel's test split and prints the metrics as JSON.
pub fn evaluate_cmd(cfg: &ExperimentConfig, checkpoint: &Path, dataset: Dataset) -> StageResult<()> {
    let ids = cfg.vessels.clone().unwrap_or_default();
    if ids.len() != 1 {
        return Err(StageError::new(
            "evaluate",
            Error::Config("evaluate needs exactly one --vessel".into()),
        ));
    }
    let model = load_checkpoint(checkpoint).at("load")?;
    let vessel = load_all(cfg, |_| true)?.remove(0);
    let test = match dataset {
        Dataset::Sensor => &vessel.sensor_test,
        Dataset::Noon => &vessel.noon_test,
    };
    let (report, _) = evaluate(&model, test, cfg.nmae_denominator).map_err(|e| StageError::new("evaluate", e).vessel(&ids[0]))?;
    let text = to_json_pretty(&report).map_err(|e| StageError::new("evaluate", Error::Argument(e.to_string())))?;
    print!("{}", String::from_utf8_lossy(&text));
    Ok(())
}

/// Pearson correlation of each feature with shaft power, on the train splits.
pub fn correlations_cmd(cfg: &ExperimentConfig) -> StageResult<()> {
    let vessels = load_all(cfg, |_| true)?;
    for v in &vessels {
        for (label, m) in [("sensor", &v.sensor_train), ("noon", &v.noon_train)] {
            let report = correlation_report(m).map_err(|e| StageError::new("correlations", e).vessel(&v.entry.vessel_id))?;
            let path = cfg
                .out_dir
                .join("tables")
                .join(format!("correlations_{}_{label}.csv", v.entry.vessel_id));
            write_correlations_csv(&path, &report).at("write")?;
            let line: Vec<String> = report.entries.iter().map(|(f, r)| format!("{f} {r:+.3}")).collect();
            println!("{} {label}: {}", v.entry.vessel_id, line.join(", "));
        }
    }
    Ok(())
}
