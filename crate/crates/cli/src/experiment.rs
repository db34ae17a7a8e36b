//! The end-to-end protocol: sensor baselines for every vessel, base-model
//! selection, then fine-tuned and from-scratch noon models for each target,
//! repeated over seeds and aggregated.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use shaftpower::data::{timestamp_to_date, VesselCategory};
use shaftpower::features::FeatureMatrix;
use shaftpower::metrics::{MeanSd, MetricsReport};
use shaftpower::model::{save_checkpoint, save_train_report, ShaftPowerModel};
use shaftpower::numfmt::write_json;
use shaftpower::synth::VesselRole;
use shaftpower::trainer::{TrainConfig, TrainReport};
use shaftpower::Error;

use crate::config::{ExperimentConfig, TlTargetScaling};
use crate::pipeline::{
    checkpoint_name, ensure_data, evaluate, fine_tune_model, load_vessel, load_weather, report_name,
    select_base_vessel, split_checksum, train_from_scratch, AtStage, StageError, StageResult, VesselData,
    VesselSummary,
};
use crate::tables::{num, pm, stat_cells, Table};

pub const MANIFEST: &str = "manifest.json";
pub const INCOMPLETE_MARKER: &str = "INCOMPLETE";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Arm {
    /// Trained and tested on the vessel's own sensor data.
    Sensor,
    /// Trained from scratch on noon reports.
    Scratch,
    /// Source sensor model fine-tuned on noon reports.
    Tl,
}

impl Arm {
    pub fn as_str(self) -> &'static str {
        match self {
            Arm::Sensor => "sensor",
            Arm::Scratch => "scratch",
            Arm::Tl => "tl",
        }
    }
}

/// One trained model's outcome on its test split.
#[derive(Debug, Clone)]
pub struct RunRecord {
    pub seed: u64,
    pub vessel_id: String,
    pub arm: Arm,
    pub metrics: MetricsReport,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub train_checksum: String,
    pub predictions: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub base_vessel: String,
    pub vessels: Vec<VesselSummary>,
    pub runs: Vec<RunRecord>,
    /// Files written, relative to the output directory.
    pub artifacts: Vec<String>,
}

impl ExperimentOutcome {
    pub fn runs_for(&self, vessel: &str, arm: Arm) -> Vec<&RunRecord> {
        self.runs.iter().filter(|r| r.vessel_id == vessel && r.arm == arm).collect()
    }
}

pub(crate) struct Trained {
    pub(crate) record: RunRecord,
    pub(crate) model: ShaftPowerModel,
    pub(crate) report: TrainReport,
}

pub(crate) fn run_arm(
    arm: Arm,
    seed: u64,
    vessel: &VesselData,
    cfg: &ExperimentConfig,
    fit: impl FnOnce(&FeatureMatrix) -> shaftpower::Result<(ShaftPowerModel, TrainReport)>,
) -> StageResult<Trained> {
    let stage = match arm {
        Arm::Sensor => "train-baseline",
        Arm::Scratch => "train-scratch",
        Arm::Tl => "finetune",
    };
    let id = vessel.entry.vessel_id.as_str();
    let tag = |e| StageError::new(stage, e).vessel(id).seed(seed);
    let (train, test) = match arm {
        Arm::Sensor => (&vessel.sensor_train, &vessel.sensor_test),
        _ => (&vessel.noon_train, &vessel.noon_test),
    };
    let (model, report) = fit(train).map_err(tag)?;
    let (metrics, predictions) = evaluate(&model, test, cfg.nmae_denominator)
        .map_err(|e| StageError::new("evaluate", e).vessel(id).seed(seed))?;
    log::info!(
        "{id} seed {seed} {}: mape {:.3} nmae {:.4} r2 {:.3} ({} epochs)",
        arm.as_str(),
        metrics.mape,
        metrics.nmae,
        metrics.r2,
        report.val_loss_history.len()
    );
    Ok(Trained {
        record: RunRecord {
            seed,
            vessel_id: id.to_string(),
            arm,
            metrics,
            best_epoch: report.best_epoch,
            epochs_run: report.val_loss_history.len(),
            train_checksum: split_checksum(train),
            predictions,
        },
        model,
        report,
    })
}

/// Runs every job in parallel and returns results in job order; the first
/// failure in that order wins, so errors are reproducible too.
pub(crate) fn run_jobs<J: Sync, T: Send>(jobs: &[J], f: impl Fn(&J) -> StageResult<T> + Sync) -> StageResult<Vec<T>> {
    jobs.par_iter().map(&f).collect::<Vec<_>>().into_iter().collect()
}

fn mean_report(reports: &[&MetricsReport]) -> MetricsReport {
    let k = reports.len() as f64;
    let avg = |f: fn(&MetricsReport) -> f64| reports.iter().map(|r| f(r)).sum::<f64>() / k;
    MetricsReport {
        mae: avg(|r| r.mae),
        nmae: avg(|r| r.nmae),
        mape: avg(|r| r.mape),
        r2: avg(|r| r.r2),
        n: reports.first().map_or(0, |r| r.n),
    }
}

/// Runs the full protocol and writes all artifacts under `cfg.out_dir`.
/// On failure the output directory is left with an `INCOMPLETE` marker and
/// without a manifest.
pub fn run_full_experiment(cfg: &ExperimentConfig) -> StageResult<ExperimentOutcome> {
    cfg.validate().at("config")?;
    let out = &cfg.out_dir;
    crate::pipeline::ensure_dir(out).at("write")?;
    let manifest_path = out.join(MANIFEST);
    if manifest_path.exists() {
        std::fs::remove_file(&manifest_path)
            .map_err(|e| Error::Io {
                path: manifest_path.clone(),
                source: e,
            })
            .at("write")?;
    }
    let marker = out.join(INCOMPLETE_MARKER);
    std::fs::write(&marker, "run in progress\n")
        .map_err(|e| Error::Io {
            path: marker.clone(),
            source: e,
        })
        .at("write")?;
    match run(cfg) {
        Ok(outcome) => {
            std::fs::remove_file(&marker)
                .map_err(|e| Error::Io {
                    path: marker,
                    source: e,
                })
                .at("write")?;
            Ok(outcome)
        }
        Err(e) => {
            let _ = std::fs::write(&marker, format!("{e}\n"));
            Err(e)
        }
    }
}

fn run(cfg: &ExperimentConfig) -> StageResult<ExperimentOutcome> {
    ensure_data(cfg)?;
    let catalog = cfg.resolve_catalog().at("load")?;
    let grid = load_weather(cfg)?;
    let vessels = catalog
        .iter()
        .map(|e| load_vessel(cfg, e, &grid))
        .collect::<StageResult<Vec<_>>>()?;
    drop(grid);

    let candidates: Vec<usize> = (0..vessels.len())
        .filter(|&i| vessels[i].entry.role == VesselRole::Source)
        .collect();
    if candidates.is_empty() {
        return Err(StageError::new(
            "select-base",
            Error::Config("no vessel has the source role".into()),
        ));
    }
    let options = crate::pipeline::feature_options(cfg);

    // Sensor baselines for every vessel and seed.
    let jobs: Vec<(u64, usize)> = cfg.seeds.iter().flat_map(|&s| (0..vessels.len()).map(move |v| (s, v))).collect();
    let sensor = run_jobs(&jobs, |&(seed, v)| {
        let vessel = &vessels[v];
        run_arm(Arm::Sensor, seed, vessel, cfg, |train| {
            train_from_scratch(
                train,
                options,
                &cfg.baseline_config(seed),
                format!("sensor:{}", vessel.entry.vessel_id),
            )
        })
    })?;

    let candidate_reports: Vec<(String, MetricsReport)> = candidates
        .iter()
        .map(|&v| {
            let id = &vessels[v].entry.vessel_id;
            let reports: Vec<&MetricsReport> = sensor
                .iter()
                .filter(|t| &t.record.vessel_id == id)
                .map(|t| &t.record.metrics)
                .collect();
            (id.clone(), mean_report(&reports))
        })
        .collect();
    let base_vessel = select_base_vessel(&candidate_reports).at("select-base")?;
    log::info!("base model vessel: {base_vessel}");
    let base_models: BTreeMap<u64, &ShaftPowerModel> = sensor
        .iter()
        .filter(|t| t.record.vessel_id == base_vessel)
        .map(|t| (t.record.seed, &t.model))
        .collect();

    // Noon models: scratch for every vessel, fine-tuned for every target.
    let mut noon_jobs = Vec::new();
    for &seed in &cfg.seeds {
        for (v, vessel) in vessels.iter().enumerate() {
            noon_jobs.push((seed, v, Arm::Scratch));
            if vessel.entry.role == VesselRole::Target && vessel.entry.vessel_id != base_vessel {
                noon_jobs.push((seed, v, Arm::Tl));
            }
        }
    }
    let noon = run_jobs(&noon_jobs, |&(seed, v, arm)| {
        let vessel = &vessels[v];
        let id = &vessel.entry.vessel_id;
        match arm {
            Arm::Scratch => run_arm(arm, seed, vessel, cfg, |train| {
                train_from_scratch(train, options, &cfg.scratch_config(seed), format!("noon-scratch:{id}"))
            }),
            _ => run_arm(arm, seed, vessel, cfg, |train| {
                fine_tune_model(
                    base_models[&seed],
                    train,
                    &cfg.fine_tune_config(seed),
                    cfg.tl_target_scaling,
                    format!("noon-tl:{id}<-sensor:{base_vessel}"),
                )
            }),
        }
    })?;

    let mut trained: Vec<Trained> = sensor.into_iter().chain(noon).collect();
    let order: BTreeMap<&str, usize> = vessels
        .iter()
        .enumerate()
        .map(|(i, v)| (v.entry.vessel_id.as_str(), i))
        .collect();
    trained.sort_by_key(|t| (order[t.record.vessel_id.as_str()], t.record.arm, t.record.seed));

    let artifacts = write_outputs(cfg, &vessels, &trained, &base_vessel, &candidate_reports).at("write")?;
    Ok(ExperimentOutcome {
        base_vessel,
        vessels: vessels.iter().map(|v| v.summary.clone()).collect(),
        runs: trained.into_iter().map(|t| t.record).collect(),
        artifacts,
    })
}

fn arm_runs<'a>(trained: &'a [Trained], vessel: &str, arm: Arm) -> Vec<&'a RunRecord> {
    trained
        .iter()
        .map(|t| &t.record)
        .filter(|r| r.vessel_id == vessel && r.arm == arm)
        .collect()
}

fn metric(runs: &[&RunRecord], f: fn(&MetricsReport) -> f64) -> Vec<f64> {
    runs.iter().map(|r| f(&r.metrics)).collect()
}

fn stats(runs: &[&RunRecord], f: fn(&MetricsReport) -> f64) -> shaftpower::Result<MeanSd> {
    MeanSd::of(&metric(runs, f))
}

const METRICS: [(&str, fn(&MetricsReport) -> f64); 4] = [
    ("r2", |m| m.r2),
    ("nmae", |m| m.nmae),
    ("mae", |m| m.mae),
    ("mape", |m| m.mape),
];

fn metric_header(prefix: &str) -> Vec<String> {
    METRICS
        .iter()
        .flat_map(|(name, _)| {
            ["mean", "sd", "median"].map(|s| format!("{prefix}_{name}_{s}"))
        })
        .collect()
}

fn metric_cells(runs: &[&RunRecord]) -> shaftpower::Result<Vec<String>> {
    let mut out = Vec::new();
    for (_, f) in METRICS {
        out.extend(stat_cells(&metric(runs, f))?);
    }
    Ok(out)
}

fn category(c: VesselCategory) -> String {
    c.to_string()
}

fn role(r: VesselRole) -> &'static str {
    match r {
        VesselRole::Source => "source",
        VesselRole::Target => "target",
    }
}

fn recipe_json(c: &TrainConfig) -> serde_json::Value {
    let mut v = serde_json::to_value(c).expect("train config serializes");
    if let Some(obj) = v.as_object_mut() {
        obj.remove("seed");
    }
    v
}

#[derive(Serialize)]
struct ManifestVessel<'a> {
    vessel_id: &'a str,
    category: VesselCategory,
    role: VesselRole,
    #[serde(flatten)]
    summary: &'a VesselSummary,
    /// SHA-256 of the noon train split each noon arm consumed.
    noon_train_sha256: BTreeMap<&'static str, String>,
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    status: &'static str,
    seeds: &'a [u64],
    base_vessel: &'a str,
    base_selection: Vec<BaseCandidate<'a>>,
    recipes: BTreeMap<&'static str, serde_json::Value>,
    scratch_recipe: &'static str,
    tl_target_scaling: TlTargetScaling,
    vessels: Vec<ManifestVessel<'a>>,
    artifacts: &'a [String],
    config: &'a ExperimentConfig,
}

#[derive(Serialize)]
struct BaseCandidate<'a> {
    vessel_id: &'a str,
    mean_sensor_mape: f64,
    mean_sensor_nmae: f64,
}

fn write_outputs(
    cfg: &ExperimentConfig,
    vessels: &[VesselData],
    trained: &[Trained],
    base_vessel: &str,
    candidates: &[(String, MetricsReport)],
) -> shaftpower::Result<Vec<String>> {
    let out = &cfg.out_dir;
    let mut artifacts: Vec<String> = Vec::new();
    let mut record = |p: &Path| artifacts.push(p.strip_prefix(out).unwrap_or(p).to_string_lossy().replace('\\', "/"));
    let n_seeds = cfg.seeds.len().to_string();
    let tables = out.join("tables");

    // Per-run log.
    let mut runs = Table::new([
        "seed", "vessel", "category", "arm", "n_test", "best_epoch", "epochs_run", "r2", "nmae", "mae", "mape",
    ]);
    for t in trained {
        let r = &t.record;
        let v = vessels.iter().find(|v| v.entry.vessel_id == r.vessel_id).expect("known vessel");
        runs.push(vec![
            r.seed.to_string(),
            r.vessel_id.clone(),
            category(v.entry.category),
            r.arm.as_str().into(),
            r.metrics.n.to_string(),
            r.best_epoch.to_string(),
            r.epochs_run.to_string(),
            num(r.metrics.r2),
            num(r.metrics.nmae),
            num(r.metrics.mae),
            num(r.metrics.mape),
        ]);
    }
    let p = out.join("runs.csv");
    runs.write_csv(&p)?;
    record(&p);

    // Sensor vs noon-scratch per vessel.
    let mut header = vec!["vessel".to_string(), "category".into(), "role".into(), "n_seeds".into()];
    header.extend(metric_header("sensor"));
    header.extend(metric_header("noon_scratch"));
    let mut sensor_vs_noon = Table::new(header);
    let mut sensor_txt = Table::new(["vessel", "category", "data", "R2", "NMAE", "MAPE"]);
    for v in vessels {
        let id = &v.entry.vessel_id;
        let s = arm_runs(trained, id, Arm::Sensor);
        let n = arm_runs(trained, id, Arm::Scratch);
        let mut row = vec![id.clone(), category(v.entry.category), role(v.entry.role).into(), n_seeds.clone()];
        row.extend(metric_cells(&s)?);
        row.extend(metric_cells(&n)?);
        sensor_vs_noon.push(row);
        for (label, runs) in [("sensor", &s), ("noon", &n)] {
            sensor_txt.push(vec![
                id.clone(),
                category(v.entry.category),
                label.into(),
                pm(&stats(runs, |m| m.r2)?, 3),
                pm(&stats(runs, |m| m.nmae)?, 4),
                pm(&stats(runs, |m| m.mape)?, 2),
            ]);
        }
    }

    // Scratch vs fine-tuned, and the NMAE bridge, per target vessel.
    let mut header = vec!["vessel".to_string(), "category".into(), "n_seeds".into()];
    header.extend(metric_header("scratch"));
    header.extend(metric_header("tl"));
    header.push("mape_reduction_pct".into());
    let mut scratch_vs_tl = Table::new(header);
    let mut tl_txt = Table::new(["vessel", "category", "method", "R2", "MAE", "MAPE"]);
    let mut bridge_header = vec!["vessel".to_string(), "category".into(), "n_seeds".into()];
    for arm in ["sensor", "tl", "scratch"] {
        bridge_header.extend(["mean", "sd", "median"].map(|s| format!("nmae_{arm}_{s}")));
    }
    let mut bridge = Table::new(bridge_header);
    let mut bridge_txt = Table::new(["vessel", "category", "NMAE sensor", "NMAE noon (TL)", "NMAE noon (scratch)"]);
    let targets: Vec<&VesselData> = vessels
        .iter()
        .filter(|v| !arm_runs(trained, &v.entry.vessel_id, Arm::Tl).is_empty())
        .collect();
    for v in &targets {
        let id = &v.entry.vessel_id;
        let (s, sc, tl) = (
            arm_runs(trained, id, Arm::Sensor),
            arm_runs(trained, id, Arm::Scratch),
            arm_runs(trained, id, Arm::Tl),
        );
        let (mape_sc, mape_tl) = (stats(&sc, |m| m.mape)?, stats(&tl, |m| m.mape)?);
        let mut row = vec![id.clone(), category(v.entry.category), n_seeds.clone()];
        row.extend(metric_cells(&sc)?);
        row.extend(metric_cells(&tl)?);
        row.push(num(100.0 * (mape_sc.mean - mape_tl.mean) / mape_sc.mean));
        scratch_vs_tl.push(row);
        for (label, runs) in [("scratch", &sc), ("tl", &tl)] {
            tl_txt.push(vec![
                id.clone(),
                category(v.entry.category),
                label.into(),
                pm(&stats(runs, |m| m.r2)?, 3),
                pm(&stats(runs, |m| m.mae)?, 1),
                pm(&stats(runs, |m| m.mape)?, 2),
            ]);
        }
        let mut row = vec![id.clone(), category(v.entry.category), n_seeds.clone()];
        for runs in [&s, &tl, &sc] {
            row.extend(stat_cells(&metric(runs, |m| m.nmae))?);
        }
        bridge.push(row);
        bridge_txt.push(vec![
            id.clone(),
            category(v.entry.category),
            pm(&stats(&s, |m| m.nmae)?, 4),
            pm(&stats(&tl, |m| m.nmae)?, 4),
            pm(&stats(&sc, |m| m.nmae)?, 4),
        ]);
    }

    let mut base_table = Table::new(["vessel", "n_seeds", "mean_sensor_mape", "mean_sensor_nmae", "selected"]);
    for (id, r) in candidates {
        base_table.push(vec![
            id.clone(),
            n_seeds.clone(),
            num(r.mape),
            num(r.nmae),
            (id == base_vessel).to_string(),
        ]);
    }

    let seeds_note = format!("{} seeds, mean ± SD", cfg.seeds.len());
    for (name, table, text) in [
        ("sensor_vs_noon", &sensor_vs_noon, Some((&sensor_txt, "Sensor vs noon-report models trained from scratch"))),
        ("scratch_vs_tl", &scratch_vs_tl, Some((&tl_txt, "Noon-report models: from scratch vs fine-tuned"))),
        ("nmae_bridge", &bridge, Some((&bridge_txt, "NMAE from sensor data to noon reports"))),
        ("base_selection", &base_table, None),
    ] {
        let p = tables.join(format!("{name}.csv"));
        table.write_csv(&p)?;
        record(&p);
        if let Some((t, title)) = text {
            let p = tables.join(format!("{name}.txt"));
            t.write_text(&p, &format!("{title} ({seeds_note})"))?;
            record(&p);
        }
    }

    // Mean test-set predictions over seeds.
    for v in &targets {
        let id = &v.entry.vessel_id;
        let mean_pred = |arm| {
            let runs = arm_runs(trained, id, arm);
            let k = runs.len() as f64;
            (0..v.noon_test.len())
                .map(|i| runs.iter().map(|r| r.predictions[i]).sum::<f64>() / k)
                .collect::<Vec<_>>()
        };
        let (sc, tl) = (mean_pred(Arm::Scratch), mean_pred(Arm::Tl));
        let mut plot = Table::new(["date", "actual", "predicted_scratch", "predicted_tl"]);
        for i in 0..v.noon_test.len() {
            plot.push(vec![
                timestamp_to_date(v.noon_test.timestamps[i]).to_string(),
                num(v.noon_test.targets[i]),
                num(sc[i]),
                num(tl[i]),
            ]);
        }
        let p = out.join("plots").join(format!("{id}_noon_test.csv"));
        plot.write_csv(&p)?;
        record(&p);
    }

    // Checkpoints.
    let ckpt_dir = out.join("checkpoints");
    let first_seed = cfg.seeds[0];
    for t in trained.iter().filter(|t| cfg.checkpoint_all_seeds || t.record.seed == first_seed) {
        let r = &t.record;
        let p = ckpt_dir.join(checkpoint_name(r.arm.as_str(), &r.vessel_id, r.seed));
        save_checkpoint(&p, &t.model)?;
        record(&p);
        let p = ckpt_dir.join(report_name(r.arm.as_str(), &r.vessel_id, r.seed));
        save_train_report(&p, &t.report)?;
        record(&p);
    }

    artifacts.sort();
    let manifest = Manifest {
        tool: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        status: "complete",
        seeds: &cfg.seeds,
        base_vessel,
        base_selection: candidates
            .iter()
            .map(|(id, r)| BaseCandidate {
                vessel_id: id,
                mean_sensor_mape: r.mape,
                mean_sensor_nmae: r.nmae,
            })
            .collect(),
        recipes: BTreeMap::from([
            ("baseline", recipe_json(&cfg.baseline_config(0))),
            ("fine_tune", recipe_json(&cfg.fine_tune_config(0))),
            ("scratch", recipe_json(&cfg.scratch_config(0))),
        ]),
        scratch_recipe: "baseline recipe with batch size 16, trained on the same noon train split as the fine-tuned arm",
        tl_target_scaling: cfg.tl_target_scaling,
        vessels: vessels
            .iter()
            .map(|v| {
                let id = v.entry.vessel_id.as_str();
                let mut sums = BTreeMap::new();
                for arm in [Arm::Scratch, Arm::Tl] {
                    if let Some(r) = arm_runs(trained, id, arm).first() {
                        sums.insert(arm.as_str(), r.train_checksum.clone());
                    }
                }
                ManifestVessel {
                    vessel_id: id,
                    category: v.entry.category,
                    role: v.entry.role,
                    summary: &v.summary,
                    noon_train_sha256: sums,
                }
            })
            .collect(),
        artifacts: &artifacts,
        config: cfg,
    };
    write_json(&out.join(MANIFEST), &manifest, true)?;
    Ok(artifacts)
}

/// Bytes of every file listed in a finished run's manifest, plus the manifest.
pub fn snapshot_outputs(out_dir: &Path) -> shaftpower::Result<BTreeMap<PathBuf, Vec<u8>>> {
    let manifest: serde_json::Value = shaftpower::numfmt::read_json(&out_dir.join(MANIFEST))?;
    let mut files = vec![PathBuf::from(MANIFEST)];
    if let Some(list) = manifest.get("artifacts").and_then(|a| a.as_array()) {
        files.extend(list.iter().filter_map(|v| v.as_str()).map(PathBuf::from));
    }
    files
        .into_iter()
        .map(|rel| {
            let p = out_dir.join(&rel);
            std::fs::read(&p).map(|b| (rel, b)).map_err(|e| Error::Io { path: p, source: e })
        })
        .collect()
}
