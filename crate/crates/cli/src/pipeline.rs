//! Building blocks shared by the subcommands: loading and fusing a vessel's
//! data, fitting the three model families, and evaluating them.

use std::fmt;
use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use shaftpower::data::{
    load_noon_csv, load_sensor_csv, preprocess, DropReport, NoonReport, SensorRecord, SplitSpec,
};
use shaftpower::features::{build_features, standardize, FeatureMatrix, FeatureOptions, TargetScaler};
use shaftpower::metrics::{MetricsReport, NmaeDenominator};
use shaftpower::model::ShaftPowerModel;
use shaftpower::nn::{init_params, MlpParams, DEFAULT_ARCHITECTURE};
use shaftpower::synth::{generate_fleet, write_fleet};
use shaftpower::trainer::{train, FreezeMask, TrainConfig, TrainReport};
use shaftpower::weather::{fuse, load_grid, WeatherGrid};
use shaftpower::{Error, ErrorKind};

use crate::config::{CatalogEntry, ExperimentConfig, TlTargetScaling};

/// A failure tagged with where it happened.
#[derive(Debug)]
pub struct StageError {
    pub stage: &'static str,
    pub vessel: Option<String>,
    pub seed: Option<u64>,
    pub source: Error,
}

impl StageError {
    pub fn new(stage: &'static str, source: Error) -> Self {
        Self {
            stage,
            vessel: None,
            seed: None,
            source,
        }
    }

    pub fn vessel(mut self, id: &str) -> Self {
        self.vessel = Some(id.to_string());
        self
    }

    pub fn seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    /// Process exit status for this failure.
    pub fn exit_code(&self) -> i32 {
        match self.source.kind() {
            ErrorKind::Config => 2,
            ErrorKind::Data => 3,
            ErrorKind::Numerical => 4,
        }
    }
}

impl fmt::Display for StageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "stage `{}` failed", self.stage)?;
        match (&self.vessel, self.seed) {
            (Some(v), Some(s)) => write!(f, " (vessel {v}, seed {s})")?,
            (Some(v), None) => write!(f, " (vessel {v})")?,
            (None, Some(s)) => write!(f, " (seed {s})")?,
            (None, None) => {}
        }
        write!(f, ": {}", self.source)
    }
}

impl std::error::Error for StageError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.source)
    }
}

pub type StageResult<T> = std::result::Result<T, StageError>;

/// Extension for tagging plain library errors with a stage.
pub trait AtStage<T> {
    fn at(self, stage: &'static str) -> StageResult<T>;
}

impl<T> AtStage<T> for shaftpower::Result<T> {
    fn at(self, stage: &'static str) -> StageResult<T> {
        self.map_err(|e| StageError::new(stage, e))
    }
}

/// Generates the configured synthetic fleet when the data directory has none.
pub fn ensure_data(cfg: &ExperimentConfig) -> StageResult<()> {
    if cfg.data_present() {
        return Ok(());
    }
    if !cfg.generate_if_missing {
        return Err(StageError::new(
            "load",
            Error::Data(format!("no fleet manifest in {}", cfg.data_dir.display())),
        ));
    }
    log::info!("generating synthetic fleet into {}", cfg.data_dir.display());
    let fleet = generate_fleet(&cfg.synth).at("generate")?;
    write_fleet(&cfg.data_dir, &cfg.synth, &fleet).at("generate")?;
    Ok(())
}

/// Row counts and filter outcomes for one vessel.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VesselSummary {
    pub vessel_id: String,
    pub sensor_rows_raw: usize,
    pub sensor_ingest_rejects: usize,
    pub sensor_fuse_rejects: usize,
    pub sensor_drops: DropReport,
    pub sensor_train_rows: usize,
    pub sensor_test_rows: usize,
    pub noon_rows_raw: usize,
    pub noon_ingest_rejects: usize,
    pub noon_drops: DropReport,
    pub noon_feature_rejects: usize,
    pub noon_train_rows: usize,
    pub noon_test_rows: usize,
}

/// Feature matrices for one vessel, split in time.
#[derive(Debug, Clone)]
pub struct VesselData {
    pub entry: CatalogEntry,
    pub sensor_train: FeatureMatrix,
    pub sensor_test: FeatureMatrix,
    pub noon_train: FeatureMatrix,
    pub noon_test: FeatureMatrix,
    pub summary: VesselSummary,
}

/// Loads the weather grid, naming the fuse stage on failure.
pub fn load_weather(cfg: &ExperimentConfig) -> StageResult<WeatherGrid> {
    load_grid(&cfg.grid_path()).at("fuse")
}

/// Reads the raw sensor file and attaches weather from `grid`.
pub fn load_fused_sensor(
    cfg: &ExperimentConfig,
    entry: &CatalogEntry,
    grid: &WeatherGrid,
) -> StageResult<(Vec<SensorRecord>, usize, usize, usize)> {
    let id = entry.vessel_id.as_str();
    let raw = load_sensor_csv(&cfg.data_dir.join(&entry.sensor_file)).map_err(|e| StageError::new("load", e).vessel(id))?;
    for w in &raw.warnings {
        log::warn!("{id}: {w}");
    }
    let n_raw = raw.records.len() + raw.rejects.len();
    let n_ingest = raw.rejects.len();
    let outcome = fuse(raw.records, grid).map_err(|e| StageError::new("fuse", e).vessel(id))?;
    if !outcome.rejects.is_empty() {
        log::warn!("{id}: {} sensor rows fall outside the weather grid", outcome.rejects.len());
    }
    Ok((outcome.fused, n_raw, n_ingest, outcome.rejects.len()))
}

fn split_matrix(m: FeatureMatrix, split: SplitSpec, id: &str, what: &str) -> StageResult<(FeatureMatrix, FeatureMatrix)> {
    let (train, test) = m.split_at_time(split.train_end);
    if train.len() < 2 || test.is_empty() {
        return Err(StageError::new(
            "split",
            Error::Config(format!(
                "{what} split leaves {} train / {} test rows",
                train.len(),
                test.len()
            )),
        )
        .vessel(id));
    }
    Ok((train, test))
}

pub fn feature_options(cfg: &ExperimentConfig) -> FeatureOptions {
    FeatureOptions {
        encode_directions: cfg.encode_directions,
    }
}

/// Load, fuse, filter, featurize and split one vessel.
pub fn load_vessel(cfg: &ExperimentConfig, entry: &CatalogEntry, grid: &WeatherGrid) -> StageResult<VesselData> {
    let id = entry.vessel_id.as_str();
    let split = SplitSpec::at_date(cfg.split_date);
    let options = feature_options(cfg);

    let (fused, sensor_rows_raw, sensor_ingest_rejects, sensor_fuse_rejects) = load_fused_sensor(cfg, entry, grid)?;
    let sensor = preprocess(fused, &cfg.preprocess);
    let (sensor_m, _) = build_features(&sensor.kept, options).map_err(|e| StageError::new("features", e).vessel(id))?;
    let (sensor_train, sensor_test) = split_matrix(sensor_m, split, id, "sensor")?;

    let noon_raw = load_noon_csv(&cfg.data_dir.join(&entry.noon_file)).map_err(|e| StageError::new("load", e).vessel(id))?;
    let noon_rows_raw = noon_raw.records.len() + noon_raw.rejects.len();
    let noon_ingest_rejects = noon_raw.rejects.len();
    let noon = preprocess::<NoonReport>(noon_raw.records, &cfg.preprocess);
    let (noon_m, noon_rejects) = build_features(&noon.kept, options).map_err(|e| StageError::new("features", e).vessel(id))?;
    let (noon_train, noon_test) = split_matrix(noon_m, split, id, "noon")?;

    let summary = VesselSummary {
        vessel_id: id.to_string(),
        sensor_rows_raw,
        sensor_ingest_rejects,
        sensor_fuse_rejects,
        sensor_drops: sensor.report,
        sensor_train_rows: sensor_train.len(),
        sensor_test_rows: sensor_test.len(),
        noon_rows_raw,
        noon_ingest_rejects,
        noon_drops: noon.report,
        noon_feature_rejects: noon_rejects.len(),
        noon_train_rows: noon_train.len(),
        noon_test_rows: noon_test.len(),
    };
    log::info!(
        "{id}: sensor {}/{} noon {}/{} (train/test)",
        summary.sensor_train_rows,
        summary.sensor_test_rows,
        summary.noon_train_rows,
        summary.noon_test_rows
    );
    Ok(VesselData {
        entry: entry.clone(),
        sensor_train,
        sensor_test,
        noon_train,
        noon_test,
        summary,
    })
}

/// SHA-256 over the exact rows, targets and timestamps a model was trained on.
pub fn split_checksum(m: &FeatureMatrix) -> String {
    let mut h = Sha256::new();
    for (i, row) in m.rows.outer_iter().enumerate() {
        h.update(m.timestamps[i].to_le_bytes());
        for v in row {
            h.update(v.to_bits().to_le_bytes());
        }
        h.update(m.targets[i].to_bits().to_le_bytes());
    }
    hex::encode(h.finalize())
}

/// Trains a network on raw (unstandardized) `data` with the given scaling.
fn fit(
    init: &MlpParams,
    data: &FeatureMatrix,
    model_template: ShaftPowerModel,
    config: &TrainConfig,
    mask: &FreezeMask,
) -> shaftpower::Result<(ShaftPowerModel, TrainReport)> {
    let z = model_template.prepare(data)?;
    let scaler = model_template.target_scaler;
    let z = z.with_targets(z.targets.iter().map(|&y| scaler.scale(y)).collect());
    let (params, report) = train(init, &z, config, mask)?;
    Ok((
        ShaftPowerModel {
            params,
            ..model_template
        },
        report,
    ))
}

/// A fresh network fitted to `train` with its own feature and target scaling.
pub fn train_from_scratch(
    train_data: &FeatureMatrix,
    options: FeatureOptions,
    config: &TrainConfig,
    tag: String,
) -> shaftpower::Result<(ShaftPowerModel, TrainReport)> {
    let stats = standardize(train_data)?.standardization.expect("set by standardize");
    let mut dims = DEFAULT_ARCHITECTURE;
    dims[0] = options.width();
    let init = init_params(&dims, config.seed)?;
    let template = ShaftPowerModel {
        params: init.clone(),
        feature_stats: stats,
        target_scaler: TargetScaler::fit(&train_data.targets)?,
        options,
        seed: config.seed,
        trained_on: tag,
    };
    fit(&init, train_data, template, config, &FreezeMask::all_trainable(dims.len() - 1))
}

/// Head-only fine-tuning of `base` on a target vessel's noon train split.
/// Input scaling always comes from `base`, since the frozen layers expect it.
pub fn fine_tune_model(
    base: &ShaftPowerModel,
    noon_train: &FeatureMatrix,
    config: &TrainConfig,
    scaling: TlTargetScaling,
    tag: String,
) -> shaftpower::Result<(ShaftPowerModel, TrainReport)> {
    let target_scaler = match scaling {
        TlTargetScaling::Refit => TargetScaler::fit(&noon_train.targets)?,
        TlTargetScaling::Source => base.target_scaler,
    };
    let template = ShaftPowerModel {
        target_scaler,
        seed: config.seed,
        trained_on: tag,
        ..base.clone()
    };
    fit(
        &base.params,
        noon_train,
        template,
        config,
        &FreezeMask::head_only(base.params.num_layers()),
    )
}

/// Metrics on `test` plus the predictions they were computed from.
pub fn evaluate(
    model: &ShaftPowerModel,
    test: &FeatureMatrix,
    denominator: NmaeDenominator,
) -> shaftpower::Result<(MetricsReport, Vec<f64>)> {
    if test.width() != model.params.input_dim() {
        return Err(Error::Config(format!(
            "model expects {} features, data has {} (check encode_directions)",
            model.params.input_dim(),
            test.width()
        )));
    }
    let pred = model.predict_kw(test)?;
    Ok((MetricsReport::evaluate(&test.targets, &pred, denominator)?, pred))
}

/// Source vessel with the lowest sensor-test MAPE; ties go to lower NMAE, then to the smaller id.
pub fn select_base_vessel(reports: &[(String, MetricsReport)]) -> shaftpower::Result<String> {
    reports
        .iter()
        .min_by(|a, b| {
            a.1.mape
                .total_cmp(&b.1.mape)
                .then(a.1.nmae.total_cmp(&b.1.nmae))
                .then(a.0.cmp(&b.0))
        })
        .map(|r| r.0.clone())
        .ok_or_else(|| Error::Config("no vessels to choose a base model from".into()))
}

pub fn checkpoint_name(arm: &str, vessel: &str, seed: u64) -> String {
    format!("{arm}_{vessel}_seed{seed}.json")
}

pub fn report_name(arm: &str, vessel: &str, seed: u64) -> String {
    format!("{arm}_{vessel}_seed{seed}.report.json")
}

pub fn ensure_dir(path: &Path) -> shaftpower::Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(mape: f64, nmae: f64) -> MetricsReport {
        MetricsReport {
            mae: 1.0,
            nmae,
            mape,
            r2: 0.9,
            n: 10,
        }
    }

    #[test]
    fn base_selection() {
        let r = |id: &str, mape, nmae| (id.to_string(), report(mape, nmae));
        assert_eq!(select_base_vessel(&[r("A", 3.5, 0.1), r("B", 16.2, 0.1)]).unwrap(), "A");
        assert_eq!(select_base_vessel(&[r("A", 3.5, 0.05), r("B", 3.5, 0.02)]).unwrap(), "B");
        assert_eq!(select_base_vessel(&[r("B", 3.5, 0.02), r("A", 3.5, 0.02)]).unwrap(), "A");
        assert_eq!(select_base_vessel(&[r("Z", 9.0, 0.5)]).unwrap(), "Z");
        assert!(select_base_vessel(&[]).is_err());
    }

    #[test]
    fn stage_error_display_and_codes() {
        let e = StageError::new("fuse", Error::Data("gone".into())).vessel("V1").seed(3);
        assert_eq!(e.to_string(), "stage `fuse` failed (vessel V1, seed 3): data error: gone");
        assert_eq!(e.exit_code(), 3);
        assert_eq!(StageError::new("x", Error::Config("c".into())).exit_code(), 2);
        assert_eq!(
            StageError::new(
                "x",
                Error::NonFiniteLoss {
                    epoch: 1,
                    message: "nan".into()
                }
            )
            .exit_code(),
            4
        );
    }
}
