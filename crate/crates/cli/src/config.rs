//! Experiment configuration, read from JSON and overridable from the command line.

use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use shaftpower::data::{PreprocessConfig, VesselCategory};
use shaftpower::metrics::NmaeDenominator;
use shaftpower::numfmt::read_json;
use shaftpower::synth::{FleetConfig, FleetManifest, VesselRole, FLEET_MANIFEST, GRID_FILE};
use shaftpower::trainer::TrainConfig;
use shaftpower::{Error, Result};

/// Partial [`TrainConfig`]; unset fields keep the recipe's value.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainOverrides {
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub initial_lr: Option<f64>,
    pub scheduler_factor: Option<f64>,
    pub scheduler_patience: Option<usize>,
    pub early_stop_patience: Option<usize>,
    pub min_lr: Option<f64>,
    pub validation_fraction: Option<f64>,
}

impl TrainOverrides {
    pub fn apply(&self, mut c: TrainConfig) -> TrainConfig {
        macro_rules! set {
            ($($f:ident),*) => { $( if let Some(v) = self.$f { c.$f = v; } )* };
        }
        set!(epochs, batch_size, initial_lr, scheduler_factor, scheduler_patience, early_stop_patience, min_lr, validation_fraction);
        c
    }
}

/// How the fine-tuned model maps network output back to kilowatts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TlTargetScaling {
    /// Refit mean/SD on the target vessel's noon train split.
    #[default]
    Refit,
    /// Keep the source model's sensor-data scaling.
    Source,
}

/// One vessel's data files, relative to the data directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CatalogEntry {
    pub vessel_id: String,
    pub category: VesselCategory,
    pub role: VesselRole,
    pub sensor_file: PathBuf,
    pub noon_file: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    /// Defaults to `weather_grid.json` inside `data_dir`.
    pub grid_file: Option<PathBuf>,
    /// Vessel list; read from the data directory's fleet manifest when absent.
    pub catalog: Option<Vec<CatalogEntry>>,
    /// Restrict every stage to these vessels.
    pub vessels: Option<Vec<String>>,
    pub seeds: Vec<u64>,
    /// First day of the test period.
    pub split_date: NaiveDate,
    pub preprocess: PreprocessConfig,
    pub baseline: TrainOverrides,
    pub fine_tune: TrainOverrides,
    /// Applied on top of the baseline recipe with batch size 16.
    pub scratch: TrainOverrides,
    pub reinit_head: bool,
    pub encode_directions: bool,
    pub nmae_denominator: NmaeDenominator,
    pub tl_target_scaling: TlTargetScaling,
    /// Generate the synthetic fleet into `data_dir` when no data is there.
    pub generate_if_missing: bool,
    pub synth: FleetConfig,
    /// Save checkpoints for every seed rather than only the first.
    pub checkpoint_all_seeds: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("out"),
            grid_file: None,
            catalog: None,
            vessels: None,
            seeds: (0..10).collect(),
            split_date: NaiveDate::from_ymd_opt(2024, 1, 1).expect("valid date"),
            preprocess: PreprocessConfig::default(),
            baseline: TrainOverrides::default(),
            fine_tune: TrainOverrides::default(),
            scratch: TrainOverrides::default(),
            reinit_head: false,
            encode_directions: false,
            nmae_denominator: NmaeDenominator::Range,
            tl_target_scaling: TlTargetScaling::Refit,
            generate_if_missing: true,
            synth: FleetConfig::default(),
            checkpoint_all_seeds: false,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let cfg: Self = read_json(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("seed list is empty".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        if let Some(dup) = self.seeds.iter().find(|s| !seen.insert(**s)) {
            return Err(Error::Config(format!("seed {dup} listed twice")));
        }
        if matches!(&self.vessels, Some(v) if v.is_empty()) {
            return Err(Error::Config("vessel selection is empty".into()));
        }
        self.baseline_config(0).validate()?;
        self.fine_tune_config(0).validate()?;
        self.scratch_config(0).validate()
    }

    pub fn grid_path(&self) -> PathBuf {
        self.grid_file.clone().unwrap_or_else(|| self.data_dir.join(GRID_FILE))
    }

    pub fn baseline_config(&self, seed: u64) -> TrainConfig {
        self.baseline.apply(TrainConfig::baseline(seed))
    }

    pub fn fine_tune_config(&self, seed: u64) -> TrainConfig {
        let mut c = self.fine_tune.apply(TrainConfig::fine_tune(seed));
        c.reinit_head = self.reinit_head;
        c
    }

    /// From-scratch noon models: the baseline recipe at the noon batch size.
    pub fn scratch_config(&self, seed: u64) -> TrainConfig {
        self.scratch.apply(TrainConfig {
            batch_size: 16,
            ..TrainConfig::baseline(seed)
        })
    }

    /// Vessel catalog, honoring the selection filter.
    pub fn resolve_catalog(&self) -> Result<Vec<CatalogEntry>> {
        let all = match &self.catalog {
            Some(c) => c.clone(),
            None => {
                let manifest: FleetManifest = read_json(&self.data_dir.join(FLEET_MANIFEST))?;
                manifest
                    .vessels
                    .into_iter()
                    .map(|v| CatalogEntry {
                        vessel_id: v.spec.vessel_id,
                        category: v.spec.category,
                        role: v.role,
                        sensor_file: v.sensor_file.into(),
                        noon_file: v.noon_file.into(),
                    })
                    .collect()
            }
        };
        let Some(selection) = &self.vessels else {
            return Ok(all);
        };
        for id in selection {
            if !all.iter().any(|e| &e.vessel_id == id) {
                return Err(Error::Config(format!("vessel {id} is not in the catalog")));
            }
        }
        Ok(all.into_iter().filter(|e| selection.contains(&e.vessel_id)).collect())
    }

    pub fn data_present(&self) -> bool {
        self.catalog.is_some() || self.data_dir.join(FLEET_MANIFEST).exists()
    }
}

/// Parses `"3"`, `"0,2,5"` or `"0-9"`.
pub fn parse_seed_list(s: &str) -> Result<Vec<u64>> {
    let bad = || Error::Config(format!("cannot parse seed list {s:?}"));
    let mut out = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        match part.split_once('-') {
            Some((a, b)) => {
                let (a, b): (u64, u64) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
                if b < a {
                    return Err(bad());
                }
                out.extend(a..=b);
            }
            None => out.push(part.parse().map_err(|_| bad())?),
        }
    }
    if out.is_empty() {
        return Err(bad());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_lists() {
        assert_eq!(parse_seed_list("3").unwrap(), vec![3]);
        assert_eq!(parse_seed_list("0,2, 5").unwrap(), vec![0, 2, 5]);
        assert_eq!(parse_seed_list("0-3").unwrap(), vec![0, 1, 2, 3]);
        assert!(parse_seed_list("").is_err());
        assert!(parse_seed_list("4-1").is_err());
        assert!(parse_seed_list("x").is_err());
    }

    #[test]
    fn defaults_follow_the_recipes() {
        let c = ExperimentConfig::default();
        assert_eq!(c.seeds, (0..10).collect::<Vec<_>>());
        assert_eq!(c.baseline_config(4), TrainConfig::baseline(4));
        assert_eq!(c.fine_tune_config(4), TrainConfig::fine_tune(4));
        let s = c.scratch_config(4);
        assert_eq!((s.batch_size, s.initial_lr), (16, 1e-3));
    }

    #[test]
    fn overrides_and_validation() {
        let json = r#"{"seeds": [1, 2], "baseline": {"epochs": 7}, "reinit_head": true}"#;
        let c: ExperimentConfig = serde_json::from_str(json).unwrap();
        assert_eq!(c.baseline_config(0).epochs, 7);
        assert!(c.fine_tune_config(0).reinit_head);
        c.validate().unwrap();
        let empty = ExperimentConfig {
            seeds: vec![],
            ..ExperimentConfig::default()
        };
        assert!(matches!(empty.validate(), Err(Error::Config(_))));
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"sedes": [1]}"#).is_err());
        let bad_lr: ExperimentConfig = serde_json::from_str(r#"{"fine_tune": {"initial_lr": -1.0}}"#).unwrap();
        assert!(bad_lr.validate().is_err());
    }
}
