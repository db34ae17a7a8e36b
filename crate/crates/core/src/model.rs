//! A trained regressor bundled with its input and target scaling, plus the
//! JSON checkpoint format.

use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{apply_standardization, FeatureMatrix, FeatureOptions, Standardization, TargetScaler};
use crate::nn::{predict_batch, MlpParams};
use crate::numfmt::{read_json, to_json_pretty, write_json};
use crate::trainer::TrainReport;

/// Network plus everything needed to map raw features to kilowatts.
#[derive(Debug, Clone, PartialEq)]
pub struct ShaftPowerModel {
    pub params: MlpParams,
    pub feature_stats: Standardization,
    pub target_scaler: TargetScaler,
    pub options: FeatureOptions,
    pub seed: u64,
    /// Free-form provenance tag, e.g. `"sensor:SIS1"`.
    pub trained_on: String,
}

impl ShaftPowerModel {
    /// Scales raw features with the stored statistics.
    pub fn prepare(&self, raw: &FeatureMatrix) -> Result<FeatureMatrix> {
        apply_standardization(raw, &self.feature_stats)
    }

    /// Predicted shaft power (kW) for unstandardized feature rows.
    pub fn predict_kw(&self, raw: &FeatureMatrix) -> Result<Vec<f64>> {
        let z = self.prepare(raw)?;
        Ok(predict_batch(&self.params, z.rows.view())?
            .into_iter()
            .map(|y| self.target_scaler.unscale(y))
            .collect())
    }
}

/// On-disk checkpoint. Weights are row-major per layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub layer_dims: Vec<usize>,
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
    pub feature_means: Vec<f64>,
    pub feature_stds: Vec<f64>,
    #[serde(default)]
    pub target_mean: f64,
    #[serde(default = "one")]
    pub target_std: f64,
    #[serde(default)]
    pub encode_directions: bool,
    pub seed: u64,
    pub trained_on: String,
}

fn one() -> f64 {
    1.0
}

impl From<&ShaftPowerModel> for Checkpoint {
    fn from(m: &ShaftPowerModel) -> Self {
        Checkpoint {
            layer_dims: m.params.layer_dims().to_vec(),
            weights: m.params.weights().iter().map(|w| w.iter().copied().collect()).collect(),
            biases: m.params.biases().iter().map(|b| b.to_vec()).collect(),
            feature_means: m.feature_stats.means.clone(),
            feature_stds: m.feature_stats.stds.clone(),
            target_mean: m.target_scaler.mean,
            target_std: m.target_scaler.std,
            encode_directions: m.options.encode_directions,
            seed: m.seed,
            trained_on: m.trained_on.clone(),
        }
    }
}

impl TryFrom<Checkpoint> for ShaftPowerModel {
    type Error = Error;

    fn try_from(c: Checkpoint) -> Result<Self> {
        if c.layer_dims.len() < 2 || c.weights.len() != c.layer_dims.len() - 1 {
            return Err(Error::Data(format!(
                "checkpoint has {} weight matrices for layer_dims {:?}",
                c.weights.len(),
                c.layer_dims
            )));
        }
        let weights = c
            .weights
            .into_iter()
            .zip(c.layer_dims.windows(2))
            .map(|(w, d)| {
                Array2::from_shape_vec((d[1], d[0]), w)
                    .map_err(|e| Error::Data(format!("checkpoint weights: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let biases = c.biases.into_iter().map(Array1::from).collect();
        let params = MlpParams::from_parts(weights, biases)?;
        if params.layer_dims() != c.layer_dims.as_slice() {
            return Err(Error::Data("checkpoint layer_dims disagree with tensors".into()));
        }
        let options = FeatureOptions {
            encode_directions: c.encode_directions,
        };
        if c.feature_means.len() != params.input_dim() || c.feature_stds.len() != params.input_dim() {
            return Err(Error::Data("checkpoint feature statistics do not match the input width".into()));
        }
        if !(c.target_std > 0.0) {
            return Err(Error::Data("checkpoint target_std must be positive".into()));
        }
        Ok(ShaftPowerModel {
            params,
            feature_stats: Standardization {
                means: c.feature_means,
                stds: c.feature_stds,
            },
            target_scaler: TargetScaler {
                mean: c.target_mean,
                std: c.target_std,
            },
            options,
            seed: c.seed,
            trained_on: c.trained_on,
        })
    }
}

pub fn checkpoint_bytes(model: &ShaftPowerModel) -> Vec<u8> {
    to_json_pretty(&Checkpoint::from(model)).expect("checkpoint serializes")
}

pub fn save_checkpoint(path: &Path, model: &ShaftPowerModel) -> Result<()> {
    write_json(path, &Checkpoint::from(model), true)
}

pub fn load_checkpoint(path: &Path) -> Result<ShaftPowerModel> {
    let c: Checkpoint = read_json(path)?;
    ShaftPowerModel::try_from(c)
}

pub fn save_train_report(path: &Path, report: &TrainReport) -> Result<()> {
    write_json(path, report, true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{init_params, DEFAULT_ARCHITECTURE};

    fn model() -> ShaftPowerModel {
        ShaftPowerModel {
            params: init_params(&DEFAULT_ARCHITECTURE, 17).unwrap(),
            feature_stats: Standardization {
                means: vec![12.1, 75.0, 9.5, 2.0, 1.0, 180.0, 180.0],
                stds: vec![1.3, 5.0, 1.1, 0.7, 0.4, 100.0, 101.5],
            },
            target_scaler: TargetScaler { mean: 6123.4, std: 1500.1 },
            options: FeatureOptions::default(),
            seed: 17,
            trained_on: "sensor:TEST".into(),
        }
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        let m = model();
        save_checkpoint(&path, &m).unwrap();
        let first = std::fs::read(&path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded, m);
        save_checkpoint(&path, &loaded).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), first);
    }

    #[test]
    fn corrupt_shapes_rejected() {
        let mut c = Checkpoint::from(&model());
        c.weights[1].pop();
        assert!(ShaftPowerModel::try_from(c).is_err());
        let mut c = Checkpoint::from(&model());
        c.feature_stds.pop();
        assert!(ShaftPowerModel::try_from(c).is_err());
    }
}
