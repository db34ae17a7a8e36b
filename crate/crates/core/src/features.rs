//! Design-matrix construction, Pearson screening, and train-set standardization.

use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::data::{NoonReport, SensorRecord, Timestamped};
use crate::error::{Error, Result};
use crate::numfmt::format_f64;

/// Raw feature columns, in model-input order.
pub const FEATURE_NAMES: [&str; 7] = [
    "stw_knots",
    "rpm",
    "draft_mid_m",
    "wave_height_m",
    "swell_height_m",
    "wave_dir_rel_deg",
    "wind_dir_rel_deg",
];

/// Columns holding course-relative directions.
const DIRECTION_COLUMNS: [usize; 2] = [5, 6];

/// A source of one feature row plus its target.
pub trait FeatureSource: Timestamped {
    /// The seven raw features, or the name of the first missing field.
    fn raw_features(&self) -> Result<[f64; 7], &'static str>;
    fn target_kw(&self) -> f64;
}

impl FeatureSource for SensorRecord {
    fn raw_features(&self) -> Result<[f64; 7], &'static str> {
        let w = self.weather.ok_or("wave_height_m")?;
        Ok([
            self.stw_knots,
            self.rpm,
            0.5 * (self.draft_aft_m + self.draft_fore_m),
            w.wave_height_m,
            w.swell_height_m,
            w.wave_dir_rel_deg,
            w.wind_dir_rel_deg,
        ])
    }

    fn target_kw(&self) -> f64 {
        self.shaft_power_kw
    }
}

impl FeatureSource for NoonReport {
    fn raw_features(&self) -> Result<[f64; 7], &'static str> {
        Ok([
            self.stw_knots,
            self.rpm,
            0.5 * (self.draft_aft_m + self.draft_fore_m),
            self.wave_height_m.ok_or("wave_height_m")?,
            self.swell_height_m.ok_or("swell_height_m")?,
            self.wave_dir_rel_deg.ok_or("wave_dir_rel_deg")?,
            self.wind_dir_rel_deg.ok_or("wind_dir_rel_deg")?,
        ])
    }

    fn target_kw(&self) -> f64 {
        self.shaft_power_kw
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureOptions {
    /// Replace each direction column by its sine and cosine.
    pub encode_directions: bool,
}

impl FeatureOptions {
    pub fn column_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for (i, name) in FEATURE_NAMES.iter().enumerate() {
            if self.encode_directions && DIRECTION_COLUMNS.contains(&i) {
                names.push(format!("{name}_sin"));
                names.push(format!("{name}_cos"));
            } else {
                names.push(name.to_string());
            }
        }
        names
    }

    pub fn width(&self) -> usize {
        if self.encode_directions {
            FEATURE_NAMES.len() + DIRECTION_COLUMNS.len()
        } else {
            FEATURE_NAMES.len()
        }
    }
}

/// Column means and (population) standard deviations fitted on training rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
}

/// Design matrix with targets and time tags.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub rows: Array2<f64>,
    /// Shaft power in kW (or a scaled version of it, see [`TargetScaler`]).
    pub targets: Vec<f64>,
    pub timestamps: Vec<i64>,
    pub column_names: Vec<String>,
    pub standardization: Option<Standardization>,
}

impl FeatureMatrix {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn width(&self) -> usize {
        self.rows.ncols()
    }

    pub fn is_standardized(&self) -> bool {
        self.standardization.is_some()
    }

    /// Rows `range`, keeping column names and statistics.
    pub fn slice_rows(&self, range: std::ops::Range<usize>) -> FeatureMatrix {
        FeatureMatrix {
            rows: self.rows.slice(ndarray::s![range.clone(), ..]).to_owned(),
            targets: self.targets[range.clone()].to_vec(),
            timestamps: self.timestamps[range].to_vec(),
            column_names: self.column_names.clone(),
            standardization: self.standardization.clone(),
        }
    }

    /// Rows with timestamp `< boundary` and `>= boundary`; rows must be time-ordered.
    pub fn split_at_time(&self, boundary: i64) -> (FeatureMatrix, FeatureMatrix) {
        let cut = self.timestamps.partition_point(|&t| t < boundary);
        (self.slice_rows(0..cut), self.slice_rows(cut..self.len()))
    }

    pub fn with_targets(&self, targets: Vec<f64>) -> FeatureMatrix {
        FeatureMatrix {
            targets,
            ..self.clone()
        }
    }
}

/// A source row that could not become a feature row.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FeatureReject {
    pub index: usize,
    pub reason: String,
}

pub fn build_features<R: FeatureSource>(
    records: &[R],
    options: FeatureOptions,
) -> Result<(FeatureMatrix, Vec<FeatureReject>)> {
    let width = options.width();
    let mut flat = Vec::with_capacity(records.len() * width);
    let mut targets = Vec::with_capacity(records.len());
    let mut timestamps = Vec::with_capacity(records.len());
    let mut rejects = Vec::new();
    for (index, r) in records.iter().enumerate() {
        let raw = match r.raw_features() {
            Ok(raw) => raw,
            Err(field) => {
                rejects.push(FeatureReject {
                    index,
                    reason: field.to_string(),
                });
                continue;
            }
        };
        for (i, &v) in raw.iter().enumerate() {
            if options.encode_directions && DIRECTION_COLUMNS.contains(&i) {
                let rad = v.to_radians();
                flat.push(rad.sin());
                flat.push(rad.cos());
            } else {
                flat.push(v);
            }
        }
        targets.push(r.target_kw());
        timestamps.push(r.timestamp());
    }
    if targets.is_empty() {
        return Err(Error::Data(format!(
            "no usable feature rows ({} rejected)",
            rejects.len()
        )));
    }
    let rows = Array2::from_shape_vec((targets.len(), width), flat).expect("row-major buffer");
    Ok((
        FeatureMatrix {
            rows,
            targets,
            timestamps,
            column_names: options.column_names(),
            standardization: None,
        },
        rejects,
    ))
}

/// Pearson correlation coefficient, clamped to `[-1, 1]`.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::Argument(format!(
            "pearson needs two equal-length vectors of at least 2 values (got {} and {})",
            x.len(),
            y.len()
        )));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Numerical(format!(
            "correlation undefined: zero variance in {}",
            if sxx == 0.0 { "x" } else { "y" }
        )));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorrelationReport {
    pub entries: Vec<(String, f64)>,
}

/// Pearson r of every column against the target. Constant columns are skipped
/// with a warning rather than reported as zero.
pub fn correlation_report(matrix: &FeatureMatrix) -> Result<CorrelationReport> {
    let mut entries = Vec::new();
    for (j, name) in matrix.column_names.iter().enumerate() {
        let col = matrix.rows.column(j).to_vec();
        match pearson(&col, &matrix.targets) {
            Ok(r) => entries.push((name.clone(), r)),
            Err(Error::Numerical(msg)) => log::warn!("skipping {name}: {msg}"),
            Err(e) => return Err(e),
        }
    }
    Ok(CorrelationReport { entries })
}

pub fn write_correlations_csv(path: &Path, report: &CorrelationReport) -> Result<()> {
    let mut text = String::from("feature,r\n");
    for (name, r) in &report.entries {
        text.push_str(&format!("{name},{}\n", format_f64(*r)));
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Fits per-column statistics on `matrix` and returns the z-scored copy.
pub fn standardize(matrix: &FeatureMatrix) -> Result<FeatureMatrix> {
    if matrix.is_standardized() {
        return Err(Error::Argument("matrix is already standardized".into()));
    }
    if matrix.len() < 2 {
        return Err(Error::Argument("standardization needs at least two rows".into()));
    }
    let means = matrix.rows.mean_axis(Axis(0)).expect("non-empty");
    let stds = matrix.rows.std_axis(Axis(0), 0.0);
    if let Some(j) = stds.iter().position(|&s| !(s > 0.0)) {
        return Err(Error::Numerical(format!(
            "column {} has zero variance",
            matrix.column_names[j]
        )));
    }
    apply_standardization(
        matrix,
        &Standardization {
            means: means.to_vec(),
            stds: stds.to_vec(),
        },
    )
}

/// `(x - mean) / std` per column with previously fitted statistics.
pub fn apply_standardization(matrix: &FeatureMatrix, stats: &Standardization) -> Result<FeatureMatrix> {
    if matrix.is_standardized() {
        return Err(Error::Argument("matrix is already standardized".into()));
    }
    let w = matrix.width();
    if stats.means.len() != w || stats.stds.len() != w {
        return Err(Error::Shape(format!(
            "statistics cover {} / {} columns, matrix has {w}",
            stats.means.len(),
            stats.stds.len()
        )));
    }
    if stats.stds.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::Argument("standard deviations must be positive".into()));
    }
    let means = Array1::from(stats.means.clone());
    let stds = Array1::from(stats.stds.clone());
    Ok(FeatureMatrix {
        rows: (&matrix.rows - &means) / &stds,
        standardization: Some(stats.clone()),
        ..matrix.clone()
    })
}

/// Maps standardized rows back to raw units.
pub fn invert_standardization(matrix: &FeatureMatrix) -> Result<FeatureMatrix> {
    let stats = matrix
        .standardization
        .as_ref()
        .ok_or_else(|| Error::Argument("matrix is not standardized".into()))?;
    let means = Array1::from(stats.means.clone());
    let stds = Array1::from(stats.stds.clone());
    Ok(FeatureMatrix {
        rows: &matrix.rows * &stds + &means,
        standardization: None,
        ..matrix.clone()
    })
}

/// Affine target scaling `(y - mean) / std`, fitted on training targets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetScaler {
    pub mean: f64,
    pub std: f64,
}

impl TargetScaler {
    pub const IDENTITY: TargetScaler = TargetScaler { mean: 0.0, std: 1.0 };

    pub fn fit(targets: &[f64]) -> Result<Self> {
        let stats = crate::metrics::MeanSd::of(targets)?;
        if !(stats.sd > 0.0) {
            return Err(Error::Numerical("targets are constant; cannot scale".into()));
        }
        Ok(Self {
            mean: stats.mean,
            std: stats.sd,
        })
    }

    pub fn scale(&self, y: f64) -> f64 {
        (y - self.mean) / self.std
    }

    pub fn unscale(&self, y: f64) -> f64 {
        y * self.std + self.mean
    }
}
