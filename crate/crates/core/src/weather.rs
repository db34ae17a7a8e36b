//! Met-ocean grid fusion: trilinear interpolation over a regular
//! time × lat × lon lattice and conversion of north-referenced directions to
//! course-relative ones.
//!
//! Direction fields (names ending in `_deg`) are interpolated through their
//! unit-vector components and recomposed with `atan2`, so the 359° → 1° wrap
//! blends to 0° rather than 180°. Queries outside the lattice are errors;
//! there is no extrapolation.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::data::{format_timestamp, parse_timestamp, SensorRecord, WeatherAttachment};
use crate::error::{Axis, Error, Result};
use crate::numfmt::{read_json, write_json};

pub const WAVE_HEIGHT_FIELD: &str = "wave_height_m";
pub const SWELL_HEIGHT_FIELD: &str = "swell_height_m";
pub const WAVE_DIR_FIELD: &str = "wave_dir_north_deg";
pub const WIND_DIR_FIELD: &str = "wind_dir_north_deg";

/// Fields [`fuse`] needs.
pub const REQUIRED_FIELDS: [&str; 4] = [WAVE_HEIGHT_FIELD, SWELL_HEIGHT_FIELD, WAVE_DIR_FIELD, WIND_DIR_FIELD];

pub fn is_direction_field(name: &str) -> bool {
    name.ends_with("_deg")
}

/// `(a - b) mod 360`, always in `[0, 360)`.
pub fn relative_direction(dir_north_deg: f64, course_deg: f64) -> f64 {
    let r = (dir_north_deg - course_deg).rem_euclid(360.0);
    // rem_euclid can round up to exactly 360 for tiny negative inputs
    if r >= 360.0 {
        0.0
    } else {
        r
    }
}

fn normalize_deg(d: f64) -> f64 {
    relative_direction(d, 0.0)
}

/// Mean direction of unit vectors, in `[0, 360)`. `None` when the vectors cancel.
pub fn circular_mean(degrees: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (mut s, mut c, mut n) = (0.0, 0.0, 0usize);
    for d in degrees {
        let r = d.to_radians();
        s += r.sin();
        c += r.cos();
        n += 1;
    }
    if n == 0 || (s * s + c * c).sqrt() < 1e-12 * n as f64 {
        return None;
    }
    Some(normalize_deg(s.atan2(c).to_degrees()))
}

/// Regular lattice of named fields, each shaped `(time, lat, lon)`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeatherGrid {
    time_axis: Vec<i64>,
    lat_axis: Vec<f64>,
    lon_axis: Vec<f64>,
    fields: BTreeMap<String, Array3<f64>>,
}

fn check_axis(name: &str, axis: &[f64]) -> Result<()> {
    if axis.len() < 2 {
        return Err(Error::Config(format!("{name} axis needs at least two points")));
    }
    if axis.iter().any(|v| !v.is_finite()) || axis.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Config(format!("{name} axis must be finite and strictly increasing")));
    }
    Ok(())
}

impl WeatherGrid {
    pub fn new(
        time_axis: Vec<i64>,
        lat_axis: Vec<f64>,
        lon_axis: Vec<f64>,
        fields: BTreeMap<String, Array3<f64>>,
    ) -> Result<Self> {
        check_axis("time", &time_axis.iter().map(|&t| t as f64).collect::<Vec<_>>())?;
        check_axis("lat", &lat_axis)?;
        check_axis("lon", &lon_axis)?;
        let shape = (time_axis.len(), lat_axis.len(), lon_axis.len());
        for (name, data) in &fields {
            if data.dim() != shape {
                return Err(Error::Config(format!(
                    "field {name} has shape {:?}, axes imply {shape:?}",
                    data.dim()
                )));
            }
            if data.iter().any(|v| !v.is_finite()) {
                return Err(Error::Data(format!("field {name} contains NaN or Inf")));
            }
            if is_direction_field(name) && data.iter().any(|v| !(0.0..360.0).contains(v)) {
                return Err(Error::Data(format!("direction field {name} has values outside [0, 360)")));
            }
            if name.ends_with("_height_m") && data.iter().any(|&v| v < 0.0) {
                return Err(Error::Data(format!("height field {name} has negative values")));
            }
        }
        Ok(Self {
            time_axis,
            lat_axis,
            lon_axis,
            fields,
        })
    }

    pub fn time_axis(&self) -> &[i64] {
        &self.time_axis
    }

    pub fn lat_axis(&self) -> &[f64] {
        &self.lat_axis
    }

    pub fn lon_axis(&self) -> &[f64] {
        &self.lon_axis
    }

    pub fn field(&self, name: &str) -> Option<&Array3<f64>> {
        self.fields.get(name)
    }

    pub fn field_names(&self) -> impl Iterator<Item = &str> {
        self.fields.keys().map(String::as_str)
    }

    /// Errors naming the first of `names` the grid lacks.
    pub fn require_fields(&self, names: &[&str]) -> Result<()> {
        match names.iter().find(|n| !self.fields.contains_key(**n)) {
            Some(missing) => Err(Error::Config(format!("weather grid lacks required field {missing:?}"))),
            None => Ok(()),
        }
    }

    pub fn contains(&self, time: f64, lat: f64, lon: f64) -> bool {
        self.corners(time, lat, lon).is_ok()
    }

    /// Lower lattice indices and fractional offsets for a query point.
    fn corners(&self, time: f64, lat: f64, lon: f64) -> Result<[(usize, f64); 3]> {
        // offsets from the first time node keep the fractions well-conditioned
        let t = locate_time(&self.time_axis, time, self.time_axis[0])?;
        let la = locate(&self.lat_axis, lat, Axis::Lat)?;
        let lo = locate(&self.lon_axis, lon, Axis::Lon)?;
        Ok([t, la, lo])
    }

    /// Trilinear interpolation of `field` at (`time` seconds UTC, `lat`, `lon`).
    pub fn trilinear(&self, field: &str, time: f64, lat: f64, lon: f64) -> Result<f64> {
        let data = self
            .fields
            .get(field)
            .ok_or_else(|| Error::Config(format!("weather grid has no field {field:?}")))?;
        let corners = self.corners(time, lat, lon)?;
        if is_direction_field(field) {
            let s = blend(data, &corners, |d| d.to_radians().sin());
            let c = blend(data, &corners, |d| d.to_radians().cos());
            Ok(normalize_deg(s.atan2(c).to_degrees()))
        } else {
            Ok(blend(data, &corners, |v| v))
        }
    }
}

/// Free-function form of [`WeatherGrid::trilinear`].
pub fn trilinear(grid: &WeatherGrid, field: &str, time: f64, lat: f64, lon: f64) -> Result<f64> {
    grid.trilinear(field, time, lat, lon)
}

fn locate(axis: &[f64], v: f64, which: Axis) -> Result<(usize, f64)> {
    let (min, max) = (axis[0], axis[axis.len() - 1]);
    if !(v >= min && v <= max) {
        return Err(Error::OutOfDomain {
            axis: which,
            value: v,
            min,
            max,
        });
    }
    let i = (axis.partition_point(|&a| a <= v) - 1).min(axis.len() - 2);
    Ok((i, (v - axis[i]) / (axis[i + 1] - axis[i])))
}

fn locate_time(axis: &[i64], t: f64, origin: i64) -> Result<(usize, f64)> {
    let rel: f64 = t - origin as f64;
    let (min, max) = (0.0, (axis[axis.len() - 1] - origin) as f64);
    if !(rel >= min && rel <= max) {
        return Err(Error::OutOfDomain {
            axis: Axis::Time,
            value: t,
            min: axis[0] as f64,
            max: axis[axis.len() - 1] as f64,
        });
    }
    let i = (axis.partition_point(|&a| ((a - origin) as f64) <= rel) - 1).min(axis.len() - 2);
    let lo = (axis[i] - origin) as f64;
    let hi = (axis[i + 1] - origin) as f64;
    Ok((i, (rel - lo) / (hi - lo)))
}

/// Weighted sum of the eight surrounding nodes after mapping each through `f`.
fn blend(data: &Array3<f64>, corners: &[(usize, f64); 3], f: impl Fn(f64) -> f64) -> f64 {
    let [(it, ft), (ila, fla), (ilo, flo)] = *corners;
    let mut acc = 0.0;
    for (dt, wt) in [(0, 1.0 - ft), (1, ft)] {
        for (dla, wla) in [(0, 1.0 - fla), (1, fla)] {
            for (dlo, wlo) in [(0, 1.0 - flo), (1, flo)] {
                let w = wt * wla * wlo;
                if w != 0.0 {
                    acc += w * f(data[[it + dt, ila + dla, ilo + dlo]]);
                }
            }
        }
    }
    acc
}

/// A record that could not be fused, with the reason.
#[derive(Debug, Clone)]
pub struct FuseReject {
    pub record: SensorRecord,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct FuseOutcome {
    pub fused: Vec<SensorRecord>,
    pub rejects: Vec<FuseReject>,
}

/// Weather at one fix, directions made relative to `course_deg`.
pub fn weather_at(grid: &WeatherGrid, time: f64, lat: f64, lon: f64, course_deg: f64) -> Result<WeatherAttachment> {
    Ok(WeatherAttachment {
        wave_height_m: grid.trilinear(WAVE_HEIGHT_FIELD, time, lat, lon)?,
        swell_height_m: grid.trilinear(SWELL_HEIGHT_FIELD, time, lat, lon)?,
        wave_dir_rel_deg: relative_direction(grid.trilinear(WAVE_DIR_FIELD, time, lat, lon)?, course_deg),
        wind_dir_rel_deg: relative_direction(grid.trilinear(WIND_DIR_FIELD, time, lat, lon)?, course_deg),
    })
}

/// Attaches weather to every record inside the grid; the rest become rejects.
pub fn fuse(records: Vec<SensorRecord>, grid: &WeatherGrid) -> Result<FuseOutcome> {
    grid.require_fields(&REQUIRED_FIELDS)?;
    let mut out = FuseOutcome {
        fused: Vec::with_capacity(records.len()),
        rejects: Vec::new(),
    };
    for mut r in records {
        match weather_at(grid, r.timestamp as f64, r.lat_deg, r.lon_deg, r.course_deg) {
            Ok(w) => {
                r.weather = Some(w);
                out.fused.push(r);
            }
            Err(e) => out.rejects.push(FuseReject {
                record: r,
                reason: e.to_string(),
            }),
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// File format
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct FieldFile {
    shape: [usize; 3],
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct GridFile {
    lat_axis: Vec<f64>,
    lon_axis: Vec<f64>,
    time_axis: Vec<String>,
    fields: BTreeMap<String, FieldFile>,
}

pub fn save_grid(path: &Path, grid: &WeatherGrid) -> Result<()> {
    let file = GridFile {
        lat_axis: grid.lat_axis.clone(),
        lon_axis: grid.lon_axis.clone(),
        time_axis: grid.time_axis.iter().map(|&t| format_timestamp(t)).collect(),
        fields: grid
            .fields
            .iter()
            .map(|(name, data)| {
                let (a, b, c) = data.dim();
                (
                    name.clone(),
                    FieldFile {
                        shape: [a, b, c],
                        data: data.iter().copied().collect(),
                    },
                )
            })
            .collect(),
    };
    write_json(path, &file, false)
}

pub fn load_grid(path: &Path) -> Result<WeatherGrid> {
    let file: GridFile = read_json(path)?;
    let time_axis = file
        .time_axis
        .iter()
        .map(|s| parse_timestamp(s))
        .collect::<Result<Vec<_>>>()?;
    let mut fields = BTreeMap::new();
    for (name, f) in file.fields {
        let data = Array3::from_shape_vec((f.shape[0], f.shape[1], f.shape[2]), f.data)
            .map_err(|e| Error::Data(format!("field {name}: {e}")))?;
        fields.insert(name, data);
    }
    WeatherGrid::new(time_axis, file.lat_axis, file.lon_axis, fields)
}
