//! Synthetic fleets: a parametric propulsion model, smooth met-ocean grids,
//! 15-minute sensor streams along random tracks, and daily noon reports
//! aggregated from those streams with extra reporting noise and bias.
//!
//! Everything is a deterministic function of the configured seeds.

use std::path::Path;

use chrono::NaiveDate;
use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{
    date_to_timestamp, timestamp_to_date, write_noon_csv, write_sensor_csv, NoonReport, SensorRecord,
    VesselCategory, VesselMeta, SECONDS_PER_DAY,
};
use crate::error::{Error, Result};
use crate::numfmt::write_json;
use crate::weather::{
    circular_mean, save_grid, weather_at, WeatherGrid, SWELL_HEIGHT_FIELD, WAVE_DIR_FIELD, WAVE_HEIGHT_FIELD,
    WIND_DIR_FIELD,
};

/// Propeller-law exponent of the sister/similar backbone.
pub const CUBIC: f64 = 3.0;

/// Largest relative coefficient perturbation per category.
pub fn perturbation_bound(category: VesselCategory) -> f64 {
    match category {
        VesselCategory::Sister => 0.01,
        VesselCategory::Similar => 0.10,
        VesselCategory::Different => 0.40,
    }
}

/// Ground-truth propulsion and reporting characteristics of one vessel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VesselSpec {
    pub vessel_id: String,
    pub category: VesselCategory,
    pub length_m: f64,
    pub beam_m: f64,
    /// `k` in `k * rpm^e`.
    pub power_coeff: f64,
    pub rpm_exponent: f64,
    pub wave_drag_coeff: f64,
    pub swell_drag_coeff: f64,
    pub draft_sensitivity: f64,
    pub noise_sd_sensor: f64,
    pub noise_sd_noon: f64,
    /// Systematic offset added to every noon-report power value (kW).
    pub report_bias: f64,
}

impl VesselSpec {
    /// The fleet's reference hull.
    pub fn reference(vessel_id: &str) -> Self {
        Self {
            vessel_id: vessel_id.to_string(),
            category: VesselCategory::Sister,
            length_m: 204.0,
            beam_m: 32.0,
            power_coeff: 0.012,
            rpm_exponent: CUBIC,
            wave_drag_coeff: 110.0,
            swell_drag_coeff: 60.0,
            draft_sensitivity: 0.08,
            noise_sd_sensor: 60.0,
            noise_sd_noon: 240.0,
            report_bias: 120.0,
        }
    }

    /// A vessel related to `base` as `category` dictates: every physical
    /// coefficient is scaled by a factor within the category's bound, and a
    /// different vessel also gets a non-cubic exponent with `k` rescaled so
    /// its power at `reference_rpm` stays within the same bound.
    pub fn derive(base: &VesselSpec, vessel_id: &str, category: VesselCategory, reference_rpm: f64, rng: &mut impl Rng) -> Self {
        let bound = perturbation_bound(category);
        let mut factor = || 1.0 + rng.random_range(-bound..=bound);
        let mut spec = VesselSpec {
            vessel_id: vessel_id.to_string(),
            category,
            power_coeff: base.power_coeff * factor(),
            wave_drag_coeff: base.wave_drag_coeff * factor(),
            swell_drag_coeff: base.swell_drag_coeff * factor(),
            draft_sensitivity: base.draft_sensitivity * factor(),
            ..base.clone()
        };
        match category {
            VesselCategory::Sister => {}
            VesselCategory::Similar => {
                spec.length_m = base.length_m * 0.93;
            }
            VesselCategory::Different => {
                let shift = rng.random_range(0.15..0.35) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                spec.rpm_exponent = base.rpm_exponent + shift;
                spec.power_coeff *= reference_rpm.powf(base.rpm_exponent - spec.rpm_exponent);
                spec.length_m = 260.0;
                spec.beam_m = 40.0;
            }
        }
        spec
    }

    pub fn meta(&self) -> VesselMeta {
        VesselMeta {
            vessel_id: self.vessel_id.clone(),
            category: self.category,
            length_m: self.length_m,
            beam_m: self.beam_m,
        }
    }
}

/// Inputs to [`ground_truth_power`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OperatingState {
    pub rpm: f64,
    pub stw_knots: f64,
    pub draft_mid_m: f64,
    pub wave_height_m: f64,
    pub swell_height_m: f64,
    pub wave_dir_rel_deg: f64,
}

/// `k·rpm^e + c_wave·H²·(1 + cos φ) + c_swell·H_s² + c_draft·d·v²` in kW.
/// Head seas (φ = 0) add the most resistance.
pub fn ground_truth_power(spec: &VesselSpec, s: &OperatingState) -> f64 {
    let heading = 1.0 + s.wave_dir_rel_deg.to_radians().cos();
    spec.power_coeff * s.rpm.max(0.0).powf(spec.rpm_exponent)
        + spec.wave_drag_coeff * s.wave_height_m.powi(2) * heading
        + spec.swell_drag_coeff * s.swell_height_m.powi(2)
        + spec.draft_sensitivity * s.draft_mid_m * s.stw_knots.powi(2)
}

/// Lat/lon box the tracks stay inside.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub lat_min: f64,
    pub lat_max: f64,
    pub lon_min: f64,
    pub lon_max: f64,
}

/// How engine speed, loading and idle time evolve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpeedProfile {
    pub rpm_mean: f64,
    /// Stationary SD of the day-to-day rpm set-point.
    pub rpm_daily_sd: f64,
    /// AR(1) coefficient of the daily set-point.
    pub rpm_persistence: f64,
    /// Within-day rpm jitter SD.
    pub rpm_jitter_sd: f64,
    pub knots_per_rpm: f64,
    pub idle_day_prob: f64,
    pub loaded_draft_m: f64,
    pub ballast_draft_m: f64,
    pub leg_days_min: u32,
    pub leg_days_max: u32,
    /// Course random-walk SD per sample, degrees.
    pub course_step_sd_deg: f64,
}

impl Default for SpeedProfile {
    fn default() -> Self {
        Self {
            rpm_mean: 76.0,
            rpm_daily_sd: 7.0,
            rpm_persistence: 0.7,
            rpm_jitter_sd: 1.0,
            knots_per_rpm: 0.18,
            idle_day_prob: 0.03,
            loaded_draft_m: 10.5,
            ballast_draft_m: 7.5,
            leg_days_min: 10,
            leg_days_max: 25,
            course_step_sd_deg: 2.0,
        }
    }
}

/// Smooth met-ocean fields and the lattice they are sampled on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeatherRegime {
    pub wave_mean_m: f64,
    pub swell_mean_m: f64,
    /// Relative amplitude of height variation around the means, in [0, 1).
    pub height_variability: f64,
    /// Typical period of the weather pattern, days.
    pub period_days: f64,
    /// Typical spatial wavelength, degrees.
    pub wavelength_deg: f64,
    pub grid_spacing_deg: f64,
    pub grid_interval_h: u32,
    /// Relative amplitude of the annual height cycle, in [0, 1).
    pub seasonal_amplitude: f64,
    /// Day of year with the roughest seas.
    pub seasonal_peak_day: f64,
}

impl Default for WeatherRegime {
    fn default() -> Self {
        Self {
            wave_mean_m: 1.8,
            swell_mean_m: 1.1,
            height_variability: 0.6,
            period_days: 4.0,
            wavelength_deg: 6.0,
            grid_spacing_deg: 1.0,
            grid_interval_h: 3,
            seasonal_amplitude: 0.35,
            seasonal_peak_day: 15.0,
        }
    }
}

/// Time span, sampling and operating pattern of one voyage stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoyageScenario {
    /// UTC seconds of the first sample.
    pub start: i64,
    pub duration_days: u32,
    pub sample_interval_s: u32,
    pub speed: SpeedProfile,
    pub region: Region,
    pub seed: u64,
}

impl VoyageScenario {
    pub fn validate(&self) -> Result<()> {
        if self.sample_interval_s == 0 || SECONDS_PER_DAY % self.sample_interval_s as i64 != 0 {
            return Err(Error::Config(format!(
                "sample interval {} s does not divide a day",
                self.sample_interval_s
            )));
        }
        if self.duration_days < 2 {
            return Err(Error::Config("scenario must span at least 2 days".into()));
        }
        let r = &self.region;
        if !(r.lat_min < r.lat_max && r.lon_min < r.lon_max) {
            return Err(Error::Config("region box is empty".into()));
        }
        Ok(())
    }

    pub fn samples_per_day(&self) -> usize {
        (SECONDS_PER_DAY / self.sample_interval_s as i64) as usize
    }

    pub fn end(&self) -> i64 {
        self.start + self.duration_days as i64 * SECONDS_PER_DAY
    }
}

struct Mode {
    amp: f64,
    period_s: f64,
    k_lat: f64,
    k_lon: f64,
    phase: f64,
}

/// Sum of travelling sinusoids normalized to [-1, 1].
struct SmoothField(Vec<Mode>);

impl SmoothField {
    fn random(rng: &mut ChaCha8Rng, regime: &WeatherRegime) -> Self {
        let amps = [0.5, 0.3, 0.2];
        SmoothField(
            amps.iter()
                .map(|&amp| {
                    let theta = rng.random_range(0.0..std::f64::consts::TAU);
                    let wavelength = regime.wavelength_deg * rng.random_range(0.6..1.6);
                    Mode {
                        amp,
                        period_s: regime.period_days * rng.random_range(0.5..1.8) * SECONDS_PER_DAY as f64,
                        k_lat: theta.cos() / wavelength,
                        k_lon: theta.sin() / wavelength,
                        phase: rng.random_range(0.0..std::f64::consts::TAU),
                    }
                })
                .collect(),
        )
    }

    fn at(&self, t: f64, lat: f64, lon: f64) -> f64 {
        self.0
            .iter()
            .map(|m| m.amp * (std::f64::consts::TAU * (t / m.period_s + m.k_lat * lat + m.k_lon * lon) + m.phase).sin())
            .sum()
    }
}

/// Samples a smooth weather grid covering `region` over `[start, end]`.
pub fn gen_weather_grid(regime: &WeatherRegime, region: &Region, start: i64, end: i64, seed: u64) -> Result<WeatherGrid> {
    if regime.grid_spacing_deg <= 0.0 || regime.grid_interval_h == 0 || end <= start {
        return Err(Error::Config("weather grid needs positive spacing and a non-empty span".into()));
    }
    let axis = |lo: f64, hi: f64| {
        let n = ((hi - lo) / regime.grid_spacing_deg).ceil() as usize;
        (0..=n).map(|i| lo + i as f64 * regime.grid_spacing_deg).collect::<Vec<_>>()
    };
    let lat_axis = axis(region.lat_min, region.lat_max);
    let lon_axis = axis(region.lon_min, region.lon_max);
    let step = regime.grid_interval_h as i64 * 3600;
    let n_t = ((end - start) + step - 1) / step;
    let time_axis: Vec<i64> = (0..=n_t).map(|i| start + i * step).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let wave = SmoothField::random(&mut rng, regime);
    let swell = SmoothField::random(&mut rng, regime);
    let wave_dir = SmoothField::random(&mut rng, regime);
    let wind_offset = SmoothField::random(&mut rng, regime);
    let prevailing = rng.random_range(0.0..360.0);
    let var = regime.height_variability.clamp(0.0, 0.95);
    let season_amp = regime.seasonal_amplitude.clamp(0.0, 0.95);
    let season = |t: f64| {
        let day_of_year = (start as f64 + t) / SECONDS_PER_DAY as f64 % 365.25;
        1.0 + season_amp * (std::f64::consts::TAU * (day_of_year - regime.seasonal_peak_day) / 365.25).cos()
    };

    let shape = (time_axis.len(), lat_axis.len(), lon_axis.len());
    let mut fields = std::collections::BTreeMap::new();
    let make = |f: &dyn Fn(f64, f64, f64) -> f64| {
        Array3::from_shape_fn(shape, |(i, j, k)| f((time_axis[i] - start) as f64, lat_axis[j], lon_axis[k]))
    };
    let wrap = |d: f64| crate::weather::relative_direction(d, 0.0);
    fields.insert(
        WAVE_HEIGHT_FIELD.to_string(),
        make(&|t, la, lo| regime.wave_mean_m * season(t) * (1.0 + var * wave.at(t, la, lo))),
    );
    fields.insert(
        SWELL_HEIGHT_FIELD.to_string(),
        make(&|t, la, lo| regime.swell_mean_m * season(t) * (1.0 + var * swell.at(t, la, lo))),
    );
    fields.insert(
        WAVE_DIR_FIELD.to_string(),
        make(&|t, la, lo| wrap(prevailing + 120.0 * wave_dir.at(t, la, lo))),
    );
    fields.insert(
        WIND_DIR_FIELD.to_string(),
        make(&|t, la, lo| wrap(prevailing + 120.0 * wave_dir.at(t, la, lo) + 40.0 * wind_offset.at(t, la, lo))),
    );
    WeatherGrid::new(time_axis, lat_axis, lon_axis, fields)
}

/// One record per sample interval along a seeded random track. Records come
/// back with the weather used for the ground truth already attached; power is
/// the ground truth plus Gaussian sensor noise.
pub fn gen_sensor_stream(spec: &VesselSpec, scenario: &VoyageScenario, grid: &WeatherGrid) -> Result<Vec<SensorRecord>> {
    scenario.validate()?;
    let sp = &scenario.speed;
    let region = &scenario.region;
    let mut rng = ChaCha8Rng::seed_from_u64(scenario.seed);
    let noise = Normal::new(0.0, spec.noise_sd_sensor.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let per_day = scenario.samples_per_day();
    let dt = scenario.sample_interval_s as f64;

    let mut lat = rng.random_range(region.lat_min + 0.25 * (region.lat_max - region.lat_min)..region.lat_max - 0.25 * (region.lat_max - region.lat_min));
    let mut lon = rng.random_range(region.lon_min + 0.25 * (region.lon_max - region.lon_min)..region.lon_max - 0.25 * (region.lon_max - region.lon_min));
    let mut course: f64 = rng.random_range(0.0..360.0);
    let mut rpm_anomaly = sp.rpm_daily_sd * std_normal.sample(&mut rng);
    let innovation_sd = sp.rpm_daily_sd * (1.0 - sp.rpm_persistence.powi(2)).max(0.0).sqrt();
    let mut loaded = rng.random_bool(0.5);
    let mut leg_left = rng.random_range(sp.leg_days_min..=sp.leg_days_max.max(sp.leg_days_min));
    let mut trim = 0.0;

    let mut out = Vec::with_capacity(per_day * scenario.duration_days as usize);
    for day in 0..scenario.duration_days {
        if leg_left == 0 {
            loaded = !loaded;
            leg_left = rng.random_range(sp.leg_days_min..=sp.leg_days_max.max(sp.leg_days_min));
            trim = rng.random_range(-0.4..0.4);
        }
        leg_left -= 1;
        rpm_anomaly = sp.rpm_persistence * rpm_anomaly + innovation_sd * std_normal.sample(&mut rng);
        let idle = rng.random_bool(sp.idle_day_prob.clamp(0.0, 1.0));
        let set_point = (sp.rpm_mean + rpm_anomaly).max(20.0);
        let draft_mean = if loaded { sp.loaded_draft_m } else { sp.ballast_draft_m };

        for i in 0..per_day {
            let t = scenario.start + day as i64 * SECONDS_PER_DAY + (i as i64) * scenario.sample_interval_s as i64;
            course = crate::weather::relative_direction(course + sp.course_step_sd_deg * std_normal.sample(&mut rng), 0.0);
            let w = weather_at(grid, t as f64, lat, lon, course)?;
            let rpm = if idle {
                0.0
            } else {
                (set_point + sp.rpm_jitter_sd * std_normal.sample(&mut rng)).max(0.0)
            };
            let speed_loss = 0.03 * w.wave_height_m * (1.0 + w.wave_dir_rel_deg.to_radians().cos()) / 2.0 + 0.01 * w.swell_height_m;
            let stw = if idle {
                0.0
            } else {
                (sp.knots_per_rpm * rpm * (1.0 - speed_loss) + 0.15 * std_normal.sample(&mut rng)).max(0.0)
            };
            let draft_aft = draft_mean + trim / 2.0 + 0.02 * std_normal.sample(&mut rng);
            let draft_fore = draft_mean - trim / 2.0 + 0.02 * std_normal.sample(&mut rng);
            let state = OperatingState {
                rpm,
                stw_knots: stw,
                draft_mid_m: 0.5 * (draft_aft + draft_fore),
                wave_height_m: w.wave_height_m,
                swell_height_m: w.swell_height_m,
                wave_dir_rel_deg: w.wave_dir_rel_deg,
            };
            let power = ground_truth_power(spec, &state) + noise.sample(&mut rng);
            out.push(SensorRecord {
                timestamp: t,
                stw_knots: stw,
                rpm,
                draft_aft_m: draft_aft,
                draft_fore_m: draft_fore,
                lat_deg: lat,
                lon_deg: lon,
                course_deg: course,
                shaft_power_kw: power,
                weather: Some(w),
            });

            // advance and bounce off the region edges
            let dist_deg = stw * dt / 3600.0 / 60.0;
            let rad = course.to_radians();
            let next_lat = lat + dist_deg * rad.cos();
            let next_lon = lon + dist_deg * rad.sin() / lat.to_radians().cos();
            if next_lat <= region.lat_min || next_lat >= region.lat_max {
                course = crate::weather::relative_direction(180.0 - course, 0.0);
            } else {
                lat = next_lat;
            }
            if next_lon <= region.lon_min || next_lon >= region.lon_max {
                course = crate::weather::relative_direction(360.0 - course, 0.0);
            } else {
                lon = next_lon;
            }
        }
    }
    Ok(out)
}

/// Aggregates complete UTC days of a fused stream into noon reports: plain
/// means for scalar quantities, circular means for directions, and mean power
/// plus the vessel's reporting bias and noise. Incomplete days are dropped.
pub fn gen_noon_reports(stream: &[SensorRecord], spec: &VesselSpec, samples_per_day: usize, seed: u64) -> Result<Vec<NoonReport>> {
    let noise = Normal::new(0.0, spec.noise_sd_noon.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(7);
    let mut out = Vec::new();
    let mut start = 0;
    while start < stream.len() {
        let date = timestamp_to_date(stream[start].timestamp);
        let len = stream[start..]
            .iter()
            .take_while(|r| timestamp_to_date(r.timestamp) == date)
            .count();
        let day = &stream[start..start + len];
        start += len;
        if len != samples_per_day {
            continue;
        }
        let weather: Vec<_> = day
            .iter()
            .map(|r| {
                r.weather
                    .ok_or_else(|| Error::Data(format!("record at {} has no weather attached", r.timestamp)))
            })
            .collect::<Result<_>>()?;
        let n = len as f64;
        let avg = |f: &dyn Fn(&SensorRecord) -> f64| day.iter().map(f).sum::<f64>() / n;
        let mean_power = avg(&|r| r.shaft_power_kw);
        out.push(NoonReport {
            date,
            stw_knots: avg(&|r| r.stw_knots),
            rpm: avg(&|r| r.rpm),
            draft_aft_m: avg(&|r| r.draft_aft_m),
            draft_fore_m: avg(&|r| r.draft_fore_m),
            wave_height_m: Some(weather.iter().map(|w| w.wave_height_m).sum::<f64>() / n),
            swell_height_m: Some(weather.iter().map(|w| w.swell_height_m).sum::<f64>() / n),
            wave_dir_rel_deg: Some(circular_mean(weather.iter().map(|w| w.wave_dir_rel_deg)).unwrap_or(0.0)),
            wind_dir_rel_deg: Some(circular_mean(weather.iter().map(|w| w.wind_dir_rel_deg)).unwrap_or(0.0)),
            shaft_power_kw: mean_power + spec.report_bias + noise.sample(&mut rng),
        });
    }
    if out.is_empty() {
        return Err(Error::Data("stream does not contain a single complete day".into()));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Fleets
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VesselRole {
    /// Candidate for the pretrained base model.
    Source,
    Target,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VesselPlan {
    pub vessel_id: String,
    pub category: VesselCategory,
    pub role: VesselRole,
    /// Overrides the fleet start date for this vessel.
    #[serde(default)]
    pub start_date: Option<NaiveDate>,
    /// Overrides the fleet duration for this vessel.
    #[serde(default)]
    pub duration_days: Option<u32>,
    /// Overrides the fleet sensor logging interval for this vessel.
    #[serde(default)]
    pub sample_interval_s: Option<u32>,
}

impl VesselPlan {
    pub fn new(vessel_id: &str, category: VesselCategory, role: VesselRole) -> Self {
        Self {
            vessel_id: vessel_id.to_string(),
            category,
            role,
            start_date: None,
            duration_days: None,
            sample_interval_s: None,
        }
    }
}

/// Everything needed to regenerate a fleet bit-for-bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FleetConfig {
    pub seed: u64,
    pub start_date: NaiveDate,
    pub duration_days: u32,
    pub sample_interval_s: u32,
    pub region: Region,
    pub weather: WeatherRegime,
    pub speed: SpeedProfile,
    pub noise_sd_sensor: f64,
    /// Noon noise SD as a multiple of the sensor noise SD.
    pub noon_noise_ratio: f64,
    pub report_bias: f64,
    pub vessels: Vec<VesselPlan>,
}

impl Default for FleetConfig {
    fn default() -> Self {
        use VesselCategory::*;
        // Targets have a short history logged hourly; the source has a long 15-minute one.
        let target = |id: &str, category| VesselPlan {
            start_date: NaiveDate::from_ymd_opt(2023, 9, 1),
            duration_days: Some(182),
            sample_interval_s: Some(3600),
            ..VesselPlan::new(id, category, VesselRole::Target)
        };
        Self {
            seed: 2024,
            start_date: NaiveDate::from_ymd_opt(2023, 5, 1).expect("valid date"),
            duration_days: 305,
            sample_interval_s: 900,
            region: Region {
                lat_min: 30.0,
                lat_max: 40.0,
                lon_min: -40.0,
                lon_max: -30.0,
            },
            weather: WeatherRegime::default(),
            speed: SpeedProfile::default(),
            noise_sd_sensor: 60.0,
            noon_noise_ratio: 4.0,
            report_bias: 120.0,
            vessels: vec![
                VesselPlan::new("SIS1", Sister, VesselRole::Source),
                target("SIS2", Sister),
                target("SIS3", Sister),
                target("SIS4", Sister),
                target("SIM1", Similar),
                target("DIF1", Different),
            ],
        }
    }
}

#[derive(Debug, Clone)]
pub struct GeneratedVessel {
    pub spec: VesselSpec,
    pub role: VesselRole,
    pub scenario: VoyageScenario,
    /// Fused stream (weather attached).
    pub sensor: Vec<SensorRecord>,
    pub noon: Vec<NoonReport>,
}

#[derive(Debug, Clone)]
pub struct GeneratedFleet {
    pub grid: WeatherGrid,
    pub vessels: Vec<GeneratedVessel>,
}

/// Vessel specs for a fleet plan. The first source vessel is the reference
/// hull; every other vessel is derived from it according to its category.
pub fn fleet_specs(config: &FleetConfig) -> Result<Vec<VesselSpec>> {
    let Some(first_source) = config.vessels.iter().position(|v| v.role == VesselRole::Source) else {
        return Err(Error::Config("fleet needs at least one source vessel".into()));
    };
    let mut base = VesselSpec::reference(&config.vessels[first_source].vessel_id);
    base.noise_sd_sensor = config.noise_sd_sensor;
    base.noise_sd_noon = config.noise_sd_sensor * config.noon_noise_ratio;
    base.report_bias = config.report_bias;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(3);
    Ok(config
        .vessels
        .iter()
        .enumerate()
        .map(|(i, plan)| {
            if i == first_source {
                base.clone()
            } else {
                VesselSpec::derive(&base, &plan.vessel_id, plan.category, config.speed.rpm_mean, &mut rng)
            }
        })
        .collect())
}

pub fn generate_fleet(config: &FleetConfig) -> Result<GeneratedFleet> {
    let mut ids = std::collections::BTreeSet::new();
    if let Some(dup) = config.vessels.iter().find(|v| !ids.insert(v.vessel_id.as_str())) {
        return Err(Error::Config(format!("duplicate vessel id {}", dup.vessel_id)));
    }
    let specs = fleet_specs(config)?;
    let spans: Vec<(i64, u32)> = config
        .vessels
        .iter()
        .map(|v| {
            (
                date_to_timestamp(v.start_date.unwrap_or(config.start_date)),
                v.duration_days.unwrap_or(config.duration_days),
            )
        })
        .collect();
    let start = spans.iter().map(|s| s.0).min().unwrap_or(date_to_timestamp(config.start_date));
    let end = spans
        .iter()
        .map(|&(s, d)| s + d as i64 * SECONDS_PER_DAY)
        .max()
        .unwrap_or(start + SECONDS_PER_DAY);
    let grid = gen_weather_grid(&config.weather, &config.region, start, end, config.seed)?;

    let vessels = config
        .vessels
        .iter()
        .zip(specs)
        .enumerate()
        .map(|(i, (plan, spec))| {
            let scenario = VoyageScenario {
                start: spans[i].0,
                duration_days: spans[i].1,
                sample_interval_s: plan.sample_interval_s.unwrap_or(config.sample_interval_s),
                speed: config.speed,
                region: config.region,
                seed: config.seed.wrapping_mul(1_000).wrapping_add(i as u64 + 1),
            };
            let sensor = gen_sensor_stream(&spec, &scenario, &grid)?;
            let noon = gen_noon_reports(&sensor, &spec, scenario.samples_per_day(), scenario.seed)?;
            Ok(GeneratedVessel {
                spec,
                role: plan.role,
                scenario,
                sensor,
                noon,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(GeneratedFleet { grid, vessels })
}

/// Manifest written next to generated data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FleetManifest {
    pub config: FleetConfig,
    pub grid_file: String,
    pub vessels: Vec<FleetManifestEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FleetManifestEntry {
    pub spec: VesselSpec,
    pub role: VesselRole,
    pub scenario_seed: u64,
    pub sensor_file: String,
    pub noon_file: String,
    pub sensor_rows: usize,
    pub noon_rows: usize,
}

pub const FLEET_MANIFEST: &str = "fleet.json";
pub const GRID_FILE: &str = "weather_grid.json";

pub fn sensor_file(vessel_id: &str) -> String {
    format!("sensor/{vessel_id}.csv")
}

pub fn noon_file(vessel_id: &str) -> String {
    format!("noon/{vessel_id}.csv")
}

/// Writes the grid, raw sensor files (without weather columns), noon files and `fleet.json`.
pub fn write_fleet(dir: &Path, config: &FleetConfig, fleet: &GeneratedFleet) -> Result<FleetManifest> {
    save_grid(&dir.join(GRID_FILE), &fleet.grid)?;
    let mut entries = Vec::new();
    for v in &fleet.vessels {
        let raw: Vec<SensorRecord> = v
            .sensor
            .iter()
            .map(|r| SensorRecord {
                weather: None,
                ..r.clone()
            })
            .collect();
        let sensor_path = sensor_file(&v.spec.vessel_id);
        let noon_path = noon_file(&v.spec.vessel_id);
        write_sensor_csv(&dir.join(&sensor_path), &raw)?;
        write_noon_csv(&dir.join(&noon_path), &v.noon)?;
        entries.push(FleetManifestEntry {
            spec: v.spec.clone(),
            role: v.role,
            scenario_seed: v.scenario.seed,
            sensor_file: sensor_path,
            noon_file: noon_path,
            sensor_rows: v.sensor.len(),
            noon_rows: v.noon.len(),
        });
    }
    let manifest = FleetManifest {
        config: config.clone(),
        grid_file: GRID_FILE.to_string(),
        vessels: entries,
    };
    write_json(&dir.join(FLEET_MANIFEST), &manifest, true)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{load_noon_csv, load_sensor_csv};
    use crate::metrics::median;

    fn small_config(days: u32) -> FleetConfig {
        FleetConfig {
            duration_days: days,
            region: Region {
                lat_min: 30.0,
                lat_max: 34.0,
                lon_min: -40.0,
                lon_max: -36.0,
            },
            vessels: vec![
                VesselPlan::new("A", VesselCategory::Sister, VesselRole::Source),
                VesselPlan {
                    sample_interval_s: Some(3600),
                    ..VesselPlan::new("B", VesselCategory::Different, VesselRole::Target)
                },
            ],
            ..FleetConfig::default()
        }
    }

    fn scenario(days: u32, grid_days: u32) -> (VoyageScenario, WeatherGrid) {
        let cfg = small_config(grid_days);
        let start = date_to_timestamp(cfg.start_date);
        let grid = gen_weather_grid(&cfg.weather, &cfg.region, start, start + grid_days as i64 * SECONDS_PER_DAY, 1).unwrap();
        let sc = VoyageScenario {
            start,
            duration_days: days,
            sample_interval_s: 900,
            speed: SpeedProfile {
                idle_day_prob: 0.0,
                ..SpeedProfile::default()
            },
            region: cfg.region,
            seed: 5,
        };
        (sc, grid)
    }

    fn calm(rpm: f64, stw: f64) -> OperatingState {
        OperatingState {
            rpm,
            stw_knots: stw,
            draft_mid_m: 10.0,
            wave_height_m: 0.0,
            swell_height_m: 0.0,
            wave_dir_rel_deg: 0.0,
        }
    }

    #[test]
    fn ground_truth_examples() {
        let spec = VesselSpec::reference("X");
        assert_eq!(ground_truth_power(&spec, &calm(0.0, 0.0)), 0.0);
        let mut k = spec.clone();
        k.power_coeff = 0.01;
        assert!((ground_truth_power(&k, &calm(100.0, 0.0)) - 10_000.0).abs() < 1e-9);
        // head seas cost twice the wave term of beam seas
        let head = OperatingState {
            wave_height_m: 2.0,
            ..calm(0.0, 0.0)
        };
        let beam = OperatingState {
            wave_dir_rel_deg: 90.0,
            ..head
        };
        assert!((ground_truth_power(&spec, &head) - 2.0 * 110.0 * 4.0).abs() < 1e-9);
        assert!((ground_truth_power(&spec, &beam) - 110.0 * 4.0).abs() < 1e-9);
    }

    #[test]
    fn derived_specs_respect_bounds() {
        let base = VesselSpec::reference("A");
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for category in [VesselCategory::Sister, VesselCategory::Similar] {
            let bound = perturbation_bound(category);
            for _ in 0..50 {
                let s = VesselSpec::derive(&base, "B", category, 76.0, &mut rng);
                assert_eq!(s.rpm_exponent, CUBIC);
                for (a, b) in [
                    (s.power_coeff, base.power_coeff),
                    (s.wave_drag_coeff, base.wave_drag_coeff),
                    (s.swell_drag_coeff, base.swell_drag_coeff),
                    (s.draft_sensitivity, base.draft_sensitivity),
                ] {
                    assert!((a / b - 1.0).abs() <= bound + 1e-12);
                }
            }
        }
        let d = VesselSpec::derive(&base, "D", VesselCategory::Different, 76.0, &mut rng);
        assert_ne!(d.rpm_exponent, CUBIC);
        let ratio = d.power_coeff * 76f64.powf(d.rpm_exponent) / (base.power_coeff * 76f64.powi(3));
        assert!((ratio - 1.0).abs() <= 0.4 + 1e-12);
    }

    #[test]
    fn sisters_agree_within_one_percent() {
        let base = VesselSpec::reference("A");
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let b = VesselSpec::derive(&base, "B", VesselCategory::Sister, 76.0, &mut rng);
        let state = OperatingState {
            wave_height_m: 2.0,
            swell_height_m: 1.0,
            wave_dir_rel_deg: 30.0,
            ..calm(80.0, 14.0)
        };
        let (pa, pb) = (ground_truth_power(&base, &state), ground_truth_power(&b, &state));
        assert!((pa - pb).abs() / pa <= 0.01);
    }

    #[test]
    fn category_ordering_in_median() {
        let base = VesselSpec::reference("A");
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let sister = VesselSpec::derive(&base, "B", VesselCategory::Sister, 76.0, &mut rng);
        let similar = VesselSpec::derive(&base, "C", VesselCategory::Similar, 76.0, &mut rng);
        let different = VesselSpec::derive(&base, "D", VesselCategory::Different, 76.0, &mut rng);
        let mut gaps = [Vec::new(), Vec::new(), Vec::new()];
        for _ in 0..2000 {
            let s = OperatingState {
                rpm: rng.random_range(55.0..100.0),
                stw_knots: rng.random_range(9.0..18.0),
                draft_mid_m: rng.random_range(7.0..11.0),
                wave_height_m: rng.random_range(0.0..4.0),
                swell_height_m: rng.random_range(0.0..2.5),
                wave_dir_rel_deg: rng.random_range(0.0..360.0),
            };
            let p = ground_truth_power(&base, &s);
            gaps[0].push((p - ground_truth_power(&sister, &s)).abs());
            gaps[1].push((p - ground_truth_power(&similar, &s)).abs());
            gaps[2].push((p - ground_truth_power(&different, &s)).abs());
        }
        let m: Vec<f64> = gaps.iter().map(|g| median(g).unwrap()).collect();
        assert!(m[0] <= m[1] && m[1] <= m[2], "{m:?}");
    }

    #[test]
    fn two_day_stream_has_192_records() {
        let (sc, grid) = scenario(2, 3);
        let spec = VesselSpec::reference("A");
        let s = gen_sensor_stream(&spec, &sc, &grid).unwrap();
        assert_eq!(s.len(), 192);
        assert!(s.windows(2).all(|w| w[1].timestamp - w[0].timestamp == 900));
        assert_eq!(s, gen_sensor_stream(&spec, &sc, &grid).unwrap());
    }

    #[test]
    fn zero_noise_means_ground_truth() {
        let (sc, grid) = scenario(2, 3);
        let mut spec = VesselSpec::reference("A");
        spec.noise_sd_sensor = 0.0;
        for r in gen_sensor_stream(&spec, &sc, &grid).unwrap() {
            let w = r.weather.unwrap();
            let truth = ground_truth_power(
                &spec,
                &OperatingState {
                    rpm: r.rpm,
                    stw_knots: r.stw_knots,
                    draft_mid_m: 0.5 * (r.draft_aft_m + r.draft_fore_m),
                    wave_height_m: w.wave_height_m,
                    swell_height_m: w.swell_height_m,
                    wave_dir_rel_deg: w.wave_dir_rel_deg,
                },
            );
            assert_eq!(r.shaft_power_kw, truth);
        }
    }

    #[test]
    fn noon_reports_aggregate_complete_days() {
        let (sc, grid) = scenario(4, 5);
        let mut spec = VesselSpec::reference("A");
        spec.noise_sd_noon = 0.0;
        spec.report_bias = 0.0;
        let stream = gen_sensor_stream(&spec, &sc, &grid).unwrap();
        // 3.5 days: the trailing half day is dropped
        let cut = &stream[..stream.len() - 48];
        let noon = gen_noon_reports(cut, &spec, 96, 1).unwrap();
        assert_eq!(noon.len(), 3);
        for (d, report) in noon.iter().enumerate() {
            let day = &stream[d * 96..(d + 1) * 96];
            let mean = day.iter().map(|r| r.shaft_power_kw).sum::<f64>() / 96.0;
            assert!((report.shaft_power_kw - mean).abs() < 1e-9);
        }
        assert!(gen_noon_reports(&stream[..50], &spec, 96, 1).is_err());
    }

    #[test]
    fn constant_stream_gives_constant_report() {
        let w = crate::data::WeatherAttachment {
            wave_height_m: 2.0,
            swell_height_m: 1.0,
            wave_dir_rel_deg: 359.0,
            wind_dir_rel_deg: 1.0,
        };
        let mut spec = VesselSpec::reference("A");
        spec.noise_sd_noon = 0.0;
        spec.report_bias = 0.0;
        let start = date_to_timestamp(NaiveDate::from_ymd_opt(2023, 1, 1).unwrap());
        let day: Vec<SensorRecord> = (0..4)
            .map(|i| SensorRecord {
                timestamp: start + i * 21_600,
                stw_knots: 12.0,
                rpm: 70.0,
                draft_aft_m: 9.0,
                draft_fore_m: 8.0,
                lat_deg: 0.0,
                lon_deg: 0.0,
                course_deg: 0.0,
                shaft_power_kw: 5000.0,
                weather: Some(crate::data::WeatherAttachment {
                    wave_dir_rel_deg: if i % 2 == 0 { 359.0 } else { 1.0 },
                    ..w
                }),
            })
            .collect();
        let r = &gen_noon_reports(&day, &spec, 4, 0).unwrap()[0];
        assert_eq!((r.stw_knots, r.rpm, r.shaft_power_kw), (12.0, 70.0, 5000.0));
        assert_eq!((r.draft_aft_m, r.draft_fore_m), (9.0, 8.0));
        let wave_dir = r.wave_dir_rel_deg.unwrap();
        assert!(wave_dir.min(360.0 - wave_dir) < 1e-9, "{wave_dir}");
    }

    #[test]
    fn scenario_validation() {
        let (mut sc, _) = scenario(2, 3);
        sc.sample_interval_s = 7;
        assert!(sc.validate().is_err());
        let (mut sc, _) = scenario(2, 3);
        sc.duration_days = 1;
        assert!(sc.validate().is_err());
    }

    #[test]
    fn written_fleet_round_trips() {
        let cfg = small_config(3);
        let fleet = generate_fleet(&cfg).unwrap();
        assert_eq!(fleet.vessels.len(), 2);
        let dir = tempfile::tempdir().unwrap();
        let manifest = write_fleet(dir.path(), &cfg, &fleet).unwrap();
        for (v, entry) in fleet.vessels.iter().zip(&manifest.vessels) {
            let sensor = load_sensor_csv(&dir.path().join(&entry.sensor_file)).unwrap();
            assert!(sensor.rejects.is_empty());
            let stripped: Vec<_> = v.sensor.iter().map(|r| SensorRecord { weather: None, ..r.clone() }).collect();
            assert_eq!(sensor.records, stripped);
            let noon = load_noon_csv(&dir.path().join(&entry.noon_file)).unwrap();
            assert_eq!(noon.records, v.noon);
        }
        let again = generate_fleet(&cfg).unwrap();
        assert_eq!(again.vessels[1].noon, fleet.vessels[1].noon);
    }
}
