//! Observation records, CSV ingestion, preprocessing filters, and temporal splits.

use std::collections::HashMap;
use std::path::Path;

use chrono::{DateTime, NaiveDate, NaiveTime, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numfmt::format_f64;

pub const SENSOR_COLUMNS: [&str; 9] = [
    "timestamp",
    "stw_knots",
    "rpm",
    "draft_aft_m",
    "draft_fore_m",
    "lat_deg",
    "lon_deg",
    "course_deg",
    "shaft_power_kw",
];

/// Extra columns written after [`SENSOR_COLUMNS`] once weather has been attached.
pub const WEATHER_COLUMNS: [&str; 4] = [
    "wave_height_m",
    "swell_height_m",
    "wave_dir_rel_deg",
    "wind_dir_rel_deg",
];

pub const NOON_COLUMNS: [&str; 10] = [
    "date",
    "stw_knots",
    "rpm",
    "draft_aft_m",
    "draft_fore_m",
    "wave_height_m",
    "swell_height_m",
    "wave_dir_rel_deg",
    "wind_dir_rel_deg",
    "shaft_power_kw",
];

pub const SECONDS_PER_DAY: i64 = 86_400;

/// Parses an ISO-8601 / RFC 3339 timestamp into UTC seconds.
pub fn parse_timestamp(s: &str) -> Result<i64> {
    DateTime::parse_from_rfc3339(s.trim())
        .map(|t| t.timestamp())
        .map_err(|e| Error::Data(format!("bad timestamp {s:?}: {e}")))
}

pub fn format_timestamp(t: i64) -> String {
    DateTime::<Utc>::from_timestamp(t, 0)
        .map(|d| d.format("%Y-%m-%dT%H:%M:%SZ").to_string())
        .unwrap_or_else(|| t.to_string())
}

pub fn parse_date(s: &str) -> Result<NaiveDate> {
    NaiveDate::parse_from_str(s.trim(), "%Y-%m-%d")
        .map_err(|e| Error::Data(format!("bad date {s:?}: {e}")))
}

/// UTC midnight of `date`, in seconds.
pub fn date_to_timestamp(date: NaiveDate) -> i64 {
    date.and_time(NaiveTime::MIN).and_utc().timestamp()
}

/// Calendar day (UTC) containing `t`.
pub fn timestamp_to_date(t: i64) -> NaiveDate {
    DateTime::<Utc>::from_timestamp(t.div_euclid(SECONDS_PER_DAY) * SECONDS_PER_DAY, 0)
        .expect("timestamp in chrono range")
        .date_naive()
}

/// Weather at a sensor fix, with directions relative to the vessel's course.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeatherAttachment {
    pub wave_height_m: f64,
    pub swell_height_m: f64,
    pub wave_dir_rel_deg: f64,
    pub wind_dir_rel_deg: f64,
}

/// One high-frequency telemetry fix.
#[derive(Debug, Clone, PartialEq)]
pub struct SensorRecord {
    /// UTC seconds.
    pub timestamp: i64,
    pub stw_knots: f64,
    pub rpm: f64,
    pub draft_aft_m: f64,
    pub draft_fore_m: f64,
    pub lat_deg: f64,
    pub lon_deg: f64,
    pub course_deg: f64,
    pub shaft_power_kw: f64,
    /// Absent until the record has been fused with a weather grid.
    pub weather: Option<WeatherAttachment>,
}

/// One daily, manually logged report. Weather entries may be blank in the source file.
#[derive(Debug, Clone, PartialEq)]
pub struct NoonReport {
    pub date: NaiveDate,
    pub stw_knots: f64,
    pub rpm: f64,
    pub draft_aft_m: f64,
    pub draft_fore_m: f64,
    pub wave_height_m: Option<f64>,
    pub swell_height_m: Option<f64>,
    pub wave_dir_rel_deg: Option<f64>,
    pub wind_dir_rel_deg: Option<f64>,
    pub shaft_power_kw: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VesselCategory {
    Sister,
    Similar,
    Different,
}

impl std::fmt::Display for VesselCategory {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            VesselCategory::Sister => "sister",
            VesselCategory::Similar => "similar",
            VesselCategory::Different => "different",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VesselMeta {
    pub vessel_id: String,
    pub category: VesselCategory,
    pub length_m: f64,
    pub beam_m: f64,
}

/// Anything carrying a UTC time tag.
pub trait Timestamped {
    fn timestamp(&self) -> i64;
}

impl Timestamped for SensorRecord {
    fn timestamp(&self) -> i64 {
        self.timestamp
    }
}

impl Timestamped for NoonReport {
    fn timestamp(&self) -> i64 {
        date_to_timestamp(self.date)
    }
}

/// The operating quantities the preprocessing filters look at.
pub trait OperatingPoint {
    fn stw_knots(&self) -> f64;
    fn rpm(&self) -> f64;
    fn shaft_power_kw(&self) -> f64;
}

macro_rules! operating_point {
    ($t:ty) => {
        impl OperatingPoint for $t {
            fn stw_knots(&self) -> f64 {
                self.stw_knots
            }
            fn rpm(&self) -> f64 {
                self.rpm
            }
            fn shaft_power_kw(&self) -> f64 {
                self.shaft_power_kw
            }
        }
    };
}
operating_point!(SensorRecord);
operating_point!(NoonReport);

// ---------------------------------------------------------------------------
// Ingestion
// ---------------------------------------------------------------------------

/// A data row that failed to parse or validate.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RowReject {
    /// 1-based line number in the source file (the header is line 1).
    pub line: u64,
    pub reason: String,
}

/// Rows read from a file: the valid ones plus a report on the rest.
#[derive(Debug, Clone)]
pub struct Ingested<T> {
    pub records: Vec<T>,
    pub rejects: Vec<RowReject>,
    pub warnings: Vec<String>,
}

struct Row<'a> {
    record: &'a csv::StringRecord,
    index: &'a HashMap<String, usize>,
}

impl Row<'_> {
    fn text(&self, column: &str) -> &str {
        self.index
            .get(column)
            .and_then(|&i| self.record.get(i))
            .map(str::trim)
            .unwrap_or("")
    }

    fn real(&self, column: &str) -> Result<f64, String> {
        let raw = self.text(column);
        match raw.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(v),
            _ => Err(format!("{column}: not a finite number ({raw:?})")),
        }
    }

    fn optional_real(&self, column: &str) -> Result<Option<f64>, String> {
        if self.text(column).is_empty() {
            Ok(None)
        } else {
            self.real(column).map(Some)
        }
    }
}

fn read_rows<T>(
    path: &Path,
    required: &[&str],
    mut parse: impl FnMut(&Row<'_>, Option<&T>) -> Result<T, String>,
) -> Result<Ingested<T>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().flexible(true).from_reader(file);
    let csv_err = |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    };
    let headers = reader.headers().map_err(csv_err)?.clone();
    let index: HashMap<String, usize> = headers
        .iter()
        .enumerate()
        .map(|(i, h)| (h.trim().to_string(), i))
        .collect();
    if let Some(missing) = required.iter().find(|c| !index.contains_key(**c)) {
        return Err(Error::Data(format!(
            "{}: missing required column {missing:?}",
            path.display()
        )));
    }

    let mut out = Ingested {
        records: Vec::new(),
        rejects: Vec::new(),
        warnings: Vec::new(),
    };
    for row in reader.records() {
        let record = row.map_err(csv_err)?;
        let line = record.position().map_or(0, |p| p.line());
        let view = Row {
            record: &record,
            index: &index,
        };
        match parse(&view, out.records.last()) {
            Ok(r) => out.records.push(r),
            Err(reason) => out.rejects.push(RowReject { line, reason }),
        }
    }
    if out.records.is_empty() && out.rejects.is_empty() {
        let msg = format!("{}: no data rows", path.display());
        log::warn!("{msg}");
        out.warnings.push(msg);
    }
    Ok(out)
}

fn parse_sensor_row(row: &Row<'_>, prev: Option<&SensorRecord>) -> Result<SensorRecord, String> {
    let timestamp = parse_timestamp(row.text("timestamp")).map_err(|e| e.to_string())?;
    if let Some(p) = prev {
        if timestamp <= p.timestamp {
            return Err(format!(
                "timestamp: {} does not follow {}",
                format_timestamp(timestamp),
                format_timestamp(p.timestamp)
            ));
        }
    }
    let lat_deg = row.real("lat_deg")?;
    let lon_deg = row.real("lon_deg")?;
    let course_deg = row.real("course_deg")?;
    if !(-90.0..=90.0).contains(&lat_deg) {
        return Err(format!("lat_deg: {lat_deg} outside [-90, 90]"));
    }
    if !(-180.0..=180.0).contains(&lon_deg) {
        return Err(format!("lon_deg: {lon_deg} outside [-180, 180]"));
    }
    if !(0.0..360.0).contains(&course_deg) {
        return Err(format!("course_deg: {course_deg} outside [0, 360)"));
    }
    let weather_cells: Vec<Option<f64>> = WEATHER_COLUMNS
        .iter()
        .map(|c| row.optional_real(c))
        .collect::<Result<_, _>>()?;
    let weather = match weather_cells.as_slice() {
        [Some(h), Some(s), Some(wd), Some(wi)] => Some(WeatherAttachment {
            wave_height_m: *h,
            swell_height_m: *s,
            wave_dir_rel_deg: *wd,
            wind_dir_rel_deg: *wi,
        }),
        cells if cells.iter().all(Option::is_none) => None,
        _ => return Err("weather columns partially filled".into()),
    };
    Ok(SensorRecord {
        timestamp,
        stw_knots: row.real("stw_knots")?,
        rpm: row.real("rpm")?,
        draft_aft_m: row.real("draft_aft_m")?,
        draft_fore_m: row.real("draft_fore_m")?,
        lat_deg,
        lon_deg,
        course_deg,
        shaft_power_kw: row.real("shaft_power_kw")?,
        weather,
    })
}

fn parse_noon_row(row: &Row<'_>, prev: Option<&NoonReport>) -> Result<NoonReport, String> {
    let date = parse_date(row.text("date")).map_err(|e| e.to_string())?;
    if let Some(p) = prev {
        if date <= p.date {
            return Err(format!("date: {date} does not follow {}", p.date));
        }
    }
    Ok(NoonReport {
        date,
        stw_knots: row.real("stw_knots")?,
        rpm: row.real("rpm")?,
        draft_aft_m: row.real("draft_aft_m")?,
        draft_fore_m: row.real("draft_fore_m")?,
        wave_height_m: row.optional_real("wave_height_m")?,
        swell_height_m: row.optional_real("swell_height_m")?,
        wave_dir_rel_deg: row.optional_real("wave_dir_rel_deg")?,
        wind_dir_rel_deg: row.optional_real("wind_dir_rel_deg")?,
        shaft_power_kw: row.real("shaft_power_kw")?,
    })
}

/// Reads a sensor file. Weather columns are optional; when present they are attached.
pub fn load_sensor_csv(path: &Path) -> Result<Ingested<SensorRecord>> {
    read_rows(path, &SENSOR_COLUMNS, parse_sensor_row)
}

pub fn load_noon_csv(path: &Path) -> Result<Ingested<NoonReport>> {
    read_rows(path, &NOON_COLUMNS, parse_noon_row)
}

fn write_rows(path: &Path, header: &[&str], rows: impl Iterator<Item = Vec<String>>) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let csv_err = |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(header).map_err(csv_err)?;
    for row in rows {
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn opt_cell(v: Option<f64>) -> String {
    v.map(format_f64).unwrap_or_default()
}

/// Writes sensor records; weather columns are added when any record carries weather.
pub fn write_sensor_csv(path: &Path, records: &[SensorRecord]) -> Result<()> {
    let with_weather = records.iter().any(|r| r.weather.is_some());
    let mut header: Vec<&str> = SENSOR_COLUMNS.to_vec();
    if with_weather {
        header.extend(WEATHER_COLUMNS);
    }
    let rows = records.iter().map(|r| {
        let mut row = vec![
            format_timestamp(r.timestamp),
            format_f64(r.stw_knots),
            format_f64(r.rpm),
            format_f64(r.draft_aft_m),
            format_f64(r.draft_fore_m),
            format_f64(r.lat_deg),
            format_f64(r.lon_deg),
            format_f64(r.course_deg),
            format_f64(r.shaft_power_kw),
        ];
        if with_weather {
            let w = r.weather;
            row.extend([
                opt_cell(w.map(|w| w.wave_height_m)),
                opt_cell(w.map(|w| w.swell_height_m)),
                opt_cell(w.map(|w| w.wave_dir_rel_deg)),
                opt_cell(w.map(|w| w.wind_dir_rel_deg)),
            ]);
        }
        row
    });
    write_rows(path, &header, rows)
}

pub fn write_noon_csv(path: &Path, reports: &[NoonReport]) -> Result<()> {
    let rows = reports.iter().map(|r| {
        vec![
            r.date.format("%Y-%m-%d").to_string(),
            format_f64(r.stw_knots),
            format_f64(r.rpm),
            format_f64(r.draft_aft_m),
            format_f64(r.draft_fore_m),
            opt_cell(r.wave_height_m),
            opt_cell(r.swell_height_m),
            opt_cell(r.wave_dir_rel_deg),
            opt_cell(r.wind_dir_rel_deg),
            format_f64(r.shaft_power_kw),
        ]
    });
    write_rows(path, &NOON_COLUMNS, rows)
}

// ---------------------------------------------------------------------------
// Preprocessing
// ---------------------------------------------------------------------------

/// Thresholds below/above which a row is discarded. Comparisons are strict.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    pub min_stw_knots: f64,
    pub min_rpm: f64,
    pub min_power_kw: f64,
    /// `None` disables the outlier cut.
    pub max_power_kw: Option<f64>,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            min_stw_knots: 2.0,
            min_rpm: 1.0,
            min_power_kw: 1.0,
            max_power_kw: Some(12_000.0),
        }
    }
}

/// Filter rules, in the order they are checked.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DropRule {
    LowSpeed,
    LowRpm,
    LowPower,
    PowerOutlier,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DropReport {
    pub low_speed: usize,
    pub low_rpm: usize,
    pub low_power: usize,
    pub power_outlier: usize,
}

impl DropReport {
    pub fn total(&self) -> usize {
        self.low_speed + self.low_rpm + self.low_power + self.power_outlier
    }

    fn count(&mut self, rule: DropRule) {
        match rule {
            DropRule::LowSpeed => self.low_speed += 1,
            DropRule::LowRpm => self.low_rpm += 1,
            DropRule::LowPower => self.low_power += 1,
            DropRule::PowerOutlier => self.power_outlier += 1,
        }
    }
}

/// First rule `record` violates, if any.
pub fn drop_rule<T: OperatingPoint>(record: &T, config: &PreprocessConfig) -> Option<DropRule> {
    let power = record.shaft_power_kw();
    if record.stw_knots() < config.min_stw_knots {
        Some(DropRule::LowSpeed)
    } else if record.rpm() < config.min_rpm {
        Some(DropRule::LowRpm)
    } else if power < config.min_power_kw {
        Some(DropRule::LowPower)
    } else if config.max_power_kw.is_some_and(|cap| power > cap) {
        Some(DropRule::PowerOutlier)
    } else {
        None
    }
}

#[derive(Debug, Clone)]
pub struct Preprocessed<T> {
    pub kept: Vec<T>,
    pub dropped: Vec<(T, DropRule)>,
    pub report: DropReport,
}

/// Splits `records` into kept and dropped rows, preserving order in both.
pub fn preprocess<T: OperatingPoint>(records: Vec<T>, config: &PreprocessConfig) -> Preprocessed<T> {
    let mut out = Preprocessed {
        kept: Vec::with_capacity(records.len()),
        dropped: Vec::new(),
        report: DropReport::default(),
    };
    for r in records {
        match drop_rule(&r, config) {
            Some(rule) => {
                out.report.count(rule);
                out.dropped.push((r, rule));
            }
            None => out.kept.push(r),
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Temporal split
// ---------------------------------------------------------------------------

/// Rows strictly before `train_end` train; the rest test.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    /// UTC seconds.
    pub train_end: i64,
}

impl SplitSpec {
    pub fn at_date(date: NaiveDate) -> Self {
        Self {
            train_end: date_to_timestamp(date),
        }
    }
}

pub fn temporal_split<T: Timestamped>(records: Vec<T>, spec: SplitSpec) -> Result<(Vec<T>, Vec<T>)> {
    if records.windows(2).any(|w| w[1].timestamp() < w[0].timestamp()) {
        return Err(Error::Data("records are not in time order".into()));
    }
    let cut = records.partition_point(|r| r.timestamp() < spec.train_end);
    if cut == 0 || cut == records.len() {
        return Err(Error::Config(format!(
            "split boundary {} leaves an empty {} set ({} rows total)",
            format_timestamp(spec.train_end),
            if cut == 0 { "train" } else { "test" },
            records.len()
        )));
    }
    let mut train = records;
    let test = train.split_off(cut);
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn op(stw: f64, rpm: f64, p: f64) -> NoonReport {
        NoonReport {
            date: NaiveDate::from_ymd_opt(2023, 5, 1).unwrap(),
            stw_knots: stw,
            rpm,
            draft_aft_m: 9.0,
            draft_fore_m: 9.0,
            wave_height_m: None,
            swell_height_m: None,
            wave_dir_rel_deg: None,
            wind_dir_rel_deg: None,
            shaft_power_kw: p,
        }
    }

    fn at(ts: i64) -> SensorRecord {
        SensorRecord {
            timestamp: ts,
            stw_knots: 12.0,
            rpm: 70.0,
            draft_aft_m: 9.0,
            draft_fore_m: 8.0,
            lat_deg: 40.0,
            lon_deg: -20.0,
            course_deg: 90.0,
            shaft_power_kw: 5000.0,
            weather: None,
        }
    }

    #[test]
    fn timestamps_round_trip() {
        let t = parse_timestamp("2023-06-01T12:15:00Z").unwrap();
        assert_eq!(format_timestamp(t), "2023-06-01T12:15:00Z");
        assert_eq!(parse_timestamp("2023-06-01T14:15:00+02:00").unwrap(), t);
        assert_eq!(timestamp_to_date(t), NaiveDate::from_ymd_opt(2023, 6, 1).unwrap());
    }

    #[test]
    fn threshold_examples() {
        let cfg = PreprocessConfig::default();
        assert_eq!(drop_rule(&op(1.9, 60.0, 5000.0), &cfg), Some(DropRule::LowSpeed));
        assert_eq!(drop_rule(&op(12.0, 70.0, 12000.0), &cfg), None);
        assert_eq!(drop_rule(&op(12.0, 70.0, 12001.0), &cfg), Some(DropRule::PowerOutlier));
        assert_eq!(drop_rule(&op(12.0, 0.5, 5000.0), &cfg), Some(DropRule::LowRpm));
        assert_eq!(drop_rule(&op(12.0, 70.0, 0.5), &cfg), Some(DropRule::LowPower));
        // several violations: first rule wins
        assert_eq!(drop_rule(&op(0.0, 0.0, 0.0), &cfg), Some(DropRule::LowSpeed));
        let no_cap = PreprocessConfig { max_power_kw: None, ..cfg };
        assert_eq!(drop_rule(&op(12.0, 70.0, 20000.0), &no_cap), None);
    }

    #[test]
    fn split_examples() {
        let boundary = SplitSpec::at_date(NaiveDate::from_ymd_opt(2024, 1, 1).unwrap());
        let t23 = parse_timestamp("2023-12-31T23:45:00Z").unwrap();
        let t24 = parse_timestamp("2024-01-01T00:00:00Z").unwrap();
        let (train, test) = temporal_split(vec![at(t23), at(t24)], boundary).unwrap();
        assert_eq!((train.len(), test.len()), (1, 1));
        assert_eq!(test[0].timestamp, t24);

        let all_before = vec![at(t23 - 900), at(t23)];
        assert!(matches!(temporal_split(all_before, boundary), Err(Error::Config(_))));
    }

    proptest! {
        #[test]
        fn preprocess_partitions_and_is_idempotent(
            rows in proptest::collection::vec((0.0f64..20.0, 0.0f64..100.0, -10.0f64..14000.0), 0..60)
        ) {
            let cfg = PreprocessConfig::default();
            let input: Vec<NoonReport> = rows.iter().map(|&(s, r, p)| op(s, r, p)).collect();
            let once = preprocess(input.clone(), &cfg);
            prop_assert_eq!(once.kept.len() + once.dropped.len(), input.len());
            prop_assert_eq!(once.report.total(), once.dropped.len());
            // order preserved: kept rows appear in input order
            let mut it = input.iter();
            for k in &once.kept {
                prop_assert!(it.any(|r| r == k));
            }
            let twice = preprocess(once.kept.clone(), &cfg);
            prop_assert_eq!(twice.kept, once.kept);
            prop_assert_eq!(twice.report.total(), 0);
        }

        #[test]
        fn split_partitions_in_order(n in 2usize..50, cut in 1usize..49) {
            prop_assume!(cut < n);
            let rows: Vec<SensorRecord> = (0..n as i64).map(|i| at(i * 900)).collect();
            let spec = SplitSpec { train_end: cut as i64 * 900 };
            let (train, test) = temporal_split(rows.clone(), spec).unwrap();
            prop_assert_eq!(train.len(), cut);
            prop_assert!(train.iter().all(|r| r.timestamp < spec.train_end));
            prop_assert!(test.iter().all(|r| r.timestamp >= spec.train_end));
            let joined: Vec<_> = train.into_iter().chain(test).collect();
            prop_assert_eq!(joined, rows);
        }
    }
}
