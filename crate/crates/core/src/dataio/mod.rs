//! Dataset schema, validation and imputation, NDVI-loss targets, flat-file
//! I/O, a synthetic generator with known ground truth, and county map export.

mod files;
mod synth;
mod validate;

use chrono::{Datelike, NaiveDate};
use serde::{Deserialize, Serialize};

use crate::encoder::TimeSeriesBatch;
use crate::numcore::Matrix;
use crate::{Error, Result};

pub use files::{
    export_county_map, read_dataset, read_raw, write_county_map, write_dataset, write_raw,
    CountySummary, ENRICHED_FILE, EVENTS_FILE, NDVI_FILE, WEATHER_FILE,
};
pub use synth::{synth_generate, synth_signal, SynthConfig, SynthTruth};
pub use validate::{validate_and_impute, Action, ImputationReport, MIN_DETECTION_CONFIDENCE};

/// Days of pre-fire weather per event.
pub const SEQ_LEN: usize = 30;

/// Weather channels in column order.
pub const WEATHER_CHANNELS: [&str; 9] = [
    "tavg_c",
    "precip_mm",
    "rh_min_pct",
    "rh_max_pct",
    "srad_wm2",
    "tmin_c",
    "tmax_c",
    "vpd_kpa",
    "wind_ms",
];

pub const PRECIP: usize = 1;
pub const RH_MIN: usize = 2;
pub const RH_MAX: usize = 3;
pub const TMIN: usize = 5;
pub const TMAX: usize = 6;
pub const WIND: usize = 8;

/// Enriched columns derived from the event table.
pub const TEMPORAL_COLUMNS: [&str; 3] = ["fire_duration_days", "fire_month", "fire_dayofyear"];

/// Enriched columns read from `enriched.csv`.
pub const ENRICHED_FILE_COLUMNS: [&str; 24] = [
    "ndvi_7d_slope",
    "ndvi_7d_std",
    "ndvi_14d_slope",
    "ndvi_14d_std",
    "ndvi_before_slope",
    "ndvi_before_std",
    "elevation",
    "LC_00",
    "LC_01",
    "LC_02",
    "LC_03",
    "LC_04",
    "LC_05",
    "LC_06",
    "LC_07",
    "LC_08",
    "LC_09",
    "LC_10",
    "LC_11",
    "LC_12",
    "LC_13",
    "LC_14",
    "LC_15",
    "LC_16",
];

/// Number of enriched features: temporal columns followed by file columns.
pub const N_ENRICHED: usize = TEMPORAL_COLUMNS.len() + ENRICHED_FILE_COLUMNS.len();

/// Index of `elevation` within [`ENRICHED_FILE_COLUMNS`].
pub const ELEVATION: usize = 6;
/// Index of `LC_00` within [`ENRICHED_FILE_COLUMNS`].
pub const LC_START: usize = 7;
pub const N_LAND_COVER: usize = 17;

/// Names of all 27 enriched features in matrix column order.
pub fn enriched_columns() -> Vec<&'static str> {
    TEMPORAL_COLUMNS
        .iter()
        .chain(ENRICHED_FILE_COLUMNS.iter())
        .copied()
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FireEvent {
    pub event_id: String,
    pub county_id: String,
    pub latitude: f64,
    pub longitude: f64,
    pub start_date: NaiveDate,
    pub fire_duration_days: f64,
    pub detection_confidence: Option<f64>,
    /// Observed vegetation loss when no NDVI series is supplied.
    pub target: Option<f64>,
}

impl FireEvent {
    pub fn fire_month(&self) -> u32 {
        self.start_date.month()
    }

    pub fn fire_dayofyear(&self) -> u32 {
        self.start_date.ordinal()
    }

    pub fn temporal_features(&self) -> [f64; 3] {
        [
            self.fire_duration_days,
            self.fire_month() as f64,
            self.fire_dayofyear() as f64,
        ]
    }
}

/// One day of weather; `None` marks a missing value.
#[derive(Debug, Clone, PartialEq)]
pub struct WeatherRow {
    pub event_id: String,
    /// Days relative to the fire start, in `-30..=-1`.
    pub day_offset: i32,
    pub values: [Option<f64>; 9],
}

/// One row of `enriched.csv`; `None` marks a missing value.
#[derive(Debug, Clone, PartialEq)]
pub struct EnrichedRecord {
    pub event_id: String,
    pub values: [Option<f64>; 24],
}

#[derive(Debug, Clone, PartialEq)]
pub struct NdviSample {
    pub event_id: String,
    pub date: NaiveDate,
    pub ndvi: f64,
}

/// Tables as read from disk, before validation.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RawTables {
    pub events: Vec<FireEvent>,
    pub weather: Vec<WeatherRow>,
    pub enriched: Vec<EnrichedRecord>,
    pub ndvi: Option<Vec<NdviSample>>,
}

/// Dated NDVI samples around one fire.
#[derive(Debug, Clone, PartialEq)]
pub struct NdviSeries {
    pub event_id: String,
    pub start_date: NaiveDate,
    pub samples: Vec<(NaiveDate, f64)>,
}

/// Last day offset of the pre-fire NDVI window.
pub const NDVI_BEFORE: (i64, i64) = (-30, -1);
/// Day offsets of the post-fire NDVI window.
pub const NDVI_AFTER: (i64, i64) = (0, 30);

/// Vegetation loss: mean NDVI over the 30 days before the fire minus the
/// minimum NDVI over the 30 days after it. Gains come out negative.
pub fn build_target(s: &NdviSeries) -> Result<f64> {
    let mut before = (0.0, 0usize);
    let mut after_min = f64::INFINITY;
    for &(date, v) in &s.samples {
        let off = (date - s.start_date).num_days();
        if (NDVI_BEFORE.0..=NDVI_BEFORE.1).contains(&off) {
            before.0 += v;
            before.1 += 1;
        } else if (NDVI_AFTER.0..=NDVI_AFTER.1).contains(&off) {
            after_min = after_min.min(v);
        }
    }
    if before.1 == 0 {
        return Err(Error::EmptyWindow(format!("{}: no NDVI before the fire", s.event_id)));
    }
    if after_min == f64::INFINITY {
        return Err(Error::EmptyWindow(format!("{}: no NDVI after the fire", s.event_id)));
    }
    Ok(before.0 / before.1 as f64 - after_min)
}

/// Validated, aligned model inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub events: Vec<FireEvent>,
    /// `N x 30 x 9`, day offsets -30..=-1 in order.
    pub weather: TimeSeriesBatch,
    /// `N x 27`, columns as in [`enriched_columns`].
    pub enriched: Matrix,
    pub targets: Vec<f64>,
}

impl Dataset {
    pub fn new(
        events: Vec<FireEvent>,
        weather: TimeSeriesBatch,
        enriched: Matrix,
        targets: Vec<f64>,
    ) -> Result<Self> {
        let n = events.len();
        if weather.len() != n || enriched.rows() != n || targets.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "{n} events, {} weather series, {} enriched rows, {} targets",
                weather.len(),
                enriched.rows(),
                targets.len()
            )));
        }
        if weather.steps() != SEQ_LEN || weather.width() != WEATHER_CHANNELS.len() {
            return Err(Error::ShapeMismatch(format!(
                "weather is {}x{} per event, expected {SEQ_LEN}x{}",
                weather.steps(),
                weather.width(),
                WEATHER_CHANNELS.len()
            )));
        }
        if enriched.cols() != N_ENRICHED {
            return Err(Error::ShapeMismatch(format!(
                "{} enriched columns, expected {N_ENRICHED}",
                enriched.cols()
            )));
        }
        Ok(Self {
            events,
            weather,
            enriched,
            targets,
        })
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            events: idx.iter().map(|&i| self.events[i].clone()).collect(),
            weather: self.weather.select(idx),
            enriched: Matrix::from_fn(idx.len(), self.enriched.cols(), |r, c| {
                self.enriched.get(idx[r], c)
            }),
            targets: idx.iter().map(|&i| self.targets[i]).collect(),
        }
    }

    pub fn county_ids(&self) -> Vec<&str> {
        self.events.iter().map(|e| e.county_id.as_str()).collect()
    }

    /// The tables this dataset would be written as, with targets carried in
    /// the event table.
    pub fn to_raw(&self) -> RawTables {
        let events = self
            .events
            .iter()
            .zip(&self.targets)
            .map(|(e, &y)| FireEvent {
                target: Some(y),
                ..e.clone()
            })
            .collect();
        let mut weather = Vec::with_capacity(self.len() * SEQ_LEN);
        let mut enriched = Vec::with_capacity(self.len());
        for (i, e) in self.events.iter().enumerate() {
            for t in 0..SEQ_LEN {
                weather.push(WeatherRow {
                    event_id: e.event_id.clone(),
                    day_offset: t as i32 - SEQ_LEN as i32,
                    values: std::array::from_fn(|c| Some(self.weather.get(i, t, c))),
                });
            }
            enriched.push(EnrichedRecord {
                event_id: e.event_id.clone(),
                values: std::array::from_fn(|c| {
                    Some(self.enriched.get(i, TEMPORAL_COLUMNS.len() + c))
                }),
            });
        }
        RawTables {
            events,
            weather,
            enriched,
            ndvi: None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn d(s: &str) -> NaiveDate {
        NaiveDate::parse_from_str(s, "%Y-%m-%d").unwrap()
    }

    fn series(start: &str, before: &[f64], after: &[f64]) -> NdviSeries {
        let start = d(start);
        let mut samples = Vec::new();
        for (k, &v) in before.iter().enumerate() {
            samples.push((start - chrono::Days::new(16 * k as u64 + 2), v));
        }
        for (k, &v) in after.iter().enumerate() {
            samples.push((start + chrono::Days::new(10 * k as u64), v));
        }
        NdviSeries {
            event_id: "e".into(),
            start_date: start,
            samples,
        }
    }

    #[test]
    fn target_cases() {
        let y = build_target(&series("2020-08-01", &[0.6, 0.6], &[0.5, 0.45, 0.6])).unwrap();
        assert!((y - 0.15).abs() < 1e-15);
        assert_eq!(build_target(&series("2020-08-01", &[0.4], &[0.4])).unwrap(), 0.0);
        let y = build_target(&series("2020-08-01", &[0.5, 0.7], &[0.65, 0.62, 0.80])).unwrap();
        assert!((y + 0.02).abs() < 1e-12, "{y}");
    }

    #[test]
    fn target_windows_must_be_populated() {
        assert!(matches!(
            build_target(&series("2020-08-01", &[], &[0.3])),
            Err(Error::EmptyWindow(_))
        ));
        assert!(matches!(
            build_target(&series("2020-08-01", &[0.3], &[])),
            Err(Error::EmptyWindow(_))
        ));
    }

    #[test]
    fn samples_outside_windows_are_ignored() {
        let mut s = series("2021-07-10", &[0.5], &[0.3]);
        s.samples.push((d("2021-05-01"), -1.0));
        s.samples.push((d("2021-09-30"), -1.0));
        assert!((build_target(&s).unwrap() - 0.2).abs() < 1e-15);
    }

    #[test]
    fn derived_temporal_features() {
        let e = FireEvent {
            event_id: "a".into(),
            county_id: "06007".into(),
            latitude: 39.7,
            longitude: -121.6,
            start_date: d("2020-03-01"),
            fire_duration_days: 4.0,
            detection_confidence: None,
            target: None,
        };
        assert_eq!(e.temporal_features(), [4.0, 3.0, 61.0]);
    }

    #[test]
    fn column_counts() {
        assert_eq!(enriched_columns().len(), 27);
        assert_eq!(ENRICHED_FILE_COLUMNS[ELEVATION], "elevation");
        assert_eq!(ENRICHED_FILE_COLUMNS[LC_START], "LC_00");
        assert_eq!(ENRICHED_FILE_COLUMNS[LC_START + N_LAND_COVER - 1], "LC_16");
    }
}
