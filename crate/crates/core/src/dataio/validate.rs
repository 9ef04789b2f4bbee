use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use super::{
    build_target, Dataset, NdviSeries, RawTables, ELEVATION, ENRICHED_FILE, ENRICHED_FILE_COLUMNS,
    EVENTS_FILE, LC_START, N_ENRICHED, N_LAND_COVER, PRECIP, RH_MAX, RH_MIN, SEQ_LEN,
    TEMPORAL_COLUMNS, TMAX, TMIN, WEATHER_CHANNELS, WEATHER_FILE, WIND,
};
use crate::encoder::TimeSeriesBatch;
use crate::numcore::Matrix;
use crate::{Error, Result};

/// Minimum fire-detection confidence kept when the column is present.
pub const MIN_DETECTION_CONFIDENCE: f64 = 60.0;

/// One cleaning step applied during validation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Action {
    DroppedLowConfidence { event_id: String, confidence: f64 },
    DroppedMissingWeather { event_id: String, channel: String },
    DroppedEmptyNdviWindow { event_id: String, reason: String },
    FilledWeather { event_id: String, channel: String, days: usize, value: f64 },
    ImputedElevation { event_id: String, value: f64 },
    ZeroFilledLandCover { event_id: String, column: String },
    ImputedNdviFeature { event_id: String, column: String, value: f64 },
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Action::DroppedLowConfidence { event_id, confidence } => {
                write!(f, "dropped {event_id}: detection confidence {confidence} < {MIN_DETECTION_CONFIDENCE}")
            }
            Action::DroppedMissingWeather { event_id, channel } => {
                write!(f, "dropped {event_id}: {channel} missing on every day")
            }
            Action::DroppedEmptyNdviWindow { event_id, reason } => {
                write!(f, "dropped {event_id}: {reason}")
            }
            Action::FilledWeather { event_id, channel, days, value } => {
                write!(f, "filled {days} missing {channel} day(s) of {event_id} with {value}")
            }
            Action::ImputedElevation { event_id, value } => {
                write!(f, "imputed elevation of {event_id} with the county mean {value}")
            }
            Action::ZeroFilledLandCover { event_id, column } => {
                write!(f, "set missing {column} of {event_id} to 0")
            }
            Action::ImputedNdviFeature { event_id, column, value } => {
                write!(f, "imputed {column} of {event_id} with the column mean {value}")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ImputationReport {
    pub actions: Vec<Action>,
}

impl ImputationReport {
    pub fn dropped(&self) -> usize {
        self.actions
            .iter()
            .filter(|a| {
                matches!(
                    a,
                    Action::DroppedLowConfidence { .. }
                        | Action::DroppedMissingWeather { .. }
                        | Action::DroppedEmptyNdviWindow { .. }
                )
            })
            .count()
    }

    pub fn filled_weather_days(&self) -> usize {
        self.actions
            .iter()
            .map(|a| match a {
                Action::FilledWeather { days, .. } => *days,
                _ => 0,
            })
            .sum()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

fn schema(file: &str, row: usize, column: &str, message: impl Into<String>) -> Error {
    Error::Schema {
        file: file.into(),
        row,
        column: column.into(),
        message: message.into(),
    }
}

/// Line number of data row `i` in a file with a header line.
fn line(i: usize) -> usize {
    i + 2
}

fn check_weather_row(row: usize, values: &[Option<f64>; 9]) -> Result<()> {
    for (c, v) in values.iter().enumerate() {
        if let Some(v) = v {
            if v.is_infinite() {
                return Err(schema(WEATHER_FILE, row, WEATHER_CHANNELS[c], "infinite value"));
            }
        }
    }
    let v = |c: usize| values[c].filter(|x| !x.is_nan());
    for c in [RH_MIN, RH_MAX] {
        if let Some(h) = v(c) {
            if !(0.0..=100.0).contains(&h) {
                return Err(schema(WEATHER_FILE, row, WEATHER_CHANNELS[c], format!("humidity {h} outside [0, 100]")));
            }
        }
    }
    for c in [PRECIP, WIND] {
        if let Some(x) = v(c) {
            if x < 0.0 {
                return Err(schema(WEATHER_FILE, row, WEATHER_CHANNELS[c], format!("negative value {x}")));
            }
        }
    }
    if let (Some(lo), Some(hi)) = (v(TMIN), v(TMAX)) {
        if lo > hi {
            return Err(schema(WEATHER_FILE, row, WEATHER_CHANNELS[TMIN], format!("tmin {lo} above tmax {hi}")));
        }
    }
    Ok(())
}

/// Apply the cleaning rules and assemble an aligned [`Dataset`]:
///
/// - events with `detection_confidence < 60` are dropped when the column is present;
/// - missing weather days are filled with the event's mean of that variable over
///   the available days; events missing a variable on every day are dropped;
/// - missing elevation is set to the mean of the per-county elevations;
/// - missing land-cover fractions are set to 0;
/// - missing NDVI slope/std features are set to the column mean;
/// - targets come from the NDVI series when given (events with an empty window
///   are dropped), otherwise from the event table.
pub fn validate_and_impute(raw: &RawTables) -> Result<(Dataset, ImputationReport)> {
    let mut report = ImputationReport::default();

    let mut seen = HashSet::new();
    for (i, e) in raw.events.iter().enumerate() {
        let row = line(i);
        if !seen.insert(e.event_id.as_str()) {
            return Err(schema(EVENTS_FILE, row, "event_id", format!("duplicate event `{}`", e.event_id)));
        }
        if !e.latitude.is_finite() || !e.longitude.is_finite() {
            return Err(schema(EVENTS_FILE, row, "latitude", "non-finite coordinates"));
        }
        if !(e.fire_duration_days >= 0.0 && e.fire_duration_days.is_finite()) {
            return Err(schema(EVENTS_FILE, row, "fire_duration_days", "duration must be finite and >= 0"));
        }
    }

    let mut weather: HashMap<&str, [[Option<f64>; 9]; SEQ_LEN]> = HashMap::new();
    for (i, w) in raw.weather.iter().enumerate() {
        let row = line(i);
        if !seen.contains(w.event_id.as_str()) {
            return Err(schema(WEATHER_FILE, row, "event_id", format!("unknown event `{}`", w.event_id)));
        }
        if !(-(SEQ_LEN as i32)..=-1).contains(&w.day_offset) {
            return Err(schema(WEATHER_FILE, row, "day_offset", format!("offset {} outside -30..=-1", w.day_offset)));
        }
        check_weather_row(row, &w.values)?;
        let days = weather.entry(w.event_id.as_str()).or_insert([[None; 9]; SEQ_LEN]);
        let t = (w.day_offset + SEQ_LEN as i32) as usize;
        if days[t].iter().any(Option::is_some) {
            return Err(schema(WEATHER_FILE, row, "day_offset", format!("duplicate day {} for `{}`", w.day_offset, w.event_id)));
        }
        days[t] = w.values.map(|v| v.filter(|x| !x.is_nan()));
    }

    let mut enriched: HashMap<&str, &[Option<f64>; 24]> = HashMap::new();
    for (i, r) in raw.enriched.iter().enumerate() {
        let row = line(i);
        if !seen.contains(r.event_id.as_str()) {
            return Err(schema(ENRICHED_FILE, row, "event_id", format!("unknown event `{}`", r.event_id)));
        }
        if enriched.insert(r.event_id.as_str(), &r.values).is_some() {
            return Err(schema(ENRICHED_FILE, row, "event_id", format!("duplicate event `{}`", r.event_id)));
        }
        for (c, v) in r.values.iter().enumerate() {
            if v.is_some_and(f64::is_infinite) {
                return Err(schema(ENRICHED_FILE, row, ENRICHED_FILE_COLUMNS[c], "infinite value"));
            }
        }
        let lc = &r.values[LC_START..LC_START + N_LAND_COVER];
        let mut total = 0.0;
        for (k, v) in lc.iter().enumerate() {
            if let Some(v) = v.filter(|x| !x.is_nan()) {
                if !(0.0..=1.0).contains(&v) {
                    return Err(schema(ENRICHED_FILE, row, ENRICHED_FILE_COLUMNS[LC_START + k], format!("fraction {v} outside [0, 1]")));
                }
                total += v;
            }
        }
        if total > 1.0 + 1e-6 {
            return Err(schema(ENRICHED_FILE, row, "LC_00", format!("land-cover fractions sum to {total}")));
        }
    }

    let ndvi: Option<HashMap<&str, Vec<_>>> = raw.ndvi.as_ref().map(|samples| {
        let mut m: HashMap<&str, Vec<_>> = HashMap::new();
        for s in samples {
            m.entry(s.event_id.as_str()).or_default().push((s.date, s.ndvi));
        }
        m
    });

    struct Kept {
        event: usize,
        days: [[f64; 9]; SEQ_LEN],
        record: [Option<f64>; 24],
        target: f64,
    }
    let mut kept = Vec::new();

    'events: for (i, e) in raw.events.iter().enumerate() {
        let row = line(i);
        if let Some(c) = e.detection_confidence {
            if c < MIN_DETECTION_CONFIDENCE {
                report.actions.push(Action::DroppedLowConfidence {
                    event_id: e.event_id.clone(),
                    confidence: c,
                });
                continue;
            }
        }
        let empty = [[None; 9]; SEQ_LEN];
        let days = weather.get(e.event_id.as_str()).unwrap_or(&empty);
        let mut filled = [[0.0; 9]; SEQ_LEN];
        let mut fills = Vec::new();
        for (c, name) in WEATHER_CHANNELS.iter().enumerate() {
            let present: Vec<f64> = days.iter().filter_map(|d| d[c]).collect();
            if present.is_empty() {
                report.actions.push(Action::DroppedMissingWeather {
                    event_id: e.event_id.clone(),
                    channel: name.to_string(),
                });
                continue 'events;
            }
            let mean = present.iter().sum::<f64>() / present.len() as f64;
            for (t, d) in days.iter().enumerate() {
                filled[t][c] = d[c].unwrap_or(mean);
            }
            if present.len() < SEQ_LEN {
                fills.push(Action::FilledWeather {
                    event_id: e.event_id.clone(),
                    channel: name.to_string(),
                    days: SEQ_LEN - present.len(),
                    value: mean,
                });
            }
        }

        let target = match &ndvi {
            Some(m) => {
                let series = NdviSeries {
                    event_id: e.event_id.clone(),
                    start_date: e.start_date,
                    samples: m.get(e.event_id.as_str()).cloned().unwrap_or_default(),
                };
                match build_target(&series) {
                    Ok(y) => y,
                    Err(Error::EmptyWindow(reason)) => {
                        report.actions.push(Action::DroppedEmptyNdviWindow {
                            event_id: e.event_id.clone(),
                            reason,
                        });
                        continue;
                    }
                    Err(err) => return Err(err),
                }
            }
            None => match e.target {
                Some(y) if y.is_finite() => y,
                _ => return Err(schema(EVENTS_FILE, row, "target", "missing target and no NDVI series")),
            },
        };

        let Some(record) = enriched.get(e.event_id.as_str()) else {
            return Err(schema(ENRICHED_FILE, 0, "event_id", format!("no enriched row for event `{}`", e.event_id)));
        };
        report.actions.extend(fills);
        kept.push(Kept {
            event: i,
            days: filled,
            record: record.map(|v| v.filter(|x| !x.is_nan())),
            target,
        });
    }

    if kept.is_empty() {
        return Err(Error::DegenerateInput("no events survived validation".into()));
    }

    let mut by_county: BTreeMap<&str, (f64, usize)> = BTreeMap::new();
    for k in &kept {
        if let Some(v) = k.record[ELEVATION] {
            let c = by_county.entry(raw.events[k.event].county_id.as_str()).or_default();
            c.0 += v;
            c.1 += 1;
        }
    }
    let elevation_fill = if by_county.is_empty() {
        None
    } else {
        let s: f64 = by_county.values().map(|(s, n)| s / *n as f64).sum();
        Some(s / by_county.len() as f64)
    };

    let mut column_fill = [0.0; LC_START];
    for (c, fill) in column_fill.iter_mut().enumerate().take(ELEVATION) {
        let present: Vec<f64> = kept.iter().filter_map(|k| k.record[c]).collect();
        if !present.is_empty() {
            *fill = present.iter().sum::<f64>() / present.len() as f64;
        }
    }

    let n = kept.len();
    let mut events = Vec::with_capacity(n);
    let mut series = TimeSeriesBatch::zeros(n, SEQ_LEN, WEATHER_CHANNELS.len());
    let mut features = Matrix::zeros(n, N_ENRICHED);
    let mut targets = Vec::with_capacity(n);
    for (i, k) in kept.iter().enumerate() {
        let e = &raw.events[k.event];
        for (t, day) in k.days.iter().enumerate() {
            for (c, &v) in day.iter().enumerate() {
                series.set(i, t, c, v);
            }
        }
        let row = features.row_mut(i);
        row[..TEMPORAL_COLUMNS.len()].copy_from_slice(&e.temporal_features());
        for (c, v) in k.record.iter().enumerate() {
            let name = ENRICHED_FILE_COLUMNS[c];
            let value = match *v {
                Some(v) => v,
                None if c == ELEVATION => {
                    let Some(fill) = elevation_fill else {
                        return Err(Error::DegenerateInput("elevation is missing for every event".into()));
                    };
                    report.actions.push(Action::ImputedElevation {
                        event_id: e.event_id.clone(),
                        value: fill,
                    });
                    fill
                }
                None if c >= LC_START => {
                    report.actions.push(Action::ZeroFilledLandCover {
                        event_id: e.event_id.clone(),
                        column: name.to_string(),
                    });
                    0.0
                }
                None => {
                    report.actions.push(Action::ImputedNdviFeature {
                        event_id: e.event_id.clone(),
                        column: name.to_string(),
                        value: column_fill[c],
                    });
                    column_fill[c]
                }
            };
            row[TEMPORAL_COLUMNS.len() + c] = value;
        }
        events.push(super::FireEvent {
            target: Some(k.target),
            ..e.clone()
        });
        targets.push(k.target);
    }
    Ok((Dataset::new(events, series, features, targets)?, report))
}

#[cfg(test)]
mod tests {
    use chrono::NaiveDate;

    use super::super::{EnrichedRecord, FireEvent, NdviSample, WeatherRow};
    use super::*;

    fn event(id: &str, county: &str) -> FireEvent {
        FireEvent {
            event_id: id.into(),
            county_id: county.into(),
            latitude: 38.0,
            longitude: -120.0,
            start_date: NaiveDate::from_ymd_opt(2021, 8, 1).unwrap(),
            fire_duration_days: 3.0,
            detection_confidence: None,
            target: Some(0.1),
        }
    }

    fn day(t: usize) -> [Option<f64>; 9] {
        let t = t as f64;
        [
            Some(20.0 + t),
            Some(0.5),
            Some(30.0),
            Some(70.0),
            Some(250.0),
            Some(12.0 + t),
            Some(28.0 + t),
            Some(1.5),
            Some(2.0 + 0.1 * t),
        ]
    }

    fn record(elevation: Option<f64>) -> [Option<f64>; 24] {
        let mut v = [Some(0.0); 24];
        v[ELEVATION] = elevation;
        v[LC_START] = Some(0.25);
        v[LC_START + 1] = Some(0.5);
        v
    }

    fn tables(n: usize) -> RawTables {
        let mut raw = RawTables::default();
        for i in 0..n {
            let id = format!("e{i}");
            raw.events.push(event(&id, &format!("c{i}")));
            for t in 0..SEQ_LEN {
                raw.weather.push(WeatherRow {
                    event_id: id.clone(),
                    day_offset: t as i32 - 30,
                    values: day(t),
                });
            }
            raw.enriched.push(EnrichedRecord {
                event_id: id,
                values: record(Some(100.0 * (i + 1) as f64)),
            });
        }
        raw
    }

    #[test]
    fn clean_tables_pass_through() {
        let (ds, report) = validate_and_impute(&tables(3)).unwrap();
        assert!(report.is_empty());
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.weather.get(1, 4, 0), 24.0);
        assert_eq!(ds.enriched.get(2, 3 + ELEVATION), 300.0);
        assert_eq!(&ds.enriched.row(0)[..3], &[3.0, 8.0, 213.0]);
    }

    #[test]
    fn fully_missing_variable_drops_event() {
        let mut raw = tables(3);
        for w in raw.weather.iter_mut().filter(|w| w.event_id == "e1") {
            w.values[PRECIP] = None;
        }
        let (ds, report) = validate_and_impute(&raw).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(report.dropped(), 1);
        assert_eq!(ds.events[1].event_id, "e2");
    }

    #[test]
    fn partial_gaps_use_event_mean() {
        let mut raw = tables(1);
        for t in [3, 10, 29] {
            raw.weather[t].values[WIND] = None;
        }
        let (ds, report) = validate_and_impute(&raw).unwrap();
        let present: f64 = (0..30).filter(|t| ![3, 10, 29].contains(t)).map(|t| 2.0 + 0.1 * t as f64).sum();
        let expect = present / 27.0;
        for t in [3, 10, 29] {
            assert!((ds.weather.get(0, t, WIND) - expect).abs() < 1e-14);
        }
        assert_eq!(report.filled_weather_days(), 3);
    }

    #[test]
    fn missing_days_count_as_missing_values() {
        let mut raw = tables(1);
        raw.weather.retain(|w| w.day_offset != -5);
        let (ds, report) = validate_and_impute(&raw).unwrap();
        assert_eq!(report.filled_weather_days(), 9);
        assert!((ds.weather.get(0, 25, 0) - (20.0 + (435.0 - 25.0) / 29.0)).abs() < 1e-12);
    }

    #[test]
    fn elevation_uses_mean_over_counties() {
        let mut raw = tables(5);
        raw.enriched[1].values[ELEVATION] = None;
        raw.enriched[3].values[ELEVATION] = None;
        let (ds, report) = validate_and_impute(&raw).unwrap();
        let fill = (100.0 + 300.0 + 500.0) / 3.0;
        assert_eq!(ds.enriched.get(1, 3 + ELEVATION), fill);
        assert_eq!(ds.enriched.get(3, 3 + ELEVATION), fill);
        assert_eq!(report.actions.len(), 2);
    }

    #[test]
    fn land_cover_gaps_become_zero() {
        let mut raw = tables(2);
        raw.enriched[0].values[LC_START + 1] = None;
        let (ds, report) = validate_and_impute(&raw).unwrap();
        assert_eq!(ds.enriched.get(0, 3 + LC_START + 1), 0.0);
        assert!(matches!(report.actions[0], Action::ZeroFilledLandCover { .. }));
    }

    #[test]
    fn low_confidence_detections_dropped() {
        let mut raw = tables(2);
        raw.events[0].detection_confidence = Some(40.0);
        raw.events[1].detection_confidence = Some(60.0);
        let (ds, report) = validate_and_impute(&raw).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(report.dropped(), 1);
    }

    #[test]
    fn ndvi_series_overrides_target_column() {
        let mut raw = tables(2);
        let start = raw.events[0].start_date;
        raw.ndvi = Some(vec![
            NdviSample { event_id: "e0".into(), date: start - chrono::Days::new(8), ndvi: 0.7 },
            NdviSample { event_id: "e0".into(), date: start + chrono::Days::new(8), ndvi: 0.4 },
            NdviSample { event_id: "e1".into(), date: start + chrono::Days::new(8), ndvi: 0.4 },
        ]);
        let (ds, report) = validate_and_impute(&raw).unwrap();
        assert_eq!(ds.len(), 1);
        assert!((ds.targets[0] - 0.3).abs() < 1e-15);
        assert!(matches!(report.actions[0], Action::DroppedEmptyNdviWindow { .. }));
    }

    #[test]
    fn schema_errors_carry_location() {
        let mut raw = tables(2);
        raw.weather[35].values[RH_MIN] = Some(120.0);
        match validate_and_impute(&raw) {
            Err(Error::Schema { file, row, column, .. }) => {
                assert_eq!(file, WEATHER_FILE);
                assert_eq!(row, 37);
                assert_eq!(column, "rh_min_pct");
            }
            other => panic!("unexpected {other:?}"),
        }

        let mut raw = tables(2);
        raw.enriched[1].values[LC_START + 2] = Some(0.5);
        assert!(matches!(validate_and_impute(&raw), Err(Error::Schema { row: 3, .. })));

        let mut raw = tables(2);
        raw.events[1].event_id = "e0".into();
        assert!(matches!(validate_and_impute(&raw), Err(Error::Schema { row: 3, .. })));
    }

    #[test]
    fn idempotent_on_own_output() {
        let mut raw = tables(4);
        raw.weather[7].values[0] = None;
        raw.enriched[2].values[ELEVATION] = None;
        let (once, _) = validate_and_impute(&raw).unwrap();
        let (twice, report) = validate_and_impute(&once.to_raw()).unwrap();
        assert_eq!(once, twice);
        assert!(report.is_empty());
    }
}
