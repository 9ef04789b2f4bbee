use std::collections::HashMap;
use std::fs;
use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use super::{
    validate_and_impute, Dataset, EnrichedRecord, FireEvent, ImputationReport, NdviSample,
    RawTables, WeatherRow, ENRICHED_FILE_COLUMNS, WEATHER_CHANNELS,
};
use crate::{Error, Result};

pub const EVENTS_FILE: &str = "events.csv";
pub const WEATHER_FILE: &str = "weather.csv";
pub const ENRICHED_FILE: &str = "enriched.csv";
pub const NDVI_FILE: &str = "ndvi.csv";

const DATE_FORMAT: &str = "%Y-%m-%d";

/// Per-county means of observed loss, predicted loss and confidence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountySummary {
    pub county_id: String,
    pub opfvl: f64,
    pub ppvl: f64,
    pub apc: f64,
}

/// Shortest representation that parses back to the same bits.
fn num(v: f64) -> String {
    format!("{v}")
}

fn opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

struct Table {
    file: &'static str,
    columns: HashMap<String, usize>,
    rows: Vec<csv::StringRecord>,
}

impl Table {
    fn read(dir: &Path, file: &'static str) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(dir.join(file))?;
        let columns = rdr
            .headers()?
            .iter()
            .enumerate()
            .map(|(i, h)| (h.to_string(), i))
            .collect();
        let rows = rdr.records().collect::<std::result::Result<_, _>>()?;
        Ok(Self { file, columns, rows })
    }

    fn err(&self, i: usize, column: &str, message: impl Into<String>) -> Error {
        Error::Schema {
            file: self.file.into(),
            row: i + 2,
            column: column.into(),
            message: message.into(),
        }
    }

    fn index(&self, column: &str) -> Result<usize> {
        self.columns.get(column).copied().ok_or_else(|| Error::Schema {
            file: self.file.into(),
            row: 1,
            column: column.into(),
            message: "missing column".into(),
        })
    }

    fn text<'a>(&'a self, i: usize, col: usize) -> &'a str {
        self.rows[i].get(col).unwrap_or("")
    }

    fn string(&self, i: usize, name: &str, col: usize) -> Result<String> {
        let s = self.text(i, col);
        if s.is_empty() {
            return Err(self.err(i, name, "empty value"));
        }
        Ok(s.to_string())
    }

    fn optional(&self, i: usize, name: &str, col: usize) -> Result<Option<f64>> {
        match self.text(i, col) {
            "" | "NA" | "NaN" | "nan" => Ok(None),
            s => s
                .parse::<f64>()
                .map(Some)
                .map_err(|_| self.err(i, name, format!("`{s}` is not a number"))),
        }
    }

    fn number(&self, i: usize, name: &str, col: usize) -> Result<f64> {
        self.optional(i, name, col)?
            .ok_or_else(|| self.err(i, name, "missing value"))
    }

    fn date(&self, i: usize, name: &str, col: usize) -> Result<NaiveDate> {
        let s = self.text(i, col);
        NaiveDate::parse_from_str(s, DATE_FORMAT)
            .map_err(|_| self.err(i, name, format!("`{s}` is not an ISO-8601 date")))
    }
}

/// Read the flat files of a dataset directory without validating them.
pub fn read_raw(dir: &Path) -> Result<RawTables> {
    let t = Table::read(dir, EVENTS_FILE)?;
    let [id, county, lat, lon, start, dur] = [
        "event_id",
        "county_id",
        "latitude",
        "longitude",
        "start_date",
        "fire_duration_days",
    ]
    .map(|c| t.index(c));
    let (id, county, lat, lon, start, dur) = (id?, county?, lat?, lon?, start?, dur?);
    let conf = t.columns.get("detection_confidence").copied();
    let target = t.columns.get("target").copied();
    let mut events = Vec::with_capacity(t.rows.len());
    for i in 0..t.rows.len() {
        events.push(FireEvent {
            event_id: t.string(i, "event_id", id)?,
            county_id: t.string(i, "county_id", county)?,
            latitude: t.number(i, "latitude", lat)?,
            longitude: t.number(i, "longitude", lon)?,
            start_date: t.date(i, "start_date", start)?,
            fire_duration_days: t.number(i, "fire_duration_days", dur)?,
            detection_confidence: match conf {
                Some(c) => t.optional(i, "detection_confidence", c)?,
                None => None,
            },
            target: match target {
                Some(c) => t.optional(i, "target", c)?,
                None => None,
            },
        });
    }

    let t = Table::read(dir, WEATHER_FILE)?;
    let id = t.index("event_id")?;
    let off = t.index("day_offset")?;
    let cols = WEATHER_CHANNELS.map(|c| t.index(c));
    let mut ci = [0; 9];
    for (k, c) in cols.into_iter().enumerate() {
        ci[k] = c?;
    }
    let mut weather = Vec::with_capacity(t.rows.len());
    for i in 0..t.rows.len() {
        let s = t.text(i, off);
        let day_offset = s
            .parse::<i32>()
            .map_err(|_| t.err(i, "day_offset", format!("`{s}` is not an integer")))?;
        let mut values = [None; 9];
        for (k, &c) in ci.iter().enumerate() {
            values[k] = t.optional(i, WEATHER_CHANNELS[k], c)?;
        }
        weather.push(WeatherRow {
            event_id: t.string(i, "event_id", id)?,
            day_offset,
            values,
        });
    }

    let t = Table::read(dir, ENRICHED_FILE)?;
    let id = t.index("event_id")?;
    let mut ci = [0; 24];
    for (k, name) in ENRICHED_FILE_COLUMNS.iter().enumerate() {
        ci[k] = t.index(name)?;
    }
    let mut enriched = Vec::with_capacity(t.rows.len());
    for i in 0..t.rows.len() {
        let mut values = [None; 24];
        for (k, &c) in ci.iter().enumerate() {
            values[k] = t.optional(i, ENRICHED_FILE_COLUMNS[k], c)?;
        }
        enriched.push(EnrichedRecord {
            event_id: t.string(i, "event_id", id)?,
            values,
        });
    }

    let ndvi = if dir.join(NDVI_FILE).exists() {
        let t = Table::read(dir, NDVI_FILE)?;
        let [id, date, v] = ["event_id", "date", "ndvi"].map(|c| t.index(c));
        let (id, date, v) = (id?, date?, v?);
        let mut samples = Vec::with_capacity(t.rows.len());
        for i in 0..t.rows.len() {
            let ndvi = t.number(i, "ndvi", v)?;
            if !(-1.0..=1.0).contains(&ndvi) {
                return Err(t.err(i, "ndvi", format!("NDVI {ndvi} outside [-1, 1]")));
            }
            samples.push(NdviSample {
                event_id: t.string(i, "event_id", id)?,
                date: t.date(i, "date", date)?,
                ndvi,
            });
        }
        Some(samples)
    } else {
        None
    };

    Ok(RawTables {
        events,
        weather,
        enriched,
        ndvi,
    })
}

/// Write raw tables as flat files into `dir` (created if needed).
pub fn write_raw(dir: &Path, raw: &RawTables) -> Result<()> {
    fs::create_dir_all(dir)?;

    let with_conf = raw.events.iter().any(|e| e.detection_confidence.is_some());
    let with_target = raw.events.iter().any(|e| e.target.is_some());
    let mut w = csv::Writer::from_path(dir.join(EVENTS_FILE))?;
    let mut header = vec![
        "event_id",
        "county_id",
        "latitude",
        "longitude",
        "start_date",
        "fire_duration_days",
    ];
    if with_conf {
        header.push("detection_confidence");
    }
    if with_target {
        header.push("target");
    }
    w.write_record(&header)?;
    for e in &raw.events {
        let mut rec = vec![
            e.event_id.clone(),
            e.county_id.clone(),
            num(e.latitude),
            num(e.longitude),
            e.start_date.format(DATE_FORMAT).to_string(),
            num(e.fire_duration_days),
        ];
        if with_conf {
            rec.push(opt(e.detection_confidence));
        }
        if with_target {
            rec.push(opt(e.target));
        }
        w.write_record(&rec)?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join(WEATHER_FILE))?;
    let mut header = vec!["event_id", "day_offset"];
    header.extend(WEATHER_CHANNELS);
    w.write_record(&header)?;
    for r in &raw.weather {
        let mut rec = vec![r.event_id.clone(), r.day_offset.to_string()];
        rec.extend(r.values.iter().map(|&v| opt(v)));
        w.write_record(&rec)?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join(ENRICHED_FILE))?;
    let mut header = vec!["event_id"];
    header.extend(ENRICHED_FILE_COLUMNS);
    w.write_record(&header)?;
    for r in &raw.enriched {
        let mut rec = vec![r.event_id.clone()];
        rec.extend(r.values.iter().map(|&v| opt(v)));
        w.write_record(&rec)?;
    }
    w.flush()?;

    if let Some(samples) = &raw.ndvi {
        let mut w = csv::Writer::from_path(dir.join(NDVI_FILE))?;
        w.write_record(["event_id", "date", "ndvi"])?;
        for s in samples {
            w.write_record([
                s.event_id.clone(),
                s.date.format(DATE_FORMAT).to_string(),
                num(s.ndvi),
            ])?;
        }
        w.flush()?;
    }
    Ok(())
}

pub fn write_dataset(dir: &Path, ds: &Dataset) -> Result<()> {
    write_raw(dir, &ds.to_raw())
}

/// Read, validate and impute a dataset directory.
pub fn read_dataset(dir: &Path) -> Result<(Dataset, ImputationReport)> {
    validate_and_impute(&read_raw(dir)?)
}

/// County table with a `county_id,opfvl,ppvl,apc` header, six decimals,
/// rows sorted by county id.
pub fn write_county_map(summaries: &[CountySummary]) -> Result<String> {
    if summaries.is_empty() {
        return Err(Error::DegenerateInput("no county summaries to export".into()));
    }
    let mut rows: Vec<&CountySummary> = summaries.iter().collect();
    rows.sort_by(|a, b| a.county_id.cmp(&b.county_id));
    let mut out = String::from("county_id,opfvl,ppvl,apc\n");
    for s in rows {
        if !(0.0..=1.0).contains(&s.apc) {
            return Err(Error::DegenerateInput(format!(
                "confidence {} of county {} outside [0, 1]",
                s.apc, s.county_id
            )));
        }
        if !s.opfvl.is_finite() || !s.ppvl.is_finite() {
            return Err(Error::NonFinite(format!("county {} summary", s.county_id)));
        }
        out.push_str(&format!("{},{:.6},{:.6},{:.6}\n", s.county_id, s.opfvl, s.ppvl, s.apc));
    }
    Ok(out)
}

pub fn export_county_map(summaries: &[CountySummary], path: &Path) -> Result<()> {
    let text = write_county_map(summaries)?;
    fs::write(path, text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn summary(id: &str, o: f64, p: f64, a: f64) -> CountySummary {
        CountySummary {
            county_id: id.into(),
            opfvl: o,
            ppvl: p,
            apc: a,
        }
    }

    #[test]
    fn county_map_fixture() {
        let text = write_county_map(&[summary("06007", 0.0123, 0.0091, 0.984)]).unwrap();
        assert_eq!(text, "county_id,opfvl,ppvl,apc\n06007,0.012300,0.009100,0.984000\n");
    }

    #[test]
    fn county_map_sorted() {
        let text = write_county_map(&[
            summary("06021", 0.1, 0.2, 0.5),
            summary("06007", 0.0, 0.0, 1.0),
        ])
        .unwrap();
        assert_eq!(
            text,
            "county_id,opfvl,ppvl,apc\n06007,0.000000,0.000000,1.000000\n06021,0.100000,0.200000,0.500000\n"
        );
    }

    #[test]
    fn county_map_rejects_bad_rows() {
        assert!(write_county_map(&[]).is_err());
        assert!(write_county_map(&[summary("1", 0.0, 0.0, 1.5)]).is_err());
        assert!(write_county_map(&[summary("1", f64::NAN, 0.0, 0.5)]).is_err());
    }

    #[test]
    fn number_formatting_round_trips() {
        for v in [0.1, 1.0 / 3.0, -2.5e-310, 1e300, 123456.789, -0.0] {
            let back: f64 = num(v).parse().unwrap();
            assert_eq!(back.to_bits(), v.to_bits());
        }
    }
}
