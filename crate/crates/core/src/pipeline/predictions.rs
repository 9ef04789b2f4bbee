use std::fs;
use std::path::Path;

use super::model::Prediction;
use crate::{Error, Result};

pub const PREDICTIONS_HEADER: [&str; 6] =
    ["event_id", "y_true", "y_pred", "gp_mean", "gp_var", "confidence"];

fn fixed(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

/// Predictions as CSV text, numbers in 6-decimal fixed point and absent
/// GP columns left empty.
pub fn write_predictions(rows: &[Prediction]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(PREDICTIONS_HEADER)?;
    for p in rows {
        w.write_record([
            p.event_id.clone(),
            fixed(Some(p.y_true)),
            fixed(Some(p.y_pred)),
            fixed(p.gp_mean),
            fixed(p.gp_var),
            fixed(p.confidence),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn export_predictions(rows: &[Prediction], path: &Path) -> Result<()> {
    fs::write(path, write_predictions(rows)?)?;
    Ok(())
}

pub fn read_predictions(path: &Path) -> Result<Vec<Prediction>> {
    let file = path
        .file_name()
        .map(|f| f.to_string_lossy().into_owned())
        .unwrap_or_default();
    let schema = |row: usize, column: &str, message: String| Error::Schema {
        file: file.clone(),
        row,
        column: column.to_string(),
        message,
    };
    let mut reader = csv::Reader::from_path(path)?;
    let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    if header != PREDICTIONS_HEADER {
        return Err(schema(1, "", format!("header {header:?}, expected {PREDICTIONS_HEADER:?}")));
    }
    let mut out = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let row = i + 2;
        let cell = |c: usize| -> Result<Option<f64>> {
            let s = record.get(c).unwrap_or("").trim();
            if s.is_empty() {
                return Ok(None);
            }
            s.parse::<f64>()
                .map(Some)
                .map_err(|e| schema(row, PREDICTIONS_HEADER[c], format!("`{s}`: {e}")))
        };
        let required = |c: usize| -> Result<f64> {
            cell(c)?.ok_or_else(|| schema(row, PREDICTIONS_HEADER[c], "missing value".into()))
        };
        out.push(Prediction {
            event_id: record.get(0).unwrap_or("").to_string(),
            y_true: required(1)?,
            y_pred: required(2)?,
            gp_mean: cell(3)?,
            gp_var: cell(4)?,
            confidence: cell(5)?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixed_point_round_trip() {
        let rows = vec![
            Prediction {
                event_id: "E00001".into(),
                y_true: 0.0123,
                y_pred: 0.01234567,
                gp_mean: Some(-0.5),
                gp_var: Some(1e-9),
                confidence: Some(0.984),
            },
            Prediction {
                event_id: "E00002".into(),
                y_true: 1.0,
                y_pred: 2.0,
                gp_mean: None,
                gp_var: None,
                confidence: None,
            },
        ];
        let text = write_predictions(&rows).unwrap();
        assert_eq!(
            text,
            "event_id,y_true,y_pred,gp_mean,gp_var,confidence\n\
             E00001,0.012300,0.012346,-0.500000,0.000000,0.984000\n\
             E00002,1.000000,2.000000,,,\n"
        );
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.csv");
        fs::write(&path, &text).unwrap();
        let back = read_predictions(&path).unwrap();
        assert_eq!(back[1], rows[1]);
        assert_eq!(back[0].y_pred, 0.012346);
        assert_eq!(write_predictions(&back).unwrap(), text);
    }
}
