use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{confidence_from_variance, GpInput, PipelineConfig, RfTarget};
use crate::dataio::{Dataset, N_ENRICHED, SEQ_LEN, WEATHER_CHANNELS};
use crate::encoder::{encode, EncoderParams, TimeSeriesBatch};
use crate::forest::{predict_forest, Forest};
use crate::gp::{FitTrace, GPPosterior, GPState};
use crate::numcore::Matrix;
use crate::{Error, Result};

/// Format tag written into every model file.
pub const MODEL_FORMAT: &str = "mvelma-model-v1";

/// Per-feature affine standardization `(x − mean) / std`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Scaler {
    pub fn identity(d: usize) -> Self {
        Self {
            mean: vec![0.0; d],
            std: vec![1.0; d],
        }
    }

    /// Population mean and standard deviation of each column of the rows
    /// yielded by `rows`; zero deviations are replaced by 1.
    pub fn fit<'a>(d: usize, rows: impl Iterator<Item = &'a [f64]> + Clone) -> Self {
        let mut count = 0usize;
        let mut mean = vec![0.0; d];
        for r in rows.clone() {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v;
            }
            count += 1;
        }
        let n = count.max(1) as f64;
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for r in rows {
            for ((s, v), m) in var.iter_mut().zip(r).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var
            .into_iter()
            .map(|s| {
                let sd = (s / n).sqrt();
                if sd > 0.0 && sd.is_finite() {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, std }
    }

    pub fn apply_row(&self, row: &mut [f64]) {
        for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
            *v = (*v - m) / s;
        }
    }

    pub fn apply_matrix(&self, x: &Matrix) -> Matrix {
        let mut out = x.clone();
        for i in 0..out.rows() {
            self.apply_row(out.row_mut(i));
        }
        out
    }

    pub fn apply_batch(&self, b: &TimeSeriesBatch) -> Result<TimeSeriesBatch> {
        let w = b.width();
        let mut data = b.as_slice().to_vec();
        for day in data.chunks_mut(w) {
            self.apply_row(day);
        }
        TimeSeriesBatch::new(b.len(), b.steps(), w, data)
    }
}

/// Affine read-out `ŷ = (z · w + b) · target_std + target_mean` trained by
/// mean squared error on standardized targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearHead {
    /// `D x 1`.
    pub weights: Matrix,
    pub bias: f64,
    pub target_mean: f64,
    pub target_std: f64,
}

impl LinearHead {
    pub fn predict(&self, z: &Matrix) -> Result<Vec<f64>> {
        if z.cols() != self.weights.rows() {
            return Err(Error::DimensionMismatch(format!(
                "linear head expects {} inputs, got {}",
                self.weights.rows(),
                z.cols()
            )));
        }
        let w = self.weights.as_slice();
        Ok((0..z.rows())
            .map(|i| {
                let s: f64 = z.row(i).iter().zip(w).map(|(a, b)| a * b).sum();
                (s + self.bias) * self.target_std + self.target_mean
            })
            .collect())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    /// Joint encoder + GP marginal-likelihood trace, or the GP-only trace
    /// when there is no encoder.
    pub nmll_trace: Option<FitTrace>,
    /// Mean-squared-error trace of the encoder trained through a linear head.
    pub head_trace: Option<FitTrace>,
    pub n_train: usize,
    pub encoder_parameters: usize,
}

/// Everything needed to reproduce predictions: configuration, standardizers
/// and the fitted stages that the configured variant uses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    pub format: String,
    pub config: PipelineConfig,
    pub weather_scaler: Scaler,
    pub enriched_scaler: Scaler,
    pub encoder: Option<EncoderParams>,
    pub head: Option<LinearHead>,
    pub gp: Option<GPState>,
    pub forest: Option<Forest>,
    /// Largest posterior standard deviation over the training events.
    pub sigma_ref: Option<f64>,
    pub diagnostics: Diagnostics,
}

/// Intermediate outputs of every stage for a batch of events.
#[derive(Debug, Clone, PartialEq)]
pub struct Components {
    /// Latent vectors, or standardized 30-day channel means without an encoder.
    pub temporal: Matrix,
    /// Standardized enriched features.
    pub enriched: Matrix,
    pub gp: Option<GPPosterior>,
    pub forest: Option<Vec<f64>>,
    pub head: Option<Vec<f64>>,
    /// The variant's final prediction.
    pub prediction: Vec<f64>,
}

/// One output row per event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub event_id: String,
    pub y_true: f64,
    pub y_pred: f64,
    pub gp_mean: Option<f64>,
    pub gp_var: Option<f64>,
    pub confidence: Option<f64>,
}

pub(crate) fn gp_inputs(mode: GpInput, temporal: &Matrix, enriched: &Matrix) -> Matrix {
    match mode {
        GpInput::LatentOnly => temporal.clone(),
        GpInput::LatentPlusEnriched => hstack(&[temporal, enriched]),
    }
}

pub(crate) fn hstack(parts: &[&Matrix]) -> Matrix {
    let n = parts[0].rows();
    let d: usize = parts.iter().map(|p| p.cols()).sum();
    let mut out = Matrix::zeros(n, d);
    for i in 0..n {
        let row = out.row_mut(i);
        let mut c = 0;
        for p in parts {
            row[c..c + p.cols()].copy_from_slice(p.row(i));
            c += p.cols();
        }
    }
    out
}

pub(crate) fn forest_inputs(temporal: &Matrix, enriched: &Matrix, gp_mean: Option<&[f64]>) -> Matrix {
    match gp_mean {
        Some(mu) => hstack(&[temporal, enriched, &Matrix::column(mu)]),
        None => hstack(&[temporal, enriched]),
    }
}

impl TrainedModel {
    fn check_data(&self, data: &Dataset) -> Result<()> {
        if data.weather.steps() != SEQ_LEN || data.weather.width() != WEATHER_CHANNELS.len() {
            return Err(Error::DimensionMismatch(format!(
                "weather is {}x{} per event, model expects {SEQ_LEN}x{}",
                data.weather.steps(),
                data.weather.width(),
                WEATHER_CHANNELS.len()
            )));
        }
        if data.enriched.cols() != N_ENRICHED {
            return Err(Error::DimensionMismatch(format!(
                "{} enriched features, model expects {N_ENRICHED}",
                data.enriched.cols()
            )));
        }
        Ok(())
    }

    /// Standardized temporal features and enriched features.
    pub fn features(&self, data: &Dataset) -> Result<(Matrix, Matrix)> {
        self.check_data(data)?;
        let weather = self.weather_scaler.apply_batch(&data.weather)?;
        let temporal = match &self.encoder {
            Some(p) => encode(p, &weather)?,
            None => weather.time_means(),
        };
        Ok((temporal, self.enriched_scaler.apply_matrix(&data.enriched)))
    }

    pub fn components(&self, data: &Dataset) -> Result<Components> {
        let (temporal, enriched) = self.features(data)?;
        let gp = match &self.gp {
            Some(state) => Some(state.posterior(&gp_inputs(self.config.gp_input, &temporal, &enriched))?),
            None => None,
        };
        let forest = match &self.forest {
            Some(f) => {
                let x = forest_inputs(&temporal, &enriched, gp.as_ref().map(|p| p.mean.as_slice()));
                let mut out = predict_forest(f, &x)?;
                if self.config.rf_target == RfTarget::Residual {
                    if let Some(p) = &gp {
                        for (o, m) in out.iter_mut().zip(&p.mean) {
                            *o += m;
                        }
                    }
                }
                Some(out)
            }
            None => None,
        };
        let head = match &self.head {
            Some(h) => Some(h.predict(&temporal)?),
            None => None,
        };
        let prediction = if let Some(f) = &forest {
            f.clone()
        } else if let Some(p) = &gp {
            p.mean.clone()
        } else if let Some(h) = &head {
            h.clone()
        } else {
            return Err(Error::ModelFormat("model has no prediction stage".into()));
        };
        Ok(Components {
            temporal,
            enriched,
            gp,
            forest,
            head,
            prediction,
        })
    }

    pub fn predict(&self, data: &Dataset) -> Result<Vec<Prediction>> {
        let c = self.components(data)?;
        let confidence = match (&c.gp, self.sigma_ref) {
            (Some(p), Some(s)) => Some(confidence_from_variance(&p.variance, s)),
            _ => None,
        };
        Ok((0..data.len())
            .map(|i| Prediction {
                event_id: data.events[i].event_id.clone(),
                y_true: data.targets[i],
                y_pred: c.prediction[i],
                gp_mean: c.gp.as_ref().map(|p| p.mean[i]),
                gp_var: c.gp.as_ref().map(|p| p.variance[i]),
                confidence: confidence.as_ref().map(|v| v[i]),
            })
            .collect())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        match value.get("format").and_then(|f| f.as_str()) {
            Some(MODEL_FORMAT) => {}
            Some(other) => {
                return Err(Error::ModelFormat(format!(
                    "unsupported format `{other}`, expected `{MODEL_FORMAT}`"
                )))
            }
            None => return Err(Error::ModelFormat("missing format tag".into())),
        }
        Ok(serde_json::from_value(value)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scaler_standardizes_columns() {
        let rows = [vec![1.0, 5.0], vec![3.0, 5.0]];
        let s = Scaler::fit(2, rows.iter().map(|r| r.as_slice()));
        assert_eq!(s.mean, vec![2.0, 5.0]);
        assert_eq!(s.std, vec![1.0, 1.0]);
        let mut r = vec![3.0, 6.0];
        s.apply_row(&mut r);
        assert_eq!(r, vec![1.0, 1.0]);
    }

    #[test]
    fn hstack_concatenates() {
        let a = Matrix::from_rows(&[vec![1.0], vec![2.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        assert_eq!(hstack(&[&a, &b]).as_slice(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
    }

    #[test]
    fn head_prediction() {
        let h = LinearHead {
            weights: Matrix::column(&[1.0, -1.0]),
            bias: 0.5,
            target_mean: 10.0,
            target_std: 2.0,
        };
        let z = Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        assert_eq!(h.predict(&z).unwrap(), vec![13.0]);
        assert!(h.predict(&Matrix::zeros(1, 3)).is_err());
    }

    #[test]
    fn rejects_foreign_format() {
        assert!(matches!(
            TrainedModel::from_json(r#"{"format":"other"}"#),
            Err(Error::ModelFormat(_))
        ));
        assert!(matches!(TrainedModel::from_json("{}"), Err(Error::ModelFormat(_))));
    }
}
