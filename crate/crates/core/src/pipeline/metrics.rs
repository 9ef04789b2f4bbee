use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dataio::CountySummary;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mae: f64,
    pub r2: f64,
    /// Mean absolute percentage error over the nonzero observations.
    pub mape_pct: f64,
    /// RMSE over the population standard deviation of the observations.
    pub nrmse: f64,
    /// Observations left out of the MAPE average because they are zero.
    pub mape_excluded: usize,
}

impl std::fmt::Display for Metrics {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "MAE={:.6} R2={:.6} MAPE={:.6}% NRMSE={:.6}",
            self.mae, self.r2, self.mape_pct, self.nrmse
        )
    }
}

fn check_lengths(pred: &[f64], truth: &[f64]) -> Result<()> {
    if pred.len() != truth.len() {
        return Err(Error::LengthMismatch(pred.len(), truth.len()));
    }
    if pred.is_empty() {
        return Err(Error::EmptySplit("no observations to evaluate".into()));
    }
    Ok(())
}

/// Mean absolute error; defined even when the observations are constant.
pub fn mean_absolute_error(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_lengths(pred, truth)?;
    Ok(pred.iter().zip(truth).map(|(p, t)| (p - t).abs()).sum::<f64>() / pred.len() as f64)
}

pub fn evaluate(pred: &[f64], truth: &[f64]) -> Result<Metrics> {
    let mae = mean_absolute_error(pred, truth)?;
    let n = truth.len() as f64;
    let mean = truth.iter().sum::<f64>() / n;
    let sst: f64 = truth.iter().map(|t| (t - mean).powi(2)).sum();
    if sst == 0.0 {
        return Err(Error::ZeroVarianceTruth);
    }
    let sse: f64 = pred.iter().zip(truth).map(|(p, t)| (p - t).powi(2)).sum();
    let (mut ape, mut counted) = (0.0, 0usize);
    for (p, t) in pred.iter().zip(truth) {
        if *t != 0.0 {
            ape += ((p - t) / t).abs();
            counted += 1;
        }
    }
    let excluded = truth.len() - counted;
    if excluded > 0 {
        log::warn!("{excluded} zero observation(s) excluded from MAPE");
    }
    let mape_pct = if counted > 0 {
        100.0 * ape / counted as f64
    } else {
        f64::NAN
    };
    Ok(Metrics {
        mae,
        r2: 1.0 - sse / sst,
        mape_pct,
        nrmse: (sse / n).sqrt() / (sst / n).sqrt(),
        mape_excluded: excluded,
    })
}

/// `1 − min(σ / σ_ref, 1)` per variance; `σ_ref` is the largest posterior
/// standard deviation over the training split.
pub fn confidence_from_variance(variance: &[f64], sigma_ref: f64) -> Vec<f64> {
    variance
        .iter()
        .map(|&v| {
            let sigma = v.max(0.0).sqrt();
            if sigma_ref > 0.0 {
                1.0 - (sigma / sigma_ref).min(1.0)
            } else if sigma > 0.0 {
                0.0
            } else {
                1.0
            }
        })
        .collect()
}

/// Per-county means of observed loss, predicted loss and confidence, sorted
/// by county id.
pub fn aggregate_county(
    county_ids: &[&str],
    observed: &[f64],
    predicted: &[f64],
    confidence: &[f64],
) -> Result<Vec<CountySummary>> {
    let n = county_ids.len();
    for len in [observed.len(), predicted.len(), confidence.len()] {
        if len != n {
            return Err(Error::LengthMismatch(len, n));
        }
    }
    let mut groups: BTreeMap<&str, ([f64; 3], usize)> = BTreeMap::new();
    for i in 0..n {
        let g = groups.entry(county_ids[i]).or_default();
        g.0[0] += observed[i];
        g.0[1] += predicted[i];
        g.0[2] += confidence[i];
        g.1 += 1;
    }
    Ok(groups
        .into_iter()
        .map(|(id, (s, k))| {
            let k = k as f64;
            CountySummary {
                county_id: id.to_string(),
                opfvl: s[0] / k,
                ppvl: s[1] / k,
                apc: (s[2] / k).clamp(0.0, 1.0),
            }
        })
        .collect())
}
