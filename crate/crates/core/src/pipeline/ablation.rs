use serde::{Deserialize, Serialize};

use super::metrics::{evaluate, Metrics};
use super::model::TrainedModel;
use super::train::fit_model;
use super::{split_indices, PipelineConfig, Variant};
use crate::dataio::Dataset;
use crate::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub variant: Variant,
    pub metrics: Metrics,
}

fn test_metrics(model: &TrainedModel, test: &Dataset) -> Result<Metrics> {
    let pred = model.components(test)?.prediction;
    evaluate(&pred, &test.targets)
}

fn without_forest(model: &TrainedModel, variant: Variant) -> TrainedModel {
    let mut m = model.clone();
    m.forest = None;
    m.config.variant = variant;
    m
}

/// Train `variant` on the seeded training split and score it on the rest.
pub fn run_ablation(data: &Dataset, variant: Variant, cfg: &PipelineConfig) -> Result<Metrics> {
    let cfg = cfg.clone().with_variant(variant);
    cfg.validate()?;
    let (train, test) = split_indices(data.len(), cfg.train_fraction, cfg.split_seed)?;
    let model = fit_model(&data.select(&train), &cfg)?;
    test_metrics(&model, &data.select(&test))
}

/// Every variant on the same split, in [`Variant::ALL`] order.
///
/// A variant without the forest is identical to its forest-using sibling
/// up to the final stage, so each such pair shares one training run.
pub fn run_ablation_suite(data: &Dataset, cfg: &PipelineConfig) -> Result<Vec<AblationResult>> {
    cfg.validate()?;
    let (train, test) = split_indices(data.len(), cfg.train_fraction, cfg.split_seed)?;
    let (train, test) = (data.select(&train), data.select(&test));
    let mut out = Vec::with_capacity(Variant::ALL.len());
    let pairs = [
        (Variant::Full, Some(Variant::NoRf)),
        (Variant::NoBilstm, Some(Variant::NoBilstmRf)),
        (Variant::NoGpr, Some(Variant::NoGprRf)),
        (Variant::NoBilstmGpr, None),
    ];
    for (with_rf, sibling) in pairs {
        let model = fit_model(&train, &cfg.clone().with_variant(with_rf))?;
        out.push(AblationResult {
            variant: with_rf,
            metrics: test_metrics(&model, &test)?,
        });
        if let Some(v) = sibling {
            out.push(AblationResult {
                variant: v,
                metrics: test_metrics(&without_forest(&model, v), &test)?,
            });
        }
    }
    out.sort_by_key(|r| Variant::ALL.iter().position(|v| *v == r.variant));
    Ok(out)
}
