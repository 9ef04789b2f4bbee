//! End-to-end training and inference: joint encoder + GP training on the
//! marginal likelihood, feature stacking, the random forest, metrics,
//! ablation variants and county aggregation.

mod ablation;
mod metrics;
mod model;
mod predictions;
mod train;

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::EncoderConfig;
use crate::forest::ForestConfig;
use crate::gp::KernelFamily;
use crate::optim::OptimizerConfig;
use crate::{Error, Result};

pub use crate::dataio::CountySummary;
pub use ablation::{run_ablation, run_ablation_suite, AblationResult};
pub use metrics::{
    aggregate_county, confidence_from_variance, evaluate, mean_absolute_error, Metrics,
};
pub use model::{
    Components, Diagnostics, LinearHead, Prediction, Scaler, TrainedModel, MODEL_FORMAT,
};
pub use predictions::{export_predictions, read_predictions, write_predictions, PREDICTIONS_HEADER};
pub use train::{fit_model, train_joint};

/// What the GP conditions on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GpInput {
    LatentOnly,
    LatentPlusEnriched,
}

/// What the forest is trained to predict.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RfTarget {
    /// The observed loss.
    Direct,
    /// The GP residual; the GP mean is added back at prediction time.
    Residual,
}

/// The full model and its six component ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Full,
    NoBilstm,
    NoGpr,
    NoRf,
    NoBilstmGpr,
    NoBilstmRf,
    NoGprRf,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Full,
        Variant::NoBilstm,
        Variant::NoGpr,
        Variant::NoRf,
        Variant::NoBilstmGpr,
        Variant::NoBilstmRf,
        Variant::NoGprRf,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoBilstm => "no-bilstm",
            Variant::NoGpr => "no-gpr",
            Variant::NoRf => "no-rf",
            Variant::NoBilstmGpr => "no-bilstm-gpr",
            Variant::NoBilstmRf => "no-bilstm-rf",
            Variant::NoGprRf => "no-gpr-rf",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Variant::Full => "MVeLMA",
            Variant::NoBilstm => "w/o BiLSTM",
            Variant::NoGpr => "w/o GPR",
            Variant::NoRf => "w/o RF",
            Variant::NoBilstmGpr => "w/o BiLSTM and GPR",
            Variant::NoBilstmRf => "w/o BiLSTM and RF",
            Variant::NoGprRf => "w/o GPR and RF",
        }
    }

    pub fn uses_encoder(self) -> bool {
        !matches!(self, Variant::NoBilstm | Variant::NoBilstmGpr | Variant::NoBilstmRf)
    }

    pub fn uses_gp(self) -> bool {
        !matches!(self, Variant::NoGpr | Variant::NoBilstmGpr | Variant::NoGprRf)
    }

    pub fn uses_forest(self) -> bool {
        !matches!(self, Variant::NoRf | Variant::NoBilstmRf | Variant::NoGprRf)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase().replace(['_', ' '], "-");
        Variant::ALL
            .into_iter()
            .find(|v| v.tag() == key || v.label().to_ascii_lowercase() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| Error::UnknownVariant(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Standardization {
    /// Z-score each weather channel over all training events and days.
    pub weather: bool,
    /// Z-score each enriched column over the training events.
    pub enriched: bool,
}

impl Default for Standardization {
    fn default() -> Self {
        Self {
            weather: true,
            enriched: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub encoder: EncoderConfig,
    pub kernel: KernelFamily,
    /// Adam and early-stopping settings shared by every trained stage.
    pub optimizer: OptimizerConfig,
    pub forest: ForestConfig,
    pub gp_input: GpInput,
    pub rf_target: RfTarget,
    pub variant: Variant,
    pub train_fraction: f64,
    pub split_seed: u64,
    pub standardize: Standardization,
    /// Out-of-fold GP means for the forest instead of in-sample means.
    pub oof_folds: Option<usize>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            kernel: KernelFamily::Matern25,
            optimizer: OptimizerConfig::default(),
            forest: ForestConfig::default(),
            gp_input: GpInput::LatentPlusEnriched,
            rf_target: RfTarget::Direct,
            variant: Variant::Full,
            train_fraction: 0.8,
            split_seed: 0,
            standardize: Standardization::default(),
            oof_folds: None,
        }
    }
}

impl PipelineConfig {
    /// Default configuration with one seed driving the encoder
    /// initialization, the forest and the train/test split.
    pub fn seeded(seed: u64) -> Self {
        let mut cfg = Self::default();
        cfg.set_seed(seed);
        cfg
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.encoder.seed = seed;
        self.forest.seed = seed;
        self.split_seed = seed;
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "train fraction {} outside (0, 1)",
                self.train_fraction
            )));
        }
        if self.optimizer.learning_rate <= 0.0 || !self.optimizer.learning_rate.is_finite() {
            return Err(Error::InvalidConfig("learning rate must be positive".into()));
        }
        if self.oof_folds.is_some_and(|k| k < 2) {
            return Err(Error::InvalidConfig("out-of-fold means need at least 2 folds".into()));
        }
        if self.forest.n_trees == 0 {
            return Err(Error::InvalidConfig("forest needs at least one tree".into()));
        }
        Ok(())
    }
}

/// Seeded random split into sorted `(train, test)` index lists, with
/// `round(fraction · n)` training events.
pub fn split_indices(n: usize, train_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    let n_train = (train_fraction * n as f64).round() as usize;
    if n_train == 0 || n_train >= n {
        return Err(Error::EmptySplit(format!(
            "{n} events with train fraction {train_fraction} leave an empty split"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut train = idx[..n_train].to_vec();
    let mut test = idx[n_train..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}
