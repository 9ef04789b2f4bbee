//! Stacked temporal-encoder / Gaussian-process / random-forest regression for
//! post-fire vegetation loss, with per-prediction uncertainty.
//!
//! The pipeline has three stages:
//!
//! 1. a bidirectional LSTM with additive attention compresses the 30-day
//!    pre-fire weather sequence of each event into a latent vector;
//! 2. an exact Gaussian process over `[latent ; enriched covariates]` is
//!    trained jointly with the encoder by minimising its negative log
//!    marginal likelihood, and yields a posterior mean and variance;
//! 3. a random forest over `[latent ; enriched ; posterior mean]` produces
//!    the final prediction.
//!
//! [`dataio`] covers the flat-file dataset format, imputation rules and a
//! synthetic generator with known ground truth.

pub mod dataio;
pub mod encoder;
pub mod error;
pub mod forest;
pub mod gp;
pub mod gradsuite;
pub mod numcore;
pub mod optim;
pub mod pipeline;

pub use error::{Error, Result};
