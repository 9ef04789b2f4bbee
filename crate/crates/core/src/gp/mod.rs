//! Exact Gaussian process regression: kernels, marginal likelihood and
//! posterior inference.

mod kernel;
mod model;

pub use kernel::{kernel_eval, kernel_matrix, KernelFamily, KernelSpec, KernelVars};
pub use model::{
    fit_gp, median_pairwise_distance, nmll_graph, FitTrace, GPPosterior, GPState, GpHyperparams,
    GpVars,
};
