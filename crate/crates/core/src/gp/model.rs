use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::kernel::{kernel_matrix, KernelFamily, KernelSpec, KernelVars};
use crate::error::{Error, Result};
use crate::numcore::tape::sq_dist;
use crate::numcore::{cholesky, solve_spd, CholeskyFactor, Matrix, Tape, Var};
use crate::optim::{Adam, EarlyStopping, OptimizerConfig};

/// Everything the marginal likelihood is optimised over, apart from inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpHyperparams {
    pub kernel: KernelSpec,
    pub log_noise: f64,
    pub mean_const: f64,
}

impl GpHyperparams {
    /// Data-driven starting point: lengthscale from the median pairwise
    /// distance, outputscale from the target variance, noise at a tenth of
    /// it, constant mean at the target mean, unit period.
    pub fn heuristic(family: KernelFamily, inputs: &Matrix, targets: &[f64]) -> Self {
        let n = targets.len().max(1) as f64;
        let mean = targets.iter().sum::<f64>() / n;
        let var = (targets.iter().map(|y| (y - mean) * (y - mean)).sum::<f64>() / n).max(1e-8);
        let median = median_pairwise_distance(inputs);
        let ls = if median > 0.0 && median.is_finite() { median } else { 1.0 };
        let kernel = KernelSpec {
            family,
            log_outputscale: var.ln(),
            log_lengthscale: ls.ln(),
            log_period: 0.0,
            log_periodic_lengthscale: 0.0,
        };
        Self {
            kernel,
            log_noise: (0.1 * var).ln(),
            mean_const: mean,
        }
    }

    pub fn noise(&self) -> f64 {
        self.log_noise.exp()
    }

    /// Flat trainable vector: active kernel log-hyperparameters, log noise, mean.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = self.kernel.active();
        v.push(self.log_noise);
        v.push(self.mean_const);
        v
    }

    pub fn set_flat(&mut self, v: &[f64]) {
        let k = v.len() - 2;
        self.kernel.set_active(&v[..k]);
        self.log_noise = v[k];
        self.mean_const = v[k + 1];
    }

    pub fn register(&self, tape: &mut Tape, trainable: bool) -> GpVars {
        let kernel = self.kernel.register(tape, trainable);
        let mut leaf = |v: f64| {
            if trainable {
                tape.param(Matrix::scalar(v))
            } else {
                tape.constant(Matrix::scalar(v))
            }
        };
        GpVars {
            kernel,
            log_noise: leaf(self.log_noise),
            mean_const: leaf(self.mean_const),
        }
    }
}

/// On-tape hyperparameters, ordered like [`GpHyperparams::to_flat`].
#[derive(Debug, Clone, Copy)]
pub struct GpVars {
    pub kernel: KernelVars,
    pub log_noise: Var,
    pub mean_const: Var,
}

impl GpVars {
    /// Wraps existing scalar nodes laid out like [`GpHyperparams::to_flat`].
    pub fn from_leaves(family: KernelFamily, leaves: &[Var]) -> Self {
        let mut it = leaves.iter().copied();
        let mut next = || it.next().expect("one leaf per hyperparameter");
        let log_outputscale = next();
        let log_lengthscale = next();
        let log_period = family.has_period().then(&mut next);
        let log_periodic_lengthscale =
            (family == KernelFamily::CompositeMaternPeriodic).then(&mut next);
        Self {
            kernel: KernelVars {
                family,
                log_outputscale,
                log_lengthscale,
                log_period,
                log_periodic_lengthscale,
            },
            log_noise: next(),
            mean_const: next(),
        }
    }

    pub fn all(&self) -> Vec<Var> {
        let mut v = self.kernel.active();
        v.push(self.log_noise);
        v.push(self.mean_const);
        v
    }
}

/// Negative log marginal likelihood
/// `½ rᵀ(K + σ_n² I)⁻¹ r + ½ log|K + σ_n² I| + (n/2) log 2π`, `r = y − m`,
/// as a tape node differentiable in the hyperparameters, inputs and targets.
pub fn nmll_graph(tape: &mut Tape, vars: &GpVars, inputs: Var, targets: Var) -> Result<Var> {
    let n = tape.value(inputs).rows();
    if tape.value(targets).shape() != (n, 1) {
        return Err(Error::DimensionMismatch(format!(
            "{n} GP inputs with targets of shape {:?}",
            tape.value(targets).shape()
        )));
    }
    let k = vars.kernel.apply(tape, inputs, inputs);
    let noise = tape.exp(vars.log_noise);
    let k_noisy = tape.add_diag(k, noise);
    let neg_mean = tape.scale(vars.mean_const, -1.0);
    let resid = tape.add_scalar(targets, neg_mean);
    let (quad, log_det) = tape.chol_terms(k_noisy, resid)?;
    let both = tape.add(quad, log_det);
    let half = tape.scale(both, 0.5);
    let offset = tape.constant(Matrix::scalar(0.5 * n as f64 * (2.0 * PI).ln()));
    Ok(tape.add(half, offset))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GPState {
    pub hyper: GpHyperparams,
    pub train_inputs: Matrix,
    pub train_targets: Vec<f64>,
    /// Factor of `K + σ_n² I` at the current hyperparameters.
    pub chol: CholeskyFactor,
    /// `(K + σ_n² I)⁻¹ (y − m)`.
    pub alpha: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GPPosterior {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
}

/// Loss history of an optimisation run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FitTrace {
    /// Loss at the start of each epoch, then the loss at the restored best
    /// parameters as the final entry.
    pub losses: Vec<f64>,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

impl FitTrace {
    pub fn initial(&self) -> f64 {
        self.losses.first().copied().unwrap_or(f64::NAN)
    }

    pub fn last(&self) -> f64 {
        self.losses.last().copied().unwrap_or(f64::NAN)
    }

    /// Running minimum of the per-epoch losses.
    pub fn running_min(&self) -> Vec<f64> {
        self.losses
            .iter()
            .scan(f64::INFINITY, |m, &l| {
                *m = m.min(l);
                Some(*m)
            })
            .collect()
    }
}

impl GPState {
    /// Conditions on `(inputs, targets)` at fixed hyperparameters.
    pub fn new(hyper: GpHyperparams, inputs: Matrix, targets: Vec<f64>) -> Result<Self> {
        if inputs.rows() != targets.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} GP inputs for {} targets",
                inputs.rows(),
                targets.len()
            )));
        }
        if inputs.rows() == 0 {
            return Err(Error::DegenerateInput("GP needs at least one training point".into()));
        }
        inputs.ensure_finite("GP inputs")?;
        if targets.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("GP targets".into()));
        }
        let (chol, alpha) = factorize(&hyper, &inputs, &targets)?;
        Ok(Self {
            hyper,
            train_inputs: inputs,
            train_targets: targets,
            chol,
            alpha,
        })
    }

    pub fn n(&self) -> usize {
        self.train_targets.len()
    }

    pub fn dim(&self) -> usize {
        self.train_inputs.cols()
    }

    /// Recomputes the factor and weights after a hyperparameter change.
    pub fn refresh(&mut self) -> Result<()> {
        let (chol, alpha) = factorize(&self.hyper, &self.train_inputs, &self.train_targets)?;
        self.chol = chol;
        self.alpha = alpha;
        Ok(())
    }

    pub fn nmll(&self) -> f64 {
        let m = self.hyper.mean_const;
        let quad: f64 = self
            .alpha
            .iter()
            .zip(&self.train_targets)
            .map(|(a, y)| a * (y - m))
            .sum();
        0.5 * quad + 0.5 * self.chol.log_det() + 0.5 * self.n() as f64 * (2.0 * PI).ln()
    }

    /// Predictive mean and latent variance at each row of `test`.
    pub fn posterior(&self, test: &Matrix) -> Result<GPPosterior> {
        if test.cols() != self.dim() {
            return Err(Error::DimensionMismatch(format!(
                "test points have {} features, GP was trained on {}",
                test.cols(),
                self.dim()
            )));
        }
        let k_cross = kernel_matrix(&self.hyper.kernel, test, &self.train_inputs)?;
        let mut mean = Vec::with_capacity(test.rows());
        for i in 0..test.rows() {
            let dot: f64 = k_cross.row(i).iter().zip(&self.alpha).map(|(a, b)| a * b).sum();
            mean.push(self.hyper.mean_const + dot);
        }
        // v = L⁻¹ k_*ᵀ, var = k_** − ‖v‖²
        let mut v = k_cross.transpose();
        self.chol.solve_lower_in_place(&mut v);
        let prior = self.hyper.kernel.prior_variance();
        let variance = (0..test.rows())
            .map(|j| {
                let explained: f64 = (0..self.n()).map(|i| v.get(i, j).powi(2)).sum();
                (prior - explained).max(0.0)
            })
            .collect();
        Ok(GPPosterior { mean, variance })
    }

    /// Adam on the negative log marginal likelihood, with early stopping.
    ///
    /// The best hyperparameters seen are restored before returning.
    pub fn fit(mut self, opt: &OptimizerConfig) -> Result<(Self, FitTrace)> {
        if self.n() < 2 {
            return Err(Error::DegenerateInput("GP fit needs at least two points".into()));
        }
        let targets = Matrix::column(&self.train_targets);
        let mut flat = Matrix::from_vec(1, self.hyper.to_flat().len(), self.hyper.to_flat())?;
        let mut adam = Adam::new(opt.clone(), [flat.shape()]);
        let mut stopper = EarlyStopping::new(opt.patience, opt.min_delta);
        let mut trace = FitTrace::default();
        let mut best = self.hyper.clone();

        for epoch in 0..opt.max_epochs {
            let mut hyper = self.hyper.clone();
            hyper.set_flat(flat.as_slice());
            let mut tape = Tape::new();
            let vars = hyper.register(&mut tape, true);
            let x = tape.constant(self.train_inputs.clone());
            let y = tape.constant(targets.clone());
            let loss_node = nmll_graph(&mut tape, &vars, x, y)?;
            let loss = tape.scalar_value(loss_node);
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch, loss });
            }
            trace.losses.push(loss);
            trace.epochs_run = epoch + 1;
            if stopper.observe(loss) {
                best = hyper.clone();
                trace.best_epoch = epoch;
            }
            if stopper.should_stop() {
                trace.stopped_early = true;
                break;
            }
            let grads = tape.backward(loss_node)?;
            let g: Vec<f64> = vars
                .all()
                .iter()
                .map(|&v| grads.wrt(v).as_slice()[0])
                .collect();
            adam.step(&mut [&mut flat], &[Matrix::from_vec(1, g.len(), g)?]);
        }

        self.hyper = best;
        self.refresh()?;
        trace.losses.push(self.nmll());
        Ok((self, trace))
    }
}

/// Initializes with [`GpHyperparams::heuristic`] and fits.
pub fn fit_gp(
    family: KernelFamily,
    inputs: Matrix,
    targets: Vec<f64>,
    opt: &OptimizerConfig,
) -> Result<(GPState, FitTrace)> {
    let hyper = GpHyperparams::heuristic(family, &inputs, &targets);
    GPState::new(hyper, inputs, targets)?.fit(opt)
}

fn factorize(
    hyper: &GpHyperparams,
    inputs: &Matrix,
    targets: &[f64],
) -> Result<(CholeskyFactor, Vec<f64>)> {
    let mut k = kernel_matrix(&hyper.kernel, inputs, inputs)?;
    let noise = hyper.noise();
    for i in 0..k.rows() {
        k.set(i, i, k.get(i, i) + noise);
    }
    let chol = cholesky(&k)?;
    let resid: Vec<f64> = targets.iter().map(|y| y - hyper.mean_const).collect();
    let alpha = solve_spd(&chol, &Matrix::column(&resid))?.into_vec();
    Ok((chol, alpha))
}

/// Median Euclidean distance over distinct pairs of rows; 0 for < 2 rows.
pub fn median_pairwise_distance(x: &Matrix) -> f64 {
    let n = x.rows();
    if n < 2 {
        return 0.0;
    }
    let d2 = sq_dist(x, x);
    let mut d: Vec<f64> = (0..n)
        .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
        .map(|(i, j)| d2.get(i, j).sqrt())
        .collect();
    let mid = d.len() / 2;
    let (_, m, _) = d.select_nth_unstable_by(mid, f64::total_cmp);
    *m
}
