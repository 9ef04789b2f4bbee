use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::tape::{matern52_unit, periodic_sin_sum};
use crate::numcore::{Matrix, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelFamily {
    Rbf,
    Matern25,
    Periodic,
    /// `outputscale · (Matérn-5/2 + periodic)`, each term unit-variance.
    CompositeMaternPeriodic,
}

impl KernelFamily {
    pub const ALL: [KernelFamily; 4] = [
        KernelFamily::Rbf,
        KernelFamily::Matern25,
        KernelFamily::Periodic,
        KernelFamily::CompositeMaternPeriodic,
    ];

    pub fn has_period(self) -> bool {
        matches!(self, Self::Periodic | Self::CompositeMaternPeriodic)
    }
}

impl fmt::Display for KernelFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Rbf => "rbf",
            Self::Matern25 => "matern25",
            Self::Periodic => "periodic",
            Self::CompositeMaternPeriodic => "composite",
        })
    }
}

impl FromStr for KernelFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rbf" => Ok(Self::Rbf),
            "matern25" | "matern" => Ok(Self::Matern25),
            "periodic" => Ok(Self::Periodic),
            "composite" => Ok(Self::CompositeMaternPeriodic),
            other => Err(Error::InvalidConfig(format!("unknown kernel `{other}`"))),
        }
    }
}

/// Kernel family and log-space hyperparameters.
///
/// `log_lengthscale` is the RBF/Matérn lengthscale, or the periodic one for
/// the pure periodic family. The composite kernel keeps a separate
/// `log_periodic_lengthscale` for its periodic term.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub family: KernelFamily,
    pub log_outputscale: f64,
    pub log_lengthscale: f64,
    pub log_period: f64,
    pub log_periodic_lengthscale: f64,
}

impl KernelSpec {
    pub fn new(family: KernelFamily) -> Self {
        Self {
            family,
            log_outputscale: 0.0,
            log_lengthscale: 0.0,
            log_period: 0.0,
            log_periodic_lengthscale: 0.0,
        }
    }

    pub fn with_outputscale(mut self, v: f64) -> Self {
        self.log_outputscale = v.ln();
        self
    }

    pub fn with_lengthscale(mut self, v: f64) -> Self {
        self.log_lengthscale = v.ln();
        self
    }

    pub fn with_period(mut self, v: f64) -> Self {
        self.log_period = v.ln();
        self
    }

    pub fn with_periodic_lengthscale(mut self, v: f64) -> Self {
        self.log_periodic_lengthscale = v.ln();
        self
    }

    pub fn outputscale(&self) -> f64 {
        self.log_outputscale.exp()
    }

    pub fn lengthscale(&self) -> f64 {
        self.log_lengthscale.exp()
    }

    pub fn period(&self) -> f64 {
        self.log_period.exp()
    }

    pub fn periodic_lengthscale(&self) -> f64 {
        self.log_periodic_lengthscale.exp()
    }

    /// Kernel value from the squared Euclidean distance `d2` and the
    /// periodic sum `Σ_d sin²(π Δ_d / p)`.
    fn eval_parts(&self, d2: f64, sin_sum: f64) -> f64 {
        let s = self.outputscale();
        let l = self.lengthscale();
        let r = d2.max(0.0).sqrt();
        let periodic = |ls: f64| (-2.0 * sin_sum / (ls * ls)).exp();
        match self.family {
            KernelFamily::Rbf => s * (-d2 / (2.0 * l * l)).exp(),
            KernelFamily::Matern25 => s * matern52_unit(r, l),
            KernelFamily::Periodic => s * periodic(l),
            KernelFamily::CompositeMaternPeriodic => {
                s * (matern52_unit(r, l) + periodic(self.periodic_lengthscale()))
            }
        }
    }

    fn eval_points(&self, a: &[f64], b: &[f64]) -> f64 {
        let d2 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
        let sin_sum = if self.family.has_period() {
            periodic_sin_sum(a, b, self.period())
        } else {
            0.0
        };
        self.eval_parts(d2, sin_sum)
    }

    /// Prior variance `k(x, x)`.
    pub fn prior_variance(&self) -> f64 {
        self.eval_parts(0.0, 0.0)
    }

    /// Names of the log hyperparameters the family uses, in [`Self::active`] order.
    pub fn active_names(&self) -> &'static [&'static str] {
        match self.family {
            KernelFamily::Rbf | KernelFamily::Matern25 => &["log_outputscale", "log_lengthscale"],
            KernelFamily::Periodic => &["log_outputscale", "log_lengthscale", "log_period"],
            KernelFamily::CompositeMaternPeriodic => &[
                "log_outputscale",
                "log_lengthscale",
                "log_period",
                "log_periodic_lengthscale",
            ],
        }
    }

    pub fn active(&self) -> Vec<f64> {
        let mut v = vec![self.log_outputscale, self.log_lengthscale];
        if self.family.has_period() {
            v.push(self.log_period);
        }
        if self.family == KernelFamily::CompositeMaternPeriodic {
            v.push(self.log_periodic_lengthscale);
        }
        v
    }

    pub fn set_active(&mut self, v: &[f64]) {
        self.log_outputscale = v[0];
        self.log_lengthscale = v[1];
        if self.family.has_period() {
            self.log_period = v[2];
        }
        if self.family == KernelFamily::CompositeMaternPeriodic {
            self.log_periodic_lengthscale = v[3];
        }
    }

    /// Registers active hyperparameters as leaves on `tape`.
    pub fn register(&self, tape: &mut Tape, trainable: bool) -> KernelVars {
        let mut leaf = |v: f64| {
            if trainable {
                tape.param(Matrix::scalar(v))
            } else {
                tape.constant(Matrix::scalar(v))
            }
        };
        let log_outputscale = leaf(self.log_outputscale);
        let log_lengthscale = leaf(self.log_lengthscale);
        let log_period = self.family.has_period().then(|| leaf(self.log_period));
        let log_periodic_lengthscale = (self.family == KernelFamily::CompositeMaternPeriodic)
            .then(|| leaf(self.log_periodic_lengthscale));
        KernelVars {
            family: self.family,
            log_outputscale,
            log_lengthscale,
            log_period,
            log_periodic_lengthscale,
        }
    }
}

/// On-tape handles for a kernel's active log hyperparameters.
#[derive(Debug, Clone, Copy)]
pub struct KernelVars {
    pub family: KernelFamily,
    pub log_outputscale: Var,
    pub log_lengthscale: Var,
    pub log_period: Option<Var>,
    pub log_periodic_lengthscale: Option<Var>,
}

impl KernelVars {
    pub fn active(&self) -> Vec<Var> {
        let mut v = vec![self.log_outputscale, self.log_lengthscale];
        v.extend(self.log_period);
        v.extend(self.log_periodic_lengthscale);
        v
    }

    /// Kernel matrix `K[i, j] = k(a_i, b_j)` between the rows of two input nodes.
    pub fn apply(&self, tape: &mut Tape, a: Var, b: Var) -> Var {
        let scale = tape.exp(self.log_outputscale);
        let unit = match self.family {
            KernelFamily::Rbf => {
                let d2 = tape.sq_dist(a, b);
                // exp(−d² · e^{−2 log ℓ} / 2)
                let m2 = tape.scale(self.log_lengthscale, -2.0);
                let inv_l2 = tape.exp(m2);
                let scaled = tape.mul_scalar(d2, inv_l2);
                let arg = tape.scale(scaled, -0.5);
                tape.exp(arg)
            }
            KernelFamily::Matern25 => {
                let l = tape.exp(self.log_lengthscale);
                let d2 = tape.sq_dist(a, b);
                tape.matern52(d2, l)
            }
            KernelFamily::Periodic => {
                let l = tape.exp(self.log_lengthscale);
                let p = tape.exp(self.log_period.expect("periodic has a period"));
                tape.periodic(a, b, l, p)
            }
            KernelFamily::CompositeMaternPeriodic => {
                let l = tape.exp(self.log_lengthscale);
                let lp = tape.exp(self.log_periodic_lengthscale.expect("composite"));
                let p = tape.exp(self.log_period.expect("composite has a period"));
                let d2 = tape.sq_dist(a, b);
                let m = tape.matern52(d2, l);
                let per = tape.periodic(a, b, lp, p);
                tape.add(m, per)
            }
        };
        tape.mul_scalar(unit, scale)
    }
}

/// `k(a, b)` for two points of equal dimension.
pub fn kernel_eval(spec: &KernelSpec, a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch(format!(
            "kernel between {}- and {}-dimensional points",
            a.len(),
            b.len()
        )));
    }
    Ok(spec.eval_points(a, b))
}

/// `K[i, j] = k(x_i, y_j)`.
pub fn kernel_matrix(spec: &KernelSpec, x: &Matrix, y: &Matrix) -> Result<Matrix> {
    if x.cols() != y.cols() {
        return Err(Error::DimensionMismatch(format!(
            "kernel matrix between {} and {} features",
            x.cols(),
            y.cols()
        )));
    }
    Ok(Matrix::from_fn(x.rows(), y.rows(), |i, j| {
        spec.eval_points(x.row(i), y.row(j))
    }))
}
