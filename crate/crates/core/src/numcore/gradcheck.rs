use super::{Matrix, Tape, Var};
use crate::error::{Error, Result};

/// Relative-error floor in the denominator.
const DENOM_FLOOR: f64 = 1e-12;

/// Compares an analytic gradient with central differences of `f` at `x`.
///
/// Returns `max_i |analytic_i − central_i| / (|central_i| + 1e-12)`.
/// A non-finite value of `f` anywhere in the probe is reported as an error.
pub fn finite_diff_check<F>(mut f: F, x: &[f64], analytic: &[f64], step: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    if analytic.len() != x.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} analytic components for {} parameters",
            analytic.len(),
            x.len()
        )));
    }
    if !(step > 0.0) {
        return Err(Error::InvalidConfig("finite-difference step must be positive".into()));
    }
    let numeric = central_differences(&mut f, x, step)?;
    Ok(max_relative_error(analytic, &numeric))
}

/// Central-difference gradient of `f` at `x`.
pub fn central_differences<F>(f: &mut F, x: &[f64], step: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut probe = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        probe[i] = x[i] + step;
        let up = f(&probe);
        probe[i] = x[i] - step;
        let down = f(&probe);
        probe[i] = x[i];
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite(format!("objective near coordinate {i}")));
        }
        out.push((up - down) / (2.0 * step));
    }
    Ok(out)
}

pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / (n.abs() + DENOM_FLOOR))
        .fold(0.0, f64::max)
}

/// Relative error that tolerates gradient components that are zero up to
/// finite-difference truncation: entries with `|a − n| <= abs_floor` count as 0.
///
/// Central differences carry `O(step²)` truncation and `O(ε/step)` rounding,
/// so components whose true value is ~0 cannot be compared relatively.
pub fn max_relative_error_with_floor(analytic: &[f64], numeric: &[f64], abs_floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| {
            let diff = (a - n).abs();
            if diff <= abs_floor {
                0.0
            } else {
                diff / (n.abs() + DENOM_FLOOR)
            }
        })
        .fold(0.0, f64::max)
}

/// Absolute disagreement below which a component is treated as matching.
///
/// Central differences with a 1e-5 step on O(1) quantities carry ~1e-10 of
/// truncation and rounding error, which swamps the relative error of gradient
/// components that are themselves that small.
pub const ABS_FLOOR: f64 = 1e-8;

/// Checks a graph-building closure end to end.
///
/// `build` receives one leaf per entry of `inputs` and must return a 1x1 node.
/// The analytic gradient comes from [`Tape::backward`]; the reference from
/// central differences over every input entry, rebuilding the graph each time.
pub fn check_tape_gradient<B>(build: B, inputs: &[Matrix], step: f64) -> Result<f64>
where
    B: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let leaves: Vec<Var> = inputs.iter().map(|m| tape.param(m.clone())).collect();
    let out = build(&mut tape, &leaves)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<f64> = leaves
        .iter()
        .flat_map(|&v| grads.wrt(v).into_vec())
        .collect();

    let shapes: Vec<(usize, usize)> = inputs.iter().map(Matrix::shape).collect();
    let x: Vec<f64> = inputs.iter().flat_map(|m| m.as_slice().to_vec()).collect();
    let mut f = |flat: &[f64]| -> f64 {
        let mut t = Tape::new();
        let mut offset = 0;
        let vars: Vec<Var> = shapes
            .iter()
            .map(|&(r, c)| {
                let m = Matrix::from_vec(r, c, flat[offset..offset + r * c].to_vec())
                    .expect("shape bookkeeping");
                offset += r * c;
                t.constant(m)
            })
            .collect();
        match build(&mut t, &vars) {
            Ok(o) => t.scalar_value(o),
            Err(_) => f64::NAN,
        }
    };
    if !(step > 0.0) {
        return Err(Error::InvalidConfig("finite-difference step must be positive".into()));
    }
    let numeric = central_differences(&mut f, &x, step)?;
    Ok(max_relative_error_with_floor(&analytic, &numeric, ABS_FLOOR))
}
