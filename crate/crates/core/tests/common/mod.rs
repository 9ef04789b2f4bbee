//! Independent numerical oracles shared by the integration tests.

use mvelma::gp::{kernel_eval, kernel_matrix, GpHyperparams};
use mvelma::numcore::Matrix;

/// `K_ν(x) = ∫₀^∞ exp(−x cosh t) cosh(ν t) dt` by the trapezoid rule.
pub fn bessel_k(nu: f64, x: f64) -> f64 {
    let h: f64 = 0.005;
    let mut total = 0.5 * (-x).exp();
    let mut t = h;
    loop {
        let term = (-x * t.cosh() + nu * t).exp() * 0.5 * (1.0 + (-2.0 * nu * t).exp());
        total += term;
        if term < 1e-300 || (t > 1.0 && term < total * 1e-18) {
            break;
        }
        t += h;
    }
    total * h
}

/// `Γ(ν)` for half-integer or integer `ν ≥ 1/2` by the recurrence.
pub fn gamma(nu: f64) -> f64 {
    if (nu - 0.5).abs() < 1e-12 {
        std::f64::consts::PI.sqrt()
    } else if (nu - 1.0).abs() < 1e-12 {
        1.0
    } else {
        (nu - 1.0) * gamma(nu - 1.0)
    }
}

pub fn matern_bessel(nu: f64, r: f64, ls: f64) -> f64 {
    let u = (2.0 * nu).sqrt() * r / ls;
    2f64.powf(1.0 - nu) / gamma(nu) * u.powf(nu) * bessel_k(nu, u)
}

/// Gauss-Jordan inverse with partial pivoting.
pub fn dense_inverse(a: &Matrix) -> Matrix {
    let n = a.rows();
    let mut m: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let mut row = a.row(i).to_vec();
            row.extend((0..n).map(|j| if i == j { 1.0 } else { 0.0 }));
            row
        })
        .collect();
    for c in 0..n {
        let p = (c..n).max_by(|&x, &y| m[x][c].abs().total_cmp(&m[y][c].abs())).unwrap();
        m.swap(c, p);
        let pivot = m[c][c];
        m[c].iter_mut().for_each(|v| *v /= pivot);
        for r in 0..n {
            if r != c {
                let f = m[r][c];
                if f != 0.0 {
                    for k in 0..2 * n {
                        m[r][k] -= f * m[c][k];
                    }
                }
            }
        }
    }
    Matrix::from_fn(n, n, |i, j| m[i][n + j])
}

/// Posterior mean and latent variance at each row of `xs` from an explicit
/// inverse of `K + σ_n² I`.
pub fn dense_posterior(hyper: &GpHyperparams, x: &Matrix, y: &[f64], xs: &Matrix) -> (Vec<f64>, Vec<f64>) {
    let n = x.rows();
    let mut k = kernel_matrix(&hyper.kernel, x, x).unwrap();
    for i in 0..n {
        k.set(i, i, k.get(i, i) + hyper.noise());
    }
    let kinv = dense_inverse(&k);
    let ks = kernel_matrix(&hyper.kernel, xs, x).unwrap();
    let resid: Vec<f64> = y.iter().map(|v| v - hyper.mean_const).collect();
    let mut means = Vec::with_capacity(xs.rows());
    let mut vars = Vec::with_capacity(xs.rows());
    for j in 0..xs.rows() {
        let w: Vec<f64> = (0..n)
            .map(|a| (0..n).map(|b| ks.get(j, b) * kinv.get(b, a)).sum())
            .collect();
        means.push(hyper.mean_const + w.iter().zip(&resid).map(|(a, b)| a * b).sum::<f64>());
        let kss = kernel_eval(&hyper.kernel, xs.row(j), xs.row(j)).unwrap();
        let var = kss - w.iter().zip(ks.row(j)).map(|(a, b)| a * b).sum::<f64>();
        vars.push(var.max(0.0));
    }
    (means, vars)
}
