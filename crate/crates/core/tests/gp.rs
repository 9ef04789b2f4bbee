use mvelma::gp::{
    fit_gp, kernel_eval, kernel_matrix, GPState, GpHyperparams, KernelFamily, KernelSpec,
};
use mvelma::numcore::tape::matern52_unit;
use mvelma::numcore::{cholesky, Matrix};
use mvelma::optim::OptimizerConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

mod common;

use common::{bessel_k, dense_posterior, matern_bessel};

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-scale..scale))
}

fn random_spec(rng: &mut ChaCha8Rng, family: KernelFamily) -> KernelSpec {
    KernelSpec::new(family)
        .with_outputscale(rng.random_range(0.3..2.0))
        .with_lengthscale(rng.random_range(0.5..2.5))
        .with_period(rng.random_range(0.8..3.0))
        .with_periodic_lengthscale(rng.random_range(0.5..2.0))
}

#[test]
fn matern_closed_form_matches_bessel_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let ls = rng.random_range(0.2..3.0);
        let r = ls * 10f64.powf(rng.random_range(-3.0..1.0));
        let diff = (matern52_unit(r, ls) - matern_bessel(2.5, r, ls)).abs();
        worst = worst.max(diff);
    }
    assert!(worst < 1e-8, "max difference {worst:e}");
}

#[test]
fn bessel_oracle_reproduces_half_integer_closed_forms() {
    for x in [0.01, 0.3, 1.0, 4.0, 20.0] {
        let k05 = (std::f64::consts::PI / (2.0 * x)).sqrt() * (-x).exp();
        assert!((bessel_k(0.5, x) / k05 - 1.0).abs() < 1e-10, "x={x}");
        assert!((matern_bessel(0.5, x, 1.0) - (-x).exp()).abs() < 1e-10);
    }
}

#[test]
fn posterior_matches_dense_inverse() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for case in 0..50 {
        let family = KernelFamily::ALL[case % 4];
        let n = rng.random_range(2..=50);
        let d = rng.random_range(1..=6);
        let x = random_matrix(&mut rng, n, d, 2.0);
        let xs = random_matrix(&mut rng, 7, d, 2.5);
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let hyper = GpHyperparams {
            kernel: random_spec(&mut rng, family),
            log_noise: rng.random_range(0.02f64..0.5).ln(),
            mean_const: rng.random_range(-0.3..0.3),
        };
        let state = GPState::new(hyper.clone(), x.clone(), y.clone()).unwrap();
        assert_eq!(state.chol.jitter(), 0.0);
        let post = state.posterior(&xs).unwrap();

        let (mean, var) = dense_posterior(&hyper, &x, &y, &xs);
        for j in 0..xs.rows() {
            worst = worst.max((mean[j] - post.mean[j]).abs());
            worst = worst.max((var[j] - post.variance[j]).abs());
        }
    }
    assert!(worst < 1e-8, "max difference {worst:e}");
}

#[test]
fn kernels_are_positive_definite_in_47_dimensions() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for family in KernelFamily::ALL {
        for _ in 0..100 {
            let x = random_matrix(&mut rng, 40, 47, 1.5);
            let spec = random_spec(&mut rng, family);
            let noise = 10f64.powf(rng.random_range(-4.0..-1.0));
            let mut k = kernel_matrix(&spec, &x, &x).unwrap();
            for i in 0..40 {
                k.set(i, i, k.get(i, i) + noise);
            }
            let f = cholesky(&k).unwrap_or_else(|e| panic!("{family:?}: {e}"));
            assert!(f.reconstruct().max_abs_diff(&k) < 1e-9);
        }
    }
}

#[test]
fn kernel_matrix_agrees_with_pointwise_evaluation() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for family in KernelFamily::ALL {
        let a = random_matrix(&mut rng, 10, 5, 2.0);
        let b = random_matrix(&mut rng, 6, 5, 2.0);
        let spec = random_spec(&mut rng, family);
        let k = kernel_matrix(&spec, &a, &b).unwrap();
        for i in 0..10 {
            for j in 0..6 {
                assert_eq!(k.get(i, j), kernel_eval(&spec, a.row(i), b.row(j)).unwrap());
            }
        }
        let kaa = kernel_matrix(&spec, &a, &a).unwrap();
        assert!(kaa.is_symmetric(0.0));
    }
    let spec = KernelSpec::new(KernelFamily::Rbf);
    assert!(kernel_eval(&spec, &[1.0, 2.0], &[1.0]).is_err());
}

#[test]
fn near_noiseless_gp_interpolates_observations() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for family in KernelFamily::ALL {
        let x = random_matrix(&mut rng, 25, 3, 3.0);
        let y: Vec<f64> = (0..25).map(|i| (x.get(i, 0) + 0.5 * x.get(i, 2)).sin()).collect();
        let hyper = GpHyperparams {
            kernel: KernelSpec::new(family).with_lengthscale(1.0).with_period(4.0),
            log_noise: 1e-10f64.ln(),
            mean_const: 0.0,
        };
        let state = GPState::new(hyper, x.clone(), y.clone()).unwrap();
        let post = state.posterior(&x).unwrap();
        for i in 0..25 {
            assert!((post.mean[i] - y[i]).abs() < 1e-3, "{family:?} point {i}");
            assert!(post.variance[i] < 1e-3);
        }
    }
}

#[test]
fn rbf_lengthscale_is_recovered() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let true_ls = 0.7;
    let n = 150;
    let x = random_matrix(&mut rng, n, 1, 4.0);
    let spec = KernelSpec::new(KernelFamily::Rbf).with_lengthscale(true_ls);
    let mut k = kernel_matrix(&spec, &x, &x).unwrap();
    for i in 0..n {
        k.set(i, i, k.get(i, i) + 0.01);
    }
    let l = cholesky(&k).unwrap();
    let z: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    let y: Vec<f64> = (0..n)
        .map(|i| (0..=i).map(|j| l.lower().get(i, j) * z[j]).sum())
        .collect();
    let opt = OptimizerConfig {
        max_epochs: 300,
        ..OptimizerConfig::default()
    };
    let (state, trace) = fit_gp(KernelFamily::Rbf, x, y, &opt).unwrap();
    let ls = state.hyper.kernel.lengthscale();
    assert!(ls > true_ls / 2.0 && ls < true_ls * 2.0, "lengthscale {ls}");
    assert!(trace.last() < trace.initial());
}

#[test]
fn fit_restores_best_and_reports_final_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = random_matrix(&mut rng, 30, 2, 2.0);
    let y: Vec<f64> = (0..30).map(|i| x.get(i, 0).cos() + 0.1 * rng.random::<f64>()).collect();
    let (state, trace) = fit_gp(KernelFamily::Matern25, x, y, &OptimizerConfig::default()).unwrap();
    assert!((state.nmll() - trace.last()).abs() < 1e-9);
    assert!((trace.last() - trace.losses[trace.best_epoch]).abs() < 1e-9);
    let run = trace.running_min();
    assert!(run.windows(2).all(|w| w[1] <= w[0]));
}
