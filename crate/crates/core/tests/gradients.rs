use mvelma::gradsuite::{
    encoder_cases, joint_cases, kernel_cases, primitive_cases, GradCase, TOLERANCE,
};
use mvelma::numcore::{finite_diff_check, Matrix, Tape};

fn assert_all(cases: &[GradCase]) {
    for c in cases {
        assert!(
            c.max_rel_error < TOLERANCE,
            "{} / {}: max relative error {:e}",
            c.group,
            c.name,
            c.max_rel_error
        );
    }
}

#[test]
fn every_primitive_at_100_random_points() {
    assert_all(&primitive_cases(100, 7).unwrap());
}

#[test]
fn nmll_all_kernel_families() {
    assert_all(&kernel_cases(25, 8).unwrap());
}

#[test]
fn encoder_parameters_and_inputs() {
    assert_all(&encoder_cases(10, 9).unwrap());
}

#[test]
fn nmll_through_encoder() {
    assert_all(&joint_cases(5, 10).unwrap());
}

#[test]
fn sum_of_squares_gradient() {
    let mut tape = Tape::new();
    let v = tape.param(Matrix::from_vec(1, 3, vec![1.0, 2.0, 3.0]).unwrap());
    let sq = tape.mul(v, v);
    let out = tape.sum(sq);
    let g = tape.backward(out).unwrap();
    assert_eq!(g.wrt(v).as_slice(), &[2.0, 4.0, 6.0]);
}

#[test]
fn sigmoid_slope_at_zero() {
    let mut tape = Tape::new();
    let x = tape.param(Matrix::scalar(0.0));
    let s = tape.sigmoid(x);
    let g = tape.backward(s).unwrap();
    assert_eq!(g.wrt(x).as_slice(), &[0.25]);
}

#[test]
fn backward_needs_scalar_output() {
    let mut tape = Tape::new();
    let x = tape.param(Matrix::zeros(2, 2));
    let y = tape.tanh(x);
    assert!(matches!(
        tape.backward(y),
        Err(mvelma::Error::NonScalarOutput { rows: 2, cols: 2 })
    ));
}

#[test]
fn five_point_nmll_lengthscale_gradient() {
    use mvelma::gp::{nmll_graph, GpHyperparams, KernelFamily, KernelSpec};
    let x = Matrix::from_rows(&[vec![0.0], vec![0.4], vec![1.1], vec![1.7], vec![2.5]]).unwrap();
    let y = Matrix::column(&[0.1, 0.5, 0.2, -0.3, 0.05]);
    let nmll_at = |log_ls: f64| -> (f64, f64) {
        let hyper = GpHyperparams {
            kernel: KernelSpec {
                log_lengthscale: log_ls,
                ..KernelSpec::new(KernelFamily::Rbf)
            },
            log_noise: -2.0,
            mean_const: 0.0,
        };
        let mut tape = Tape::new();
        let vars = hyper.register(&mut tape, true);
        let xv = tape.constant(x.clone());
        let yv = tape.constant(y.clone());
        let l = nmll_graph(&mut tape, &vars, xv, yv).unwrap();
        let g = tape.backward(l).unwrap();
        (tape.scalar_value(l), g.wrt(vars.kernel.log_lengthscale).as_slice()[0])
    };
    let (_, analytic) = nmll_at(-0.2);
    let err = finite_diff_check(|p| nmll_at(p[0]).0, &[-0.2], &[analytic], 1e-5).unwrap();
    assert!(err < 1e-4, "{err}");
}
