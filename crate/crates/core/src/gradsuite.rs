//! Finite-difference verification of every differentiable path: each tape
//! primitive, the marginal likelihood of all kernel families (hyperparameters,
//! noise, mean and training inputs), the encoder (parameters and inputs), and
//! the joint encoder-into-GP objective.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::encoder::{build_graph, EncoderConfig, EncoderParams};
use crate::error::Result;
use crate::gp::{nmll_graph, GpHyperparams, GpVars, KernelFamily, KernelSpec};
use crate::numcore::{check_tape_gradient, Matrix, Tape, Var};

/// Central-difference step.
pub const STEP: f64 = 1e-5;
/// Acceptance threshold on the maximum relative error.
pub const TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct GradCase {
    pub group: &'static str,
    pub name: String,
    /// Randomized instances checked under this entry.
    pub instances: usize,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, Default)]
pub struct GradReport {
    pub cases: Vec<GradCase>,
}

impl GradReport {
    pub fn max_error(&self) -> f64 {
        self.cases.iter().map(|c| c.max_rel_error).fold(0.0, f64::max)
    }

    /// Randomized instances over all entries.
    pub fn instances(&self) -> usize {
        self.cases.iter().map(|c| c.instances).sum()
    }

    /// `(group, instances, worst error)` in first-seen order.
    pub fn by_group(&self) -> Vec<(&'static str, usize, f64)> {
        let mut out: Vec<(&'static str, usize, f64)> = Vec::new();
        for c in &self.cases {
            match out.iter_mut().find(|g| g.0 == c.group) {
                Some(g) => {
                    g.1 += c.instances;
                    g.2 = g.2.max(c.max_rel_error);
                }
                None => out.push((c.group, c.instances, c.max_rel_error)),
            }
        }
        out
    }

    pub fn passed(&self) -> bool {
        self.cases.iter().all(|c| c.max_rel_error < TOLERANCE)
    }
}

fn uniform(rng: &mut ChaCha8Rng, r: usize, c: usize, lo: f64, hi: f64) -> Matrix {
    Matrix::from_fn(r, c, |_, _| rng.random_range(lo..hi))
}

/// `Σ out ⊙ w` for a fixed random `w`, turning any node into a scalar.
fn project(tape: &mut Tape, out: Var, w: &Matrix) -> Var {
    let wv = tape.constant(w.clone());
    let prod = tape.mul(out, wv);
    tape.sum(prod)
}

type Builder = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

/// One random instance of a primitive: its inputs and a scalar-valued builder.
fn primitive_instance(name: &str, rng: &mut ChaCha8Rng) -> (Vec<Matrix>, Builder) {
    let (n, k) = (3, 4);
    let w = uniform(rng, n, k, -1.0, 1.0);
    let wsq = uniform(rng, n, n, -1.0, 1.0);
    macro_rules! unary {
        ($lo:expr, $hi:expr, $f:expr) => {{
            let f = $f;
            (
                vec![uniform(rng, n, k, $lo, $hi)],
                Box::new(move |t: &mut Tape, v: &[Var]| {
                    let o = f(t, v[0]);
                    Ok(project(t, o, &w))
                }) as Builder,
            )
        }};
    }
    macro_rules! binary {
        ($f:expr) => {{
            let f = $f;
            (
                vec![uniform(rng, n, k, -2.0, 2.0), uniform(rng, n, k, -2.0, 2.0)],
                Box::new(move |t: &mut Tape, v: &[Var]| {
                    let o = f(t, v[0], v[1]);
                    Ok(project(t, o, &w))
                }) as Builder,
            )
        }};
    }
    match name {
        "add" => binary!(|t: &mut Tape, a, b| t.add(a, b)),
        "sub" => binary!(|t: &mut Tape, a, b| t.sub(a, b)),
        "mul" => binary!(|t: &mut Tape, a, b| t.mul(a, b)),
        "scale" => unary!(-2.0, 2.0, |t: &mut Tape, a| t.scale(a, -1.7)),
        "sigmoid" => unary!(-3.0, 3.0, |t: &mut Tape, a| t.sigmoid(a)),
        "tanh" => unary!(-3.0, 3.0, |t: &mut Tape, a| t.tanh(a)),
        "exp" => unary!(-2.0, 2.0, |t: &mut Tape, a| t.exp(a)),
        "log" => unary!(0.3, 3.0, |t: &mut Tape, a| t.log(a)),
        "sin" => unary!(-3.0, 3.0, |t: &mut Tape, a| t.sin(a)),
        "powf" => unary!(0.3, 2.0, |t: &mut Tape, a| t.powf(a, 2.7)),
        "softmax_rows" => unary!(-3.0, 3.0, |t: &mut Tape, a| t.softmax_rows(a)),
        "sum" => (
            vec![uniform(rng, n, k, -2.0, 2.0)],
            Box::new(|t: &mut Tape, v: &[Var]| {
                let s = t.sum(v[0]);
                Ok(t.mul(s, s))
            }),
        ),
        "add_scalar" | "mul_scalar" => {
            let mul = name == "mul_scalar";
            (
                vec![uniform(rng, n, k, -2.0, 2.0), uniform(rng, 1, 1, -2.0, 2.0)],
                Box::new(move |t: &mut Tape, v: &[Var]| {
                    let o = if mul {
                        t.mul_scalar(v[0], v[1])
                    } else {
                        t.add_scalar(v[0], v[1])
                    };
                    Ok(project(t, o, &w))
                }),
            )
        }
        "add_row" => (
            vec![uniform(rng, n, k, -2.0, 2.0), uniform(rng, 1, k, -2.0, 2.0)],
            Box::new(move |t: &mut Tape, v: &[Var]| {
                let o = t.add_row(v[0], v[1]);
                Ok(project(t, o, &w))
            }),
        ),
        "mul_col" => (
            vec![uniform(rng, n, k, -2.0, 2.0), uniform(rng, n, 1, -2.0, 2.0)],
            Box::new(move |t: &mut Tape, v: &[Var]| {
                let o = t.mul_col(v[0], v[1]);
                Ok(project(t, o, &w))
            }),
        ),
        "matmul" => (
            vec![uniform(rng, n, 5, -2.0, 2.0), uniform(rng, 5, k, -2.0, 2.0)],
            Box::new(move |t: &mut Tape, v: &[Var]| {
                let o = t.matmul(v[0], v[1]);
                Ok(project(t, o, &w))
            }),
        ),
        "concat_cols" => (
            vec![uniform(rng, n, 3, -2.0, 2.0), uniform(rng, n, 2, -2.0, 2.0)],
            Box::new(move |t: &mut Tape, v: &[Var]| {
                let o = t.concat_cols(&[(v[0], 1, 3), (v[1], 0, 2)]);
                Ok(project(t, o, &w))
            }),
        ),
        "sq_dist" => (
            vec![uniform(rng, n, 2, -2.0, 2.0), uniform(rng, n, 2, -2.0, 2.0)],
            Box::new(move |t: &mut Tape, v: &[Var]| {
                let o = t.sq_dist(v[0], v[1]);
                Ok(project(t, o, &wsq))
            }),
        ),
        "add_diag" => (
            vec![uniform(rng, n, n, -2.0, 2.0), uniform(rng, 1, 1, -2.0, 2.0)],
            Box::new(move |t: &mut Tape, v: &[Var]| {
                let o = t.add_diag(v[0], v[1]);
                let sq = t.mul(o, o);
                Ok(project(t, sq, &wsq))
            }),
        ),
        "matern52" => (
            vec![uniform(rng, n, k, 0.05, 4.0), uniform(rng, 1, 1, 0.3, 2.0)],
            Box::new(move |t: &mut Tape, v: &[Var]| {
                let o = t.matern52(v[0], v[1]);
                Ok(project(t, o, &w))
            }),
        ),
        "periodic" => (
            vec![
                uniform(rng, n, 2, -2.0, 2.0),
                uniform(rng, k, 2, -2.0, 2.0),
                uniform(rng, 1, 1, 0.5, 2.0),
                uniform(rng, 1, 1, 0.8, 3.0),
            ],
            Box::new(move |t: &mut Tape, v: &[Var]| {
                let o = t.periodic(v[0], v[1], v[2], v[3]);
                Ok(project(t, o, &w))
            }),
        ),
        "chol_quad_logdet" => (
            vec![
                uniform(rng, 5, 2, -1.5, 1.5),
                uniform(rng, 1, 1, -2.0, 0.0),
                uniform(rng, 5, 1, -1.0, 1.0),
            ],
            Box::new(|t: &mut Tape, v: &[Var]| {
                let d2 = t.sq_dist(v[0], v[0]);
                let arg = t.scale(d2, -0.5);
                let k = t.exp(arg);
                let noise = t.exp(v[1]);
                let kn = t.add_diag(k, noise);
                let (q, ld) = t.chol_terms(kn, v[2])?;
                let ld = t.scale(ld, 0.7);
                Ok(t.add(q, ld))
            }),
        ),
        "lstm_cell" => {
            let h = 3;
            let wout = uniform(rng, n, 2 * h, -1.0, 1.0);
            (
                vec![
                    uniform(rng, n, 2, -1.5, 1.5),
                    uniform(rng, n, 2 * h, -1.0, 1.0),
                    uniform(rng, 2 + h, 4 * h, -0.8, 0.8),
                    uniform(rng, 1, 4 * h, -0.5, 0.5),
                ],
                Box::new(move |t: &mut Tape, v: &[Var]| {
                    let s1 = t.lstm_cell(v[0], v[1], v[2], v[3]);
                    let s2 = t.lstm_cell(v[0], s1, v[2], v[3]);
                    Ok(project(t, s2, &wout))
                }),
            )
        }
        "attention_pool" => (
            vec![
                uniform(rng, n, 3, -1.0, 1.0),
                uniform(rng, n, k, -2.0, 2.0),
                uniform(rng, n, k, -2.0, 2.0),
                uniform(rng, n, k, -2.0, 2.0),
            ],
            Box::new(move |t: &mut Tape, v: &[Var]| {
                let a = t.softmax_rows(v[0]);
                let o = t.attention_pool(a, &v[1..]);
                Ok(project(t, o, &w))
            }),
        ),
        other => unreachable!("unknown primitive {other}"),
    }
}

pub const PRIMITIVES: [&str; 25] = [
    "add",
    "sub",
    "mul",
    "scale",
    "add_scalar",
    "mul_scalar",
    "add_row",
    "mul_col",
    "matmul",
    "sigmoid",
    "tanh",
    "exp",
    "log",
    "sin",
    "powf",
    "sum",
    "concat_cols",
    "sq_dist",
    "softmax_rows",
    "add_diag",
    "matern52",
    "periodic",
    "chol_quad_logdet",
    "lstm_cell",
    "attention_pool",
];

/// `cases` random instances of every tape primitive.
pub fn primitive_cases(cases: usize, seed: u64) -> Result<Vec<GradCase>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for name in PRIMITIVES {
        let mut worst: f64 = 0.0;
        for _ in 0..cases {
            let (inputs, build) = primitive_instance(name, &mut rng);
            worst = worst.max(check_tape_gradient(build, &inputs, STEP)?);
        }
        out.push(GradCase {
            group: "primitive",
            name: format!("{name} x{cases}"),
            instances: cases,
            max_rel_error: worst,
        });
    }
    Ok(out)
}

fn random_hyper(family: KernelFamily, rng: &mut ChaCha8Rng) -> GpHyperparams {
    GpHyperparams {
        kernel: KernelSpec {
            family,
            log_outputscale: rng.random_range(-1.0..0.5),
            log_lengthscale: rng.random_range(-0.3..0.8),
            log_period: rng.random_range(0.0..1.0),
            log_periodic_lengthscale: rng.random_range(-0.2..0.6),
        },
        log_noise: rng.random_range(-3.0..-1.0),
        mean_const: rng.random_range(-0.5..0.5),
    }
}

/// NMLL gradient w.r.t. hyperparameters, noise, mean and training inputs,
/// `cases` random instances per kernel family.
pub fn kernel_cases(cases: usize, seed: u64) -> Result<Vec<GradCase>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for family in KernelFamily::ALL {
        let mut worst: f64 = 0.0;
        for _ in 0..cases {
            let hyper = random_hyper(family, &mut rng);
            let n = 6;
            let x = uniform(&mut rng, n, 3, -1.0, 1.0);
            let y = uniform(&mut rng, n, 1, -1.0, 1.0);
            let mut inputs = vec![x];
            inputs.extend(hyper.to_flat().into_iter().map(Matrix::scalar));
            let build = move |t: &mut Tape, v: &[Var]| -> Result<Var> {
                let vars = GpVars::from_leaves(family, &v[1..]);
                let yv = t.constant(y.clone());
                nmll_graph(t, &vars, v[0], yv)
            };
            worst = worst.max(check_tape_gradient(build, &inputs, STEP)?);
        }
        out.push(GradCase {
            group: "nmll",
            name: format!("{family} (hyperparameters, noise, mean, inputs) x{cases}"),
            instances: cases,
            max_rel_error: worst,
        });
    }
    Ok(out)
}

fn tiny_encoder(seed: u64) -> EncoderConfig {
    EncoderConfig {
        input_width: 3,
        seq_len: 4,
        hidden: 3,
        latent: 2,
        seed,
    }
}

fn encoder_inputs(cfg: &EncoderConfig, n: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Matrix>> {
    let mut p = EncoderParams::init(cfg)?;
    for b in [&mut p.forward_cell.bias, &mut p.backward_cell.bias, &mut p.proj_bias] {
        b.as_mut_slice().iter_mut().for_each(|v| *v += rng.random_range(-0.3..0.3));
    }
    p.attn_bias = rng.random_range(-0.3..0.3);
    let mut inputs = p.tensors();
    inputs.extend((0..cfg.seq_len).map(|_| uniform(rng, n, cfg.input_width, -1.5, 1.5)));
    Ok(inputs)
}

fn encoder_from_leaves(t: &mut Tape, v: &[Var], hidden: usize) -> crate::encoder::EncoderGraph {
    let p = crate::encoder::ParamVars {
        forward_weights: v[0],
        forward_bias: v[1],
        backward_weights: v[2],
        backward_bias: v[3],
        attn_weights: v[4],
        attn_bias: v[5],
        proj_weights: v[6],
        proj_bias: v[7],
    };
    build_graph(t, &p, &v[8..], hidden)
}

/// Scalar projections of the latent output w.r.t. every encoder parameter and input.
pub fn encoder_cases(cases: usize, seed: u64) -> Result<Vec<GradCase>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for c in 0..cases {
        let cfg = tiny_encoder(seed.wrapping_add(c as u64));
        let n = 3;
        let inputs = encoder_inputs(&cfg, n, &mut rng)?;
        let w = uniform(&mut rng, n, cfg.latent, -1.0, 1.0);
        let hidden = cfg.hidden;
        let build = move |t: &mut Tape, v: &[Var]| -> Result<Var> {
            let g = encoder_from_leaves(t, v, hidden);
            Ok(project(t, g.latent, &w))
        };
        worst = worst.max(check_tape_gradient(build, &inputs, STEP)?);
    }
    Ok(vec![GradCase {
        group: "encoder",
        name: format!("latent projection (all parameters and inputs) x{cases}"),
        instances: cases,
        max_rel_error: worst,
    }])
}

/// The joint objective: NMLL of a Matérn GP over `[z ; static]`, differentiated
/// into every encoder parameter and input.
pub fn joint_cases(cases: usize, seed: u64) -> Result<Vec<GradCase>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for c in 0..cases {
        let cfg = tiny_encoder(seed.wrapping_add(100 + c as u64));
        let n = 5;
        let inputs = encoder_inputs(&cfg, n, &mut rng)?;
        let statics = uniform(&mut rng, n, 2, -1.0, 1.0);
        let y = uniform(&mut rng, n, 1, -1.0, 1.0);
        let hyper = random_hyper(KernelFamily::Matern25, &mut rng);
        let hidden = cfg.hidden;
        let build = move |t: &mut Tape, v: &[Var]| -> Result<Var> {
            let g = encoder_from_leaves(t, v, hidden);
            let s = t.constant(statics.clone());
            let x = t.concat(&[g.latent, s]);
            let vars = hyper.register(t, false);
            let yv = t.constant(y.clone());
            nmll_graph(t, &vars, x, yv)
        };
        worst = worst.max(check_tape_gradient(build, &inputs, STEP)?);
    }
    Ok(vec![GradCase {
        group: "joint",
        name: format!("NMLL through encoder x{cases}"),
        instances: cases,
        max_rel_error: worst,
    }])
}

/// The full suite: 4 primitive instances each, 25 NMLL cases per kernel
/// family, 10 encoder cases and 5 joint cases (215 randomized cases).
pub fn run_gradient_suite(seed: u64) -> Result<GradReport> {
    let mut cases = primitive_cases(4, seed)?;
    cases.extend(kernel_cases(25, seed.wrapping_add(1))?);
    cases.extend(encoder_cases(10, seed.wrapping_add(2))?);
    cases.extend(joint_cases(5, seed.wrapping_add(3))?);
    Ok(GradReport { cases })
}
