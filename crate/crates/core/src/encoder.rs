//! Bidirectional LSTM with additive attention over fixed-length weather
//! sequences, projected to a bounded latent vector per event.
//!
//! For event `i` with hidden states `h_it = [→h_it ; ←h_it]`:
//!
//! ```text
//! e_it = w_aᵀ h_it + b_a
//! α_i  = softmax_t(e_i)
//! c_i  = Σ_t α_it h_it
//! z_i  = tanh(W_p c_i + b_p)
//! ```
//!
//! The backward cell reads the reversed sequence; its state after consuming
//! step `t` is paired with the forward state at `t`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{Gradients, Matrix, Tape, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Weather channels per day.
    pub input_width: usize,
    pub seq_len: usize,
    pub hidden: usize,
    pub latent: usize,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            input_width: 9,
            seq_len: 30,
            hidden: 64,
            latent: 20,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_width == 0 || self.seq_len == 0 || self.hidden == 0 || self.latent == 0 {
            return Err(Error::InvalidConfig(format!(
                "encoder dimensions must be >= 1: {self:?}"
            )));
        }
        Ok(())
    }

    pub fn parameter_count(&self) -> usize {
        let (w, h, d) = (self.input_width, self.hidden, self.latent);
        2 * ((w + h) * 4 * h + 4 * h) + (2 * h + 1) + (2 * h * d + d)
    }
}

/// `N x T x W` sequences, stored event-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeSeriesBatch {
    n: usize,
    steps: usize,
    width: usize,
    data: Vec<f64>,
}

impl TimeSeriesBatch {
    pub fn new(n: usize, steps: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * steps * width {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {n}x{steps}x{width} batch",
                data.len()
            )));
        }
        Ok(Self {
            n,
            steps,
            width,
            data,
        })
    }

    pub fn zeros(n: usize, steps: usize, width: usize) -> Self {
        Self {
            n,
            steps,
            width,
            data: vec![0.0; n * steps * width],
        }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, i: usize, t: usize, c: usize) -> f64 {
        self.data[(i * self.steps + t) * self.width + c]
    }

    #[inline]
    pub fn set(&mut self, i: usize, t: usize, c: usize, v: f64) {
        self.data[(i * self.steps + t) * self.width + c] = v;
    }

    /// The `T x W` sequence of one event.
    pub fn event(&self, i: usize) -> &[f64] {
        let stride = self.steps * self.width;
        &self.data[i * stride..(i + 1) * stride]
    }

    /// `N x W` slice of all events at step `t`.
    pub fn step_matrix(&self, t: usize) -> Matrix {
        Matrix::from_fn(self.n, self.width, |i, c| self.get(i, t, c))
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        let mut data = Vec::with_capacity(idx.len() * self.steps * self.width);
        for &i in idx {
            data.extend_from_slice(self.event(i));
        }
        Self {
            n: idx.len(),
            steps: self.steps,
            width: self.width,
            data,
        }
    }

    /// Same events with the time axis reversed.
    pub fn reversed_time(&self) -> Self {
        let mut out = self.clone();
        for i in 0..self.n {
            for t in 0..self.steps {
                for c in 0..self.width {
                    out.set(i, self.steps - 1 - t, c, self.get(i, t, c));
                }
            }
        }
        out
    }

    /// Per-channel mean over the time axis, `N x W`.
    pub fn time_means(&self) -> Matrix {
        Matrix::from_fn(self.n, self.width, |i, c| {
            (0..self.steps).map(|t| self.get(i, t, c)).sum::<f64>() / self.steps as f64
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmParams {
    /// `(W + H) x 4H`, gate blocks ordered input, forget, cell, output.
    pub weights: Matrix,
    /// `1 x 4H`.
    pub bias: Matrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub forward_cell: LstmParams,
    pub backward_cell: LstmParams,
    /// `2H x 1`.
    pub attn_weights: Matrix,
    pub attn_bias: f64,
    /// `2H x D`.
    pub proj_weights: Matrix,
    /// `1 x D`.
    pub proj_bias: Matrix,
}

/// Parameters registered on a tape, in [`EncoderParams::tensors`] order.
#[derive(Debug, Clone, Copy)]
pub struct ParamVars {
    pub forward_weights: Var,
    pub forward_bias: Var,
    pub backward_weights: Var,
    pub backward_bias: Var,
    pub attn_weights: Var,
    pub attn_bias: Var,
    pub proj_weights: Var,
    pub proj_bias: Var,
}

impl ParamVars {
    pub fn all(&self) -> [Var; 8] {
        [
            self.forward_weights,
            self.forward_bias,
            self.backward_weights,
            self.backward_bias,
            self.attn_weights,
            self.attn_bias,
            self.proj_weights,
            self.proj_bias,
        ]
    }

    pub fn gradients(&self, grads: &Gradients) -> Vec<Matrix> {
        self.all().iter().map(|&v| grads.wrt(v)).collect()
    }
}

impl EncoderParams {
    /// Uniform(−1/√H, 1/√H) weights from a seeded stream; forget-gate bias 1,
    /// all other biases 0.
    pub fn init(cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let (w, h, d) = (cfg.input_width, cfg.hidden, cfg.latent);
        let bound = 1.0 / (h as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut uniform =
            |r: usize, c: usize| Matrix::from_fn(r, c, |_, _| rng.random_range(-bound..bound));
        let forget_bias =
            || Matrix::from_fn(1, 4 * h, |_, j| if (h..2 * h).contains(&j) { 1.0 } else { 0.0 });
        let forward_cell = LstmParams {
            weights: uniform(w + h, 4 * h),
            bias: forget_bias(),
        };
        let backward_cell = LstmParams {
            weights: uniform(w + h, 4 * h),
            bias: forget_bias(),
        };
        let attn_weights = uniform(2 * h, 1);
        let proj_weights = uniform(2 * h, d);
        Ok(Self {
            config: cfg.clone(),
            forward_cell,
            backward_cell,
            attn_weights,
            attn_bias: 0.0,
            proj_weights,
            proj_bias: Matrix::zeros(1, d),
        })
    }

    /// All-zero parameters (biases included).
    pub fn zeros(cfg: &EncoderConfig) -> Self {
        let (w, h, d) = (cfg.input_width, cfg.hidden, cfg.latent);
        let cell = || LstmParams {
            weights: Matrix::zeros(w + h, 4 * h),
            bias: Matrix::zeros(1, 4 * h),
        };
        Self {
            config: cfg.clone(),
            forward_cell: cell(),
            backward_cell: cell(),
            attn_weights: Matrix::zeros(2 * h, 1),
            attn_bias: 0.0,
            proj_weights: Matrix::zeros(2 * h, d),
            proj_bias: Matrix::zeros(1, d),
        }
    }

    pub fn tensors(&self) -> Vec<Matrix> {
        vec![
            self.forward_cell.weights.clone(),
            self.forward_cell.bias.clone(),
            self.backward_cell.weights.clone(),
            self.backward_cell.bias.clone(),
            self.attn_weights.clone(),
            Matrix::scalar(self.attn_bias),
            self.proj_weights.clone(),
            self.proj_bias.clone(),
        ]
    }

    pub fn shapes(&self) -> Vec<(usize, usize)> {
        self.tensors().iter().map(Matrix::shape).collect()
    }

    /// Mutable views in [`Self::tensors`] order; the attention bias is
    /// exposed through a 1x1 staging matrix written back by [`Self::sync_attn_bias`].
    pub fn tensors_mut<'a>(&'a mut self, attn_bias: &'a mut Matrix) -> Vec<&'a mut Matrix> {
        *attn_bias = Matrix::scalar(self.attn_bias);
        vec![
            &mut self.forward_cell.weights,
            &mut self.forward_cell.bias,
            &mut self.backward_cell.weights,
            &mut self.backward_cell.bias,
            &mut self.attn_weights,
            attn_bias,
            &mut self.proj_weights,
            &mut self.proj_bias,
        ]
    }

    pub fn sync_attn_bias(&mut self, attn_bias: &Matrix) {
        self.attn_bias = attn_bias.as_slice()[0];
    }

    pub fn from_tensors(config: EncoderConfig, t: Vec<Matrix>) -> Result<Self> {
        let shapes = Self::zeros(&config).shapes();
        if t.len() != shapes.len() || t.iter().zip(&shapes).any(|(m, s)| m.shape() != *s) {
            return Err(Error::ShapeMismatch("encoder tensors do not match config".into()));
        }
        let mut it = t.into_iter();
        let mut next = || it.next().expect("length checked");
        Ok(Self {
            config,
            forward_cell: LstmParams {
                weights: next(),
                bias: next(),
            },
            backward_cell: LstmParams {
                weights: next(),
                bias: next(),
            },
            attn_weights: next(),
            attn_bias: next().as_slice()[0],
            proj_weights: next(),
            proj_bias: next(),
        })
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.tensors().into_iter().flat_map(Matrix::into_vec).collect()
    }

    pub fn unflatten(config: EncoderConfig, flat: &[f64]) -> Result<Self> {
        let shapes = Self::zeros(&config).shapes();
        let total: usize = shapes.iter().map(|(r, c)| r * c).sum();
        if flat.len() != total {
            return Err(Error::ShapeMismatch(format!(
                "{} values for {total} encoder parameters",
                flat.len()
            )));
        }
        let mut offset = 0;
        let tensors = shapes
            .iter()
            .map(|&(r, c)| {
                let m = Matrix::from_vec(r, c, flat[offset..offset + r * c].to_vec());
                offset += r * c;
                m
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_tensors(config, tensors)
    }

    pub fn parameter_count(&self) -> usize {
        self.shapes().iter().map(|(r, c)| r * c).sum()
    }

    /// Registers every tensor as a differentiable leaf.
    pub fn register(&self, tape: &mut Tape) -> ParamVars {
        self.register_with(tape, true)
    }

    /// Registers every tensor as a constant leaf.
    pub fn register_frozen(&self, tape: &mut Tape) -> ParamVars {
        self.register_with(tape, false)
    }

    fn register_with(&self, tape: &mut Tape, trainable: bool) -> ParamVars {
        let mut leaf = |m: Matrix| {
            if trainable {
                tape.param(m)
            } else {
                tape.constant(m)
            }
        };
        let mut t = self.tensors().into_iter();
        let mut next = || leaf(t.next().expect("eight tensors"));
        ParamVars {
            forward_weights: next(),
            forward_bias: next(),
            backward_weights: next(),
            backward_bias: next(),
            attn_weights: next(),
            attn_bias: next(),
            proj_weights: next(),
            proj_bias: next(),
        }
    }
}

/// Node handles produced by [`build_graph`].
#[derive(Debug, Clone)]
pub struct EncoderGraph {
    /// `N x D` latent vectors.
    pub latent: Var,
    /// `N x T` attention weights.
    pub attention: Var,
    /// `N x T` pre-softmax scores.
    pub scores: Var,
    /// Per step, `N x 2H` concatenated hidden states.
    pub hidden: Vec<Var>,
}

/// Materialized encoder output.
#[derive(Debug, Clone)]
pub struct EncoderOutput {
    pub latent: Matrix,
    pub attention: Matrix,
    /// Per step, `N x 2H`.
    pub hidden: Vec<Matrix>,
}

/// Registers each time step of `batch` as a leaf (`N x W` each).
pub fn register_steps(tape: &mut Tape, batch: &TimeSeriesBatch, trainable: bool) -> Vec<Var> {
    (0..batch.steps())
        .map(|t| {
            let m = batch.step_matrix(t);
            if trainable {
                tape.param(m)
            } else {
                tape.constant(m)
            }
        })
        .collect()
}

pub fn check_batch(cfg: &EncoderConfig, batch: &TimeSeriesBatch) -> Result<()> {
    if batch.steps() != cfg.seq_len || batch.width() != cfg.input_width {
        return Err(Error::ShapeMismatch(format!(
            "batch is Nx{}x{}, encoder expects Nx{}x{}",
            batch.steps(),
            batch.width(),
            cfg.seq_len,
            cfg.input_width
        )));
    }
    if batch.as_slice().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("encoder input batch".into()));
    }
    Ok(())
}

/// Builds the encoder graph over already-registered step inputs.
pub fn build_graph(tape: &mut Tape, p: &ParamVars, steps: &[Var], hidden: usize) -> EncoderGraph {
    let n = tape.value(steps[0]).rows();
    let t_len = steps.len();
    let init = tape.constant(Matrix::zeros(n, 2 * hidden));

    let mut fwd = Vec::with_capacity(t_len);
    let mut state = init;
    for &x in steps {
        state = tape.lstm_cell(x, state, p.forward_weights, p.forward_bias);
        fwd.push(state);
    }
    let mut bwd = vec![init; t_len];
    let mut state = init;
    for t in (0..t_len).rev() {
        state = tape.lstm_cell(steps[t], state, p.backward_weights, p.backward_bias);
        bwd[t] = state;
    }

    let hidden_states: Vec<Var> = (0..t_len)
        .map(|t| tape.concat_cols(&[(fwd[t], 0, hidden), (bwd[t], 0, hidden)]))
        .collect();
    let per_step: Vec<Var> = hidden_states
        .iter()
        .map(|&h| tape.matmul(h, p.attn_weights))
        .collect();
    let raw = tape.concat(&per_step);
    let scores = tape.add_scalar(raw, p.attn_bias);
    let attention = tape.softmax_rows(scores);
    let context = tape.attention_pool(attention, &hidden_states);
    let projected = tape.matmul(context, p.proj_weights);
    let shifted = tape.add_row(projected, p.proj_bias);
    let latent = tape.tanh(shifted);
    EncoderGraph {
        latent,
        attention,
        scores,
        hidden: hidden_states,
    }
}

/// Gradient-free forward pass.
pub fn forward(params: &EncoderParams, batch: &TimeSeriesBatch) -> Result<EncoderOutput> {
    check_batch(&params.config, batch)?;
    if batch.is_empty() {
        return Ok(EncoderOutput {
            latent: Matrix::zeros(0, params.config.latent),
            attention: Matrix::zeros(0, params.config.seq_len),
            hidden: Vec::new(),
        });
    }
    let mut tape = Tape::new();
    let vars = params.register_frozen(&mut tape);
    let steps = register_steps(&mut tape, batch, false);
    let g = build_graph(&mut tape, &vars, &steps, params.config.hidden);
    let attention = tape.value(g.attention).clone();
    check_attention(&attention)?;
    Ok(EncoderOutput {
        latent: tape.value(g.latent).clone(),
        attention,
        hidden: g.hidden.iter().map(|&h| tape.value(h).clone()).collect(),
    })
}

/// Latent vectors only, evaluated in chunks to bound tape memory.
pub fn encode(params: &EncoderParams, batch: &TimeSeriesBatch) -> Result<Matrix> {
    const CHUNK: usize = 512;
    check_batch(&params.config, batch)?;
    let d = params.config.latent;
    let mut out = Vec::with_capacity(batch.len() * d);
    let idx: Vec<usize> = (0..batch.len()).collect();
    for chunk in idx.chunks(CHUNK) {
        let sub = batch.select(chunk);
        let mut tape = Tape::new();
        let vars = params.register_frozen(&mut tape);
        let steps = register_steps(&mut tape, &sub, false);
        let g = build_graph(&mut tape, &vars, &steps, params.config.hidden);
        check_attention(tape.value(g.attention))?;
        out.extend_from_slice(tape.value(g.latent).as_slice());
    }
    Matrix::from_vec(batch.len(), d, out)
}

fn check_attention(a: &Matrix) -> Result<()> {
    for i in 0..a.rows() {
        let row = a.row(i);
        let total: f64 = row.iter().sum();
        if row.iter().any(|&v| !(v >= 0.0)) || (total - 1.0).abs() > 1e-10 {
            return Err(Error::NonFinite(format!("attention row {i} is not a distribution")));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> EncoderConfig {
        EncoderConfig {
            input_width: 3,
            seq_len: 5,
            hidden: 4,
            latent: 2,
            seed: 9,
        }
    }

    fn random_batch(n: usize, cfg: &EncoderConfig, seed: u64) -> TimeSeriesBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n * cfg.seq_len * cfg.input_width)
            .map(|_| rng.random_range(-1.5..1.5))
            .collect();
        TimeSeriesBatch::new(n, cfg.seq_len, cfg.input_width, data).unwrap()
    }

    #[test]
    fn default_parameter_count() {
        let cfg = EncoderConfig::default();
        assert_eq!(cfg.parameter_count(), 40_597);
        assert_eq!(EncoderParams::init(&cfg).unwrap().parameter_count(), 40_597);
    }

    #[test]
    fn init_is_seeded() {
        let cfg = small_cfg();
        let a = EncoderParams::init(&cfg).unwrap();
        assert_eq!(a, EncoderParams::init(&cfg).unwrap());
        let other = EncoderParams::init(&EncoderConfig { seed: 10, ..cfg }).unwrap();
        assert_ne!(a.flatten(), other.flatten());
    }

    #[test]
    fn init_bounds_and_biases() {
        let cfg = small_cfg();
        let p = EncoderParams::init(&cfg).unwrap();
        let bound = 1.0 / (cfg.hidden as f64).sqrt();
        assert!(p.forward_cell.weights.as_slice().iter().all(|v| v.abs() <= bound));
        let h = cfg.hidden;
        for (j, &b) in p.backward_cell.bias.as_slice().iter().enumerate() {
            assert_eq!(b, if (h..2 * h).contains(&j) { 1.0 } else { 0.0 });
        }
        assert_eq!(p.attn_bias, 0.0);
        assert!(p.proj_bias.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_everything_gives_zero_latent_and_uniform_attention() {
        let cfg = EncoderConfig {
            seq_len: 30,
            ..small_cfg()
        };
        let out = forward(&EncoderParams::zeros(&cfg), &TimeSeriesBatch::zeros(3, 30, 3)).unwrap();
        assert!(out.latent.as_slice().iter().all(|&v| v == 0.0));
        assert!(out.attention.as_slice().iter().all(|&v| (v - 1.0 / 30.0).abs() < 1e-15));
    }

    #[test]
    fn single_step_attention_is_one() {
        let cfg = EncoderConfig {
            seq_len: 1,
            ..small_cfg()
        };
        let p = EncoderParams::init(&cfg).unwrap();
        let out = forward(&p, &random_batch(4, &cfg, 1)).unwrap();
        assert!(out.attention.as_slice().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn attention_rows_are_distributions() {
        let cfg = small_cfg();
        let p = EncoderParams::init(&cfg).unwrap();
        let out = forward(&p, &random_batch(6, &cfg, 2)).unwrap();
        for i in 0..6 {
            let s: f64 = out.attention.row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        assert_eq!(out.hidden.len(), cfg.seq_len);
        assert_eq!(out.hidden[0].shape(), (6, 2 * cfg.hidden));
    }

    #[test]
    fn encode_matches_forward() {
        let cfg = small_cfg();
        let p = EncoderParams::init(&cfg).unwrap();
        let b = random_batch(7, &cfg, 3);
        assert_eq!(encode(&p, &b).unwrap(), forward(&p, &b).unwrap().latent);
    }

    #[test]
    fn rejects_bad_batches() {
        let cfg = small_cfg();
        let p = EncoderParams::init(&cfg).unwrap();
        let wrong = TimeSeriesBatch::zeros(2, 4, 3);
        assert!(matches!(forward(&p, &wrong), Err(Error::ShapeMismatch(_))));
        let mut nan = TimeSeriesBatch::zeros(2, 5, 3);
        nan.set(1, 2, 0, f64::NAN);
        assert!(matches!(forward(&p, &nan), Err(Error::NonFinite(_))));
    }

    #[test]
    fn flatten_roundtrip() {
        let cfg = small_cfg();
        let p = EncoderParams::init(&cfg).unwrap();
        assert_eq!(EncoderParams::unflatten(cfg, &p.flatten()).unwrap(), p);
    }
}
