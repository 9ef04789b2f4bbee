use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::model::{forest_inputs, gp_inputs, Diagnostics, LinearHead, Scaler, TrainedModel, MODEL_FORMAT};
use super::{split_indices, PipelineConfig, RfTarget};
use crate::dataio::{Dataset, WEATHER_CHANNELS};
use crate::encoder::{build_graph, encode, register_steps, EncoderParams, TimeSeriesBatch};
use crate::forest::fit_forest;
use crate::gp::{nmll_graph, FitTrace, GPState, GpHyperparams, GpVars};
use crate::numcore::{Matrix, Tape};
use crate::optim::{Adam, EarlyStopping};
use crate::{Error, Result};

/// Train on the seeded training split of `data`.
pub fn train_joint(data: &Dataset, cfg: &PipelineConfig) -> Result<TrainedModel> {
    cfg.validate()?;
    let (train, _) = split_indices(data.len(), cfg.train_fraction, cfg.split_seed)?;
    fit_model(&data.select(&train), cfg)
}

/// Train every stage the configured variant uses on all of `train`:
///
/// 1. encoder and GP hyperparameters jointly by Adam on the GP's negative
///    log marginal likelihood over `[z ; x^S]` (or the encoder through a
///    linear head by mean squared error when there is no GP);
/// 2. GP posterior means at the training events;
/// 3. the forest on `[z ; x^S ; μ]`.
pub fn fit_model(train: &Dataset, cfg: &PipelineConfig) -> Result<TrainedModel> {
    cfg.validate()?;
    if train.len() < 2 {
        return Err(Error::EmptySplit(format!(
            "training needs at least 2 events, got {}",
            train.len()
        )));
    }
    let variant = cfg.variant;
    let mut encoder_cfg = cfg.encoder.clone();
    encoder_cfg.input_width = WEATHER_CHANNELS.len();
    encoder_cfg.seq_len = train.weather.steps();

    let w = train.weather.width();
    let weather_scaler = if cfg.standardize.weather {
        Scaler::fit(w, train.weather.as_slice().chunks(w))
    } else {
        Scaler::identity(w)
    };
    let e = train.enriched.cols();
    let enriched_scaler = if cfg.standardize.enriched {
        Scaler::fit(e, (0..train.len()).map(|i| train.enriched.row(i)))
    } else {
        Scaler::identity(e)
    };
    let weather = weather_scaler.apply_batch(&train.weather)?;
    let enriched = enriched_scaler.apply_matrix(&train.enriched);
    let y = &train.targets;

    let mut diagnostics = Diagnostics {
        n_train: train.len(),
        ..Diagnostics::default()
    };
    let mut encoder = None;
    let mut head = None;
    let mut gp = None;

    if variant.uses_encoder() {
        let params = EncoderParams::init(&encoder_cfg)?;
        diagnostics.encoder_parameters = params.parameter_count();
        if variant.uses_gp() {
            let (params, hyper, trace) = joint_nmll(params, &weather, &enriched, y, cfg)?;
            let z = encode(&params, &weather)?;
            gp = Some(GPState::new(hyper, gp_inputs(cfg.gp_input, &z, &enriched), y.clone())?);
            diagnostics.nmll_trace = Some(trace);
            encoder = Some(params);
        } else {
            let (params, h, trace) = joint_head(params, &weather, y, cfg)?;
            diagnostics.head_trace = Some(trace);
            encoder = Some(params);
            head = Some(h);
        }
    } else if variant.uses_gp() {
        let x = gp_inputs(cfg.gp_input, &weather.time_means(), &enriched);
        let hyper = GpHyperparams::heuristic(cfg.kernel, &x, y);
        let (state, trace) = GPState::new(hyper, x, y.clone())?.fit(&cfg.optimizer)?;
        diagnostics.nmll_trace = Some(trace);
        gp = Some(state);
    }

    let temporal = match &encoder {
        Some(p) => encode(p, &weather)?,
        None => weather.time_means(),
    };

    let (in_sample, sigma_ref) = match &gp {
        Some(state) => {
            let post = state.posterior(&state.train_inputs)?;
            let sigma = post.variance.iter().fold(0.0f64, |m, v| m.max(v.sqrt()));
            let means = match cfg.oof_folds {
                Some(k) => out_of_fold_means(state, k, cfg.split_seed)?,
                None => post.mean,
            };
            (Some(means), Some(sigma))
        }
        None => (None, None),
    };

    let forest = if variant.uses_forest() {
        let x = forest_inputs(&temporal, &enriched, in_sample.as_deref());
        let target: Vec<f64> = match (cfg.rf_target, &in_sample) {
            (RfTarget::Residual, Some(mu)) => y.iter().zip(mu).map(|(a, b)| a - b).collect(),
            _ => y.clone(),
        };
        Some(fit_forest(&x, &target, &cfg.forest)?)
    } else {
        None
    };

    Ok(TrainedModel {
        format: MODEL_FORMAT.to_string(),
        config: cfg.clone(),
        weather_scaler,
        enriched_scaler,
        encoder,
        head,
        gp,
        forest,
        sigma_ref,
        diagnostics,
    })
}

/// Posterior means where each training event is predicted by a GP
/// conditioned on the other folds, at the fitted hyperparameters.
fn out_of_fold_means(state: &GPState, k: usize, seed: u64) -> Result<Vec<f64>> {
    let n = state.n();
    let k = k.min(n);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15));
    let mut out = vec![0.0; n];
    for f in 0..k {
        let held: Vec<usize> = order.iter().copied().skip(f).step_by(k).collect();
        let mut rest: Vec<usize> = order.iter().copied().filter(|i| !held.contains(i)).collect();
        rest.sort_unstable();
        let pick = |idx: &[usize]| {
            Matrix::from_fn(idx.len(), state.dim(), |r, c| state.train_inputs.get(idx[r], c))
        };
        let sub = GPState::new(
            state.hyper.clone(),
            pick(&rest),
            rest.iter().map(|&i| state.train_targets[i]).collect(),
        )?;
        let post = sub.posterior(&pick(&held))?;
        for (&i, m) in held.iter().zip(post.mean) {
            out[i] = m;
        }
    }
    Ok(out)
}

/// Adam over encoder tensors plus one extra flat parameter block, driven by
/// `loss`, which builds the objective from the encoder latent node and the
/// extra block's scalar leaves. Restores the best parameters seen.
fn adam_with_encoder<F>(
    mut params: EncoderParams,
    mut extra: Vec<f64>,
    weather: &TimeSeriesBatch,
    cfg: &PipelineConfig,
    loss: F,
) -> Result<(EncoderParams, Vec<f64>, FitTrace)>
where
    F: Fn(&mut Tape, crate::numcore::Var, &[crate::numcore::Var]) -> Result<crate::numcore::Var>,
{
    let opt = &cfg.optimizer;
    let mut flat = Matrix::from_vec(1, extra.len(), extra.clone())?;
    let mut shapes = params.shapes();
    shapes.push(flat.shape());
    let mut adam = Adam::new(opt.clone(), shapes);
    let mut stopper = EarlyStopping::new(opt.patience, opt.min_delta);
    let mut trace = FitTrace::default();
    let mut best = (params.clone(), extra.clone());
    let hidden = params.config.hidden;

    let evaluate = |params: &EncoderParams, extra: &[f64], grads: bool| -> Result<(f64, Option<Vec<Matrix>>)> {
        let mut tape = Tape::new();
        let pv = if grads {
            params.register(&mut tape)
        } else {
            params.register_frozen(&mut tape)
        };
        let steps = register_steps(&mut tape, weather, false);
        let g = build_graph(&mut tape, &pv, &steps, hidden);
        let leaves: Vec<_> = extra
            .iter()
            .map(|&v| {
                if grads {
                    tape.param(Matrix::scalar(v))
                } else {
                    tape.constant(Matrix::scalar(v))
                }
            })
            .collect();
        let out = loss(&mut tape, g.latent, &leaves)?;
        let value = tape.scalar_value(out);
        if !grads || !value.is_finite() {
            return Ok((value, None));
        }
        let gr = tape.backward(out)?;
        let mut all = pv.gradients(&gr);
        let extra_grad: Vec<f64> = leaves.iter().map(|&v| gr.wrt(v).as_slice()[0]).collect();
        all.push(Matrix::from_vec(1, extra_grad.len(), extra_grad)?);
        Ok((value, Some(all)))
    };

    for epoch in 0..opt.max_epochs {
        let (value, grads) = evaluate(&params, &extra, true)?;
        if !value.is_finite() {
            return Err(Error::Divergence { epoch, loss: value });
        }
        trace.losses.push(value);
        trace.epochs_run = epoch + 1;
        if stopper.observe(value) {
            best = (params.clone(), extra.clone());
            trace.best_epoch = epoch;
        }
        if stopper.should_stop() {
            trace.stopped_early = true;
            break;
        }
        let grads = grads.expect("gradients requested");
        let mut staging = Matrix::scalar(0.0);
        {
            let mut tensors = params.tensors_mut(&mut staging);
            tensors.push(&mut flat);
            adam.step(&mut tensors, &grads);
        }
        params.sync_attn_bias(&staging);
        extra = flat.as_slice().to_vec();
        if params.flatten().iter().chain(&extra).any(|v| !v.is_finite()) {
            return Err(Error::Divergence { epoch, loss: f64::NAN });
        }
    }

    let (params, extra) = best;
    let (value, _) = evaluate(&params, &extra, false)?;
    trace.losses.push(value);
    Ok((params, extra, trace))
}

fn joint_nmll(
    params: EncoderParams,
    weather: &TimeSeriesBatch,
    enriched: &Matrix,
    y: &[f64],
    cfg: &PipelineConfig,
) -> Result<(EncoderParams, GpHyperparams, FitTrace)> {
    let z0 = encode(&params, weather)?;
    let hyper = GpHyperparams::heuristic(cfg.kernel, &gp_inputs(cfg.gp_input, &z0, enriched), y);
    let family = cfg.kernel;
    let mode = cfg.gp_input;
    let targets = Matrix::column(y);
    let (params, flat, trace) = adam_with_encoder(params, hyper.to_flat(), weather, cfg, |tape, latent, leaves| {
        let x = match mode {
            super::GpInput::LatentOnly => latent,
            super::GpInput::LatentPlusEnriched => {
                let s = tape.constant(enriched.clone());
                tape.concat(&[latent, s])
            }
        };
        let vars = GpVars::from_leaves(family, leaves);
        let yv = tape.constant(targets.clone());
        nmll_graph(tape, &vars, x, yv)
    })?;
    let mut hyper = hyper;
    hyper.set_flat(&flat);
    Ok((params, hyper, trace))
}

fn joint_head(
    params: EncoderParams,
    weather: &TimeSeriesBatch,
    y: &[f64],
    cfg: &PipelineConfig,
) -> Result<(EncoderParams, LinearHead, FitTrace)> {
    let n = y.len() as f64;
    let mean = y.iter().sum::<f64>() / n;
    let sd = (y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    let target_std = if sd > 0.0 { sd } else { 1.0 };
    let scaled = Matrix::column(&y.iter().map(|v| (v - mean) / target_std).collect::<Vec<_>>());
    let d = params.config.latent;
    let bound = 1.0 / (d as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(params.config.seed.wrapping_add(1));
    let mut init: Vec<f64> = (0..d).map(|_| rng.random_range(-bound..bound)).collect();
    init.push(0.0);

    let (params, flat, trace) = adam_with_encoder(params, init, weather, cfg, |tape, latent, leaves| {
        let mut shifted = None;
        for (j, &wj) in leaves[..d].iter().enumerate() {
            let col = tape.slice_cols(latent, j, j + 1);
            let term = tape.mul_scalar(col, wj);
            shifted = Some(match shifted {
                Some(acc) => tape.add(acc, term),
                None => term,
            });
        }
        let pred = shifted.expect("latent width is positive");
        let shifted = tape.add_scalar(pred, leaves[d]);
        let target = tape.constant(scaled.clone());
        let diff = tape.sub(shifted, target);
        let sq = tape.mul(diff, diff);
        let total = tape.sum(sq);
        Ok(tape.scale(total, 1.0 / n))
    })?;
    let head = LinearHead {
        weights: Matrix::column(&flat[..d]),
        bias: flat[d],
        target_mean: mean,
        target_std,
    };
    Ok((params, head, trace))
}
