use std::collections::BTreeMap;

use mvelma::dataio::{synth_generate, Dataset, SynthConfig};
use mvelma::pipeline::{
    aggregate_county, confidence_from_variance, fit_model, mean_absolute_error, run_ablation,
    run_ablation_suite, split_indices, train_joint, PipelineConfig, TrainedModel, Variant,
};

fn small_config(seed: u64) -> PipelineConfig {
    let mut cfg = PipelineConfig::seeded(seed);
    cfg.encoder.hidden = 8;
    cfg.encoder.latent = 4;
    cfg.optimizer.max_epochs = 6;
    cfg.forest.n_trees = 30;
    cfg
}

fn dataset(n: usize, seed: u64) -> Dataset {
    synth_generate(&SynthConfig {
        n_events: n,
        n_counties: 4,
        seed,
        noise_fraction: 0.2,
    })
    .unwrap()
    .0
}

#[test]
fn constant_target_is_recovered() {
    let mut ds = dataset(60, 1);
    ds.targets = vec![0.0375; ds.len()];
    for e in &mut ds.events {
        e.target = Some(0.0375);
    }
    let cfg = small_config(1);
    let (train, test) = split_indices(ds.len(), cfg.train_fraction, cfg.split_seed).unwrap();
    let test = ds.select(&test);
    for variant in Variant::ALL {
        let model = fit_model(&ds.select(&train), &cfg.clone().with_variant(variant)).unwrap();
        let pred: Vec<f64> = model.predict(&test).unwrap().iter().map(|p| p.y_pred).collect();
        let mae = mean_absolute_error(&pred, &test.targets).unwrap();
        assert!(mae < 1e-3, "{variant}: MAE {mae}");
    }
}

#[test]
fn training_is_deterministic() {
    let ds = dataset(50, 2);
    let a = train_joint(&ds, &small_config(5)).unwrap();
    let b = train_joint(&ds, &small_config(5)).unwrap();
    assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
    let c = train_joint(&ds, &small_config(6)).unwrap();
    assert_ne!(a.to_json().unwrap(), c.to_json().unwrap());
}

#[test]
fn variants_use_their_stages() {
    let ds = dataset(50, 3);
    for variant in Variant::ALL {
        let m = train_joint(&ds, &small_config(3).with_variant(variant)).unwrap();
        assert_eq!(m.encoder.is_some(), variant.uses_encoder(), "{variant}");
        assert_eq!(m.gp.is_some(), variant.uses_gp(), "{variant}");
        assert_eq!(m.forest.is_some(), variant.uses_forest(), "{variant}");
        assert_eq!(m.sigma_ref.is_some(), variant.uses_gp(), "{variant}");
        let c = m.components(&ds).unwrap();
        assert_eq!(c.temporal.cols(), if variant.uses_encoder() { 4 } else { 9 });
        assert_eq!(c.enriched.cols(), 27);
    }
}

#[test]
fn no_forest_prediction_is_the_gp_mean() {
    let ds = dataset(50, 4);
    let m = train_joint(&ds, &small_config(4).with_variant(Variant::NoRf)).unwrap();
    for p in m.predict(&ds).unwrap() {
        assert_eq!(p.y_pred.to_bits(), p.gp_mean.unwrap().to_bits());
    }
}

#[test]
fn confidence_decreases_with_variance() {
    let ds = dataset(50, 5);
    let m = train_joint(&ds, &small_config(5)).unwrap();
    let sigma_ref = m.sigma_ref.unwrap();
    let mut rows: Vec<(f64, f64)> = m
        .predict(&ds)
        .unwrap()
        .iter()
        .map(|p| (p.gp_var.unwrap(), p.confidence.unwrap()))
        .collect();
    rows.sort_by(|a, b| a.0.total_cmp(&b.0));
    for w in rows.windows(2) {
        assert!(w[1].1 <= w[0].1);
    }
    assert!(rows.iter().all(|r| (0.0..=1.0).contains(&r.1)));
    let c = confidence_from_variance(&[0.0, sigma_ref * sigma_ref, 4.0 * sigma_ref * sigma_ref], sigma_ref);
    assert_eq!(c, vec![1.0, 0.0, 0.0]);
}

#[test]
fn optimisation_traces_reach_their_best() {
    let ds = dataset(50, 6);
    for variant in [Variant::Full, Variant::NoBilstm, Variant::NoGpr] {
        let m = train_joint(&ds, &small_config(6).with_variant(variant)).unwrap();
        let d = &m.diagnostics;
        let trace = d.nmll_trace.as_ref().or(d.head_trace.as_ref()).unwrap();
        let run = trace.running_min();
        assert!(run.windows(2).all(|w| w[1] <= w[0]));
        assert!(trace.last() <= trace.initial(), "{variant}");
        assert!((trace.last() - trace.losses[trace.best_epoch]).abs() < 1e-9);
    }
}

#[test]
fn county_summary_matches_group_by() {
    let ds = dataset(80, 7);
    let m = train_joint(&ds, &small_config(7)).unwrap();
    let preds = m.predict(&ds).unwrap();
    let counties = ds.county_ids();
    let observed: Vec<f64> = preds.iter().map(|p| p.y_true).collect();
    let predicted: Vec<f64> = preds.iter().map(|p| p.y_pred).collect();
    let confidence: Vec<f64> = preds.iter().map(|p| p.confidence.unwrap()).collect();
    let summary = aggregate_county(&counties, &observed, &predicted, &confidence).unwrap();

    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, c) in counties.iter().enumerate() {
        groups.entry(c).or_default().push(i);
    }
    assert_eq!(summary.len(), groups.len());
    for (s, (county, idx)) in summary.iter().zip(&groups) {
        assert_eq!(s.county_id, *county);
        let mean = |v: &[f64]| idx.iter().map(|&i| v[i]).sum::<f64>() / idx.len() as f64;
        assert!((s.opfvl - mean(&observed)).abs() < 1e-12);
        assert!((s.ppvl - mean(&predicted)).abs() < 1e-12);
        assert!((s.apc - mean(&confidence)).abs() < 1e-12);
    }
}

#[test]
fn single_event_prediction_matches_batch() {
    let ds = dataset(50, 8);
    let m = train_joint(&ds, &small_config(8)).unwrap();
    let batch = m.predict(&ds).unwrap();
    for i in [0, 17, 49] {
        let one = m.predict(&ds.select(&[i])).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one[0].event_id, batch[i].event_id);
        assert!((one[0].y_pred - batch[i].y_pred).abs() < 1e-12);
        assert!((one[0].gp_var.unwrap() - batch[i].gp_var.unwrap()).abs() < 1e-12);
    }
}

#[test]
fn saved_model_predicts_identically() {
    let ds = dataset(50, 9);
    let m = train_joint(&ds, &small_config(9)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    m.save(&path).unwrap();
    let back = TrainedModel::load(&path).unwrap();
    assert_eq!(back, m);
    assert_eq!(back.predict(&ds).unwrap(), m.predict(&ds).unwrap());

    let text = std::fs::read_to_string(&path).unwrap().replacen("mvelma-model-v1", "other-v9", 1);
    assert!(matches!(TrainedModel::from_json(&text), Err(mvelma::Error::ModelFormat(_))));
}

#[test]
fn ablation_suite_matches_individual_runs() {
    let ds = dataset(50, 10);
    let cfg = small_config(10);
    let suite = run_ablation_suite(&ds, &cfg).unwrap();
    assert_eq!(suite.iter().map(|r| r.variant).collect::<Vec<_>>(), Variant::ALL.to_vec());
    for r in &suite {
        let alone = run_ablation(&ds, r.variant, &cfg).unwrap();
        assert_eq!(alone, r.metrics, "{}", r.variant);
    }
}

#[test]
fn out_of_fold_means_feed_the_forest() {
    let ds = dataset(50, 11);
    let mut cfg = small_config(11);
    let in_sample = train_joint(&ds, &cfg).unwrap();
    cfg.oof_folds = Some(5);
    let oof = train_joint(&ds, &cfg).unwrap();
    assert_eq!(in_sample.gp, oof.gp);
    assert_ne!(in_sample.forest, oof.forest);
}
