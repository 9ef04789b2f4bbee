//! Synthetic fire events with a documented generative process.
//!
//! Counties draw an elevation and a land-cover composition. Each event draws
//! a county, a start date concentrated in summer and a duration. Its nine
//! weather channels over the 30 pre-fire days follow AR(1) anomalies
//! (coefficient 0.8) around a seasonal cycle, and a random warming ramp is
//! added to temperature over the last seven days. The noise-free target is
//!
//! ```text
//! f = g(mean weather, elevation, land cover, day of year) + 0.1 h(Δ)
//! ```
//!
//! where `Δ` is mean temperature over the last seven days minus the mean over
//! the first 23 (see [`synth_signal`]); the observed target adds Gaussian noise
//! with standard deviation `noise_fraction · std(f)`.

use std::f64::consts::PI;

use chrono::NaiveDate;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Gamma, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{
    Dataset, FireEvent, ELEVATION, LC_START, N_ENRICHED, N_LAND_COVER, SEQ_LEN, TEMPORAL_COLUMNS,
    WEATHER_CHANNELS,
};
use crate::encoder::TimeSeriesBatch;
use crate::numcore::Matrix;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_events: usize,
    pub n_counties: usize,
    pub seed: u64,
    /// Noise standard deviation as a fraction of the noise-free signal's.
    pub noise_fraction: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_events: 500,
            n_counties: 10,
            seed: 42,
            noise_fraction: 0.2,
        }
    }
}

/// Ground truth behind a synthetic dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthTruth {
    /// `g + 0.1 h` per event.
    pub noise_free: Vec<f64>,
    /// `g` per event.
    pub static_part: Vec<f64>,
    /// `0.1 h` per event.
    pub temporal_part: Vec<f64>,
    pub noise_std: f64,
}

impl SynthTruth {
    /// Best test R² any model can reach: `1 − σ² / (var(f) + σ²)`.
    pub fn r2_ceiling(&self) -> f64 {
        let v = population_variance(&self.noise_free);
        1.0 - self.noise_std.powi(2) / (v + self.noise_std.powi(2))
    }
}

pub(crate) fn population_variance(v: &[f64]) -> f64 {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn seasonal(day_of_year: f64) -> f64 {
    (2.0 * PI * (day_of_year - 105.0) / 365.25).sin()
}

/// Saturation vapour pressure in kPa at `t` °C.
fn saturation_vp(t: f64) -> f64 {
    0.6108 * (17.27 * t / (t + 237.3)).exp()
}

/// The documented signal of one event, `(g, h)`, from its `30 x 9` weather
/// (row-major by day) and its 27 enriched features:
///
/// ```text
/// g = 0.12 + 0.05 tanh((T̄ − 18)/6) + 0.03 tanh((V̄ − 1.5)/0.8) − 0.02 tanh(P̄/2 − 1)
///     + 0.08 forest + 0.05 shrub − 0.06 bare
///     + 0.03 logistic((elevation − 1200)/150) + 0.015 sin(2π(doy − 80)/365.25)
/// h = 0.5 tanh(Δ/3),  Δ = mean tavg over days 24..30 − mean tavg over days 1..23
/// ```
///
/// with `T̄`, `V̄`, `P̄` the 30-day means of temperature, vapour pressure deficit
/// and precipitation, forest = LC_01 + LC_02 + LC_04 + LC_05, shrub = LC_06 +
/// LC_07 + LC_08 and bare = LC_00 + LC_13 + LC_16.
pub fn synth_signal(weather: &[f64], enriched: &[f64]) -> (f64, f64) {
    let w = WEATHER_CHANNELS.len();
    let mean = |c: usize, from: usize, to: usize| {
        (from..to).map(|t| weather[t * w + c]).sum::<f64>() / (to - from) as f64
    };
    let t_bar = mean(0, 0, SEQ_LEN);
    let p_bar = mean(1, 0, SEQ_LEN);
    let v_bar = mean(7, 0, SEQ_LEN);
    let lc = |k: usize| enriched[TEMPORAL_COLUMNS.len() + LC_START + k];
    let forest = lc(1) + lc(2) + lc(4) + lc(5);
    let shrub = lc(6) + lc(7) + lc(8);
    let bare = lc(0) + lc(13) + lc(16);
    let elevation = enriched[TEMPORAL_COLUMNS.len() + ELEVATION];
    let doy = enriched[2];
    let g = 0.12 + 0.05 * ((t_bar - 18.0) / 6.0).tanh() + 0.03 * ((v_bar - 1.5) / 0.8).tanh()
        - 0.02 * (p_bar / 2.0 - 1.0).tanh()
        + 0.08 * forest
        + 0.05 * shrub
        - 0.06 * bare
        + 0.03 * logistic((elevation - 1200.0) / 150.0)
        + 0.015 * (2.0 * PI * (doy - 80.0) / 365.25).sin();
    let split = SEQ_LEN - 7;
    let delta = mean(0, split, SEQ_LEN) - mean(0, 0, split);
    let h = 0.5 * (delta / 3.0).tanh();
    (g, h)
}

struct County {
    id: String,
    latitude: f64,
    longitude: f64,
    elevation: f64,
    land_cover: [f64; N_LAND_COVER],
}

/// Generate a synthetic dataset and its ground truth.
pub fn synth_generate(cfg: &SynthConfig) -> Result<(Dataset, SynthTruth)> {
    if cfg.n_events < 10 {
        return Err(Error::InvalidConfig(format!("need at least 10 events, got {}", cfg.n_events)));
    }
    if cfg.n_counties == 0 {
        return Err(Error::InvalidConfig("need at least one county".into()));
    }
    if !(cfg.noise_fraction >= 0.0 && cfg.noise_fraction.is_finite()) {
        return Err(Error::InvalidConfig("noise_fraction must be finite and >= 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let gamma = Gamma::new(0.6, 1.0).expect("valid gamma");
    let counties: Vec<County> = (0..cfg.n_counties)
        .map(|k| {
            let draws: [f64; N_LAND_COVER] = std::array::from_fn(|_| gamma.sample(&mut rng));
            let total: f64 = draws.iter().sum();
            let covered = rng.random_range(0.92..1.0);
            County {
                id: format!("06{:03}", 2 * k + 1),
                latitude: rng.random_range(32.5..42.0),
                longitude: rng.random_range(-124.0..-114.0),
                elevation: rng.random_range(50.0..2600.0),
                land_cover: draws.map(|d| d / total * covered),
            }
        })
        .collect();

    let doy_dist = Normal::new(205.0, 40.0).expect("valid normal");
    let duration_dist = Exp::new(1.0 / 6.0).expect("valid exponential");
    let n = cfg.n_events;
    let w = WEATHER_CHANNELS.len();
    let mut events = Vec::with_capacity(n);
    let mut weather = TimeSeriesBatch::zeros(n, SEQ_LEN, w);
    let mut enriched = Matrix::zeros(n, N_ENRICHED);
    let phi: f64 = 0.8;
    let innov = (1.0 - phi * phi).sqrt();

    for i in 0..n {
        let c = if i < counties.len() {
            i
        } else {
            rng.random_range(0..counties.len())
        };
        let county = &counties[c];
        let year = rng.random_range(2018..=2024);
        let doy = (doy_dist.sample(&mut rng) as f64).round().clamp(1.0, 365.0) as u32;
        let start_date = NaiveDate::from_yo_opt(year, doy).expect("day of year within 1..=365");
        let duration: f64 = duration_dist.sample(&mut rng);
        let duration = duration.floor();
        events.push(FireEvent {
            event_id: format!("E{i:05}"),
            county_id: county.id.clone(),
            latitude: county.latitude + rng.random_range(-0.15..0.15),
            longitude: county.longitude + rng.random_range(-0.15..0.15),
            start_date,
            fire_duration_days: duration,
            detection_confidence: None,
            target: None,
        });

        let ramp: f64 = 2.5 * rng.sample::<f64, _>(StandardNormal);
        let mut a: [f64; 3] = std::array::from_fn(|_| rng.sample(StandardNormal));
        for t in 0..SEQ_LEN {
            if t > 0 {
                for s in a.iter_mut() {
                    let e: f64 = rng.sample(StandardNormal);
                    *s = phi * *s + innov * e;
                }
            }
            let [a_temp, a_moist, a_wind] = a;
            let season = seasonal(doy as f64 - SEQ_LEN as f64 + t as f64);
            let warming = ramp * (t as f64 - (SEQ_LEN - 8) as f64).max(0.0) / 7.0;
            let tavg = 24.0 + 9.0 * season - 0.0055 * county.elevation + 2.0 * a_temp + warming;
            let spread = 5.0 + 3.0 * rng.random::<f64>();
            let rh_min = (35.0 - 1.2 * (tavg - 20.0) + 10.0 * a_moist).clamp(2.0, 95.0);
            let rh_max = (rh_min + 25.0 + 5.0 * rng.random::<f64>()).min(100.0);
            let precip = (4.0 * (a_moist - 0.6) - 1.5 * season).max(0.0);
            let noise: f64 = rng.sample(StandardNormal);
            let srad = (260.0 + 70.0 * season - 25.0 * a_moist + 10.0 * noise).max(0.0);
            let vpd = saturation_vp(tavg) * (1.0 - (rh_min + rh_max) / 200.0);
            let wind = (2.8 + 1.1 * a_wind).abs();
            let day = [
                tavg,
                precip,
                rh_min,
                rh_max,
                srad,
                tavg - spread / 2.0,
                tavg + spread / 2.0,
                vpd,
                wind,
            ];
            for (ch, v) in day.into_iter().enumerate() {
                weather.set(i, t, ch, v);
            }
        }

        let v_bar = (0..SEQ_LEN).map(|t| weather.get(i, t, 7)).sum::<f64>() / SEQ_LEN as f64;
        let lc = &county.land_cover;
        let green = 0.2 + 0.5 * (lc[1] + lc[2] + lc[4] + lc[5]) + 0.3 * (lc[6] + lc[7] + lc[8]);
        let mut normal = |s: f64| s * rng.sample::<f64, _>(StandardNormal);
        let before_slope = -0.0008 * (v_bar - 1.5) + normal(0.0005);
        let ndvi = [
            before_slope + normal(0.0015),
            (0.01 + 0.02 * green + normal(0.004)).abs(),
            before_slope + normal(0.0008),
            (0.015 + 0.025 * green + normal(0.004)).abs(),
            before_slope,
            (0.02 + 0.03 * green + normal(0.004)).abs(),
        ];
        let row = enriched.row_mut(i);
        row[..3].copy_from_slice(&events[i].temporal_features());
        let base = TEMPORAL_COLUMNS.len();
        row[base..base + ELEVATION].copy_from_slice(&ndvi);
        row[base + ELEVATION] = county.elevation;
        row[base + LC_START..base + LC_START + N_LAND_COVER].copy_from_slice(lc);
    }

    let mut static_part = Vec::with_capacity(n);
    let mut temporal_part = Vec::with_capacity(n);
    let mut noise_free = Vec::with_capacity(n);
    for i in 0..n {
        let (g, h) = synth_signal(weather.event(i), enriched.row(i));
        static_part.push(g);
        temporal_part.push(0.1 * h);
        noise_free.push(g + 0.1 * h);
    }
    let noise_std = cfg.noise_fraction * population_variance(&noise_free).sqrt();
    let targets: Vec<f64> = noise_free
        .iter()
        .map(|f| f + noise_std * rng.sample::<f64, _>(StandardNormal))
        .collect();
    for (e, &y) in events.iter_mut().zip(&targets) {
        e.target = Some(y);
    }
    let ds = Dataset::new(events, weather, enriched, targets)?;
    Ok((
        ds,
        SynthTruth {
            noise_free,
            static_part,
            temporal_part,
            noise_std,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> SynthConfig {
        SynthConfig {
            n_events: 60,
            n_counties: 4,
            seed,
            noise_fraction: 0.2,
        }
    }

    #[test]
    fn same_seed_same_data() {
        let a = synth_generate(&small(3)).unwrap();
        let b = synth_generate(&small(3)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.0, synth_generate(&small(4)).unwrap().0);
    }

    #[test]
    fn rejects_tiny_requests() {
        assert!(synth_generate(&SynthConfig { n_events: 9, ..small(1) }).is_err());
        assert!(synth_generate(&SynthConfig { n_counties: 0, ..small(1) }).is_err());
    }

    #[test]
    fn noiseless_targets_equal_signal() {
        let (ds, truth) = synth_generate(&SynthConfig { noise_fraction: 0.0, ..small(5) }).unwrap();
        assert_eq!(ds.targets, truth.noise_free);
        for i in 0..ds.len() {
            let (g, h) = synth_signal(ds.weather.event(i), ds.enriched.row(i));
            assert_eq!(g + 0.1 * h, ds.targets[i]);
        }
    }

    #[test]
    fn every_county_is_used() {
        let (ds, _) = synth_generate(&small(6)).unwrap();
        let mut ids: Vec<&str> = ds.county_ids();
        ids.sort();
        ids.dedup();
        assert_eq!(ids, ["06001", "06003", "06005", "06007"]);
    }
}
