use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linear::{
    als_fit, cluster_fit, finetune_mase, forecast_recursive, AlsConfig, FineTuneConfig, LinearMtMs, SeriesSet,
};
use crate::losses::Frequency;
use crate::rng::{substream, Rng};

use super::report::BenchmarkReport;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeriesFamilies {
    /// Every series follows the same AR(1).
    Homogeneous,
    /// Half persistent AR(1), half seasonal dummies plus noise.
    ArAndSeasonal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct M4Config {
    pub families: SeriesFamilies,
    pub n_series: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub noise: f64,
    pub d_x: usize,
    pub d_theta_grid: Vec<usize>,
    pub k_grid: Vec<usize>,
    pub als: AlsConfig,
    pub finetune: FineTuneConfig,
}

impl Default for M4Config {
    fn default() -> Self {
        Self {
            families: SeriesFamilies::ArAndSeasonal,
            n_series: 200,
            min_len: 48,
            max_len: 144,
            noise: 1.0,
            d_x: 12,
            d_theta_grid: vec![0, 1, 2, 4],
            k_grid: vec![2, 4, 8],
            als: AlsConfig::default(),
            finetune: FineTuneConfig::default(),
        }
    }
}

pub const M4_FREQUENCY: Frequency = Frequency::Monthly;

/// Raw series (training part followed by the forecast horizon) and the
/// family index of each.
pub fn synth_series(config: &M4Config, rng: &mut Rng) -> (Vec<Vec<f64>>, Vec<usize>) {
    let h = M4_FREQUENCY.horizon();
    let season = M4_FREQUENCY.season();
    let eps = Normal::new(0.0, config.noise).expect("finite noise");
    let mut out = Vec::with_capacity(config.n_series);
    let mut family = Vec::with_capacity(config.n_series);
    for i in 0..config.n_series {
        let len = rng.random_range(config.min_len..=config.max_len) + h;
        let level = rng.random_range(20.0..60.0);
        let fam = match config.families {
            SeriesFamilies::Homogeneous => 0,
            SeriesFamilies::ArAndSeasonal => i % 2,
        };
        let values: Vec<f64> = if fam == 0 {
            let phi: f64 = match config.families {
                SeriesFamilies::Homogeneous => 0.7,
                SeriesFamilies::ArAndSeasonal => rng.random_range(0.8..0.98),
            };
            let mut y = level + eps.sample(rng) / (1.0 - phi * phi).sqrt();
            (0..len)
                .map(|_| {
                    y = level + phi * (y - level) + eps.sample(rng);
                    y
                })
                .collect()
        } else {
            let amp = rng.random_range(3.0..8.0);
            let shift = rng.random_range(0..season);
            (0..len)
                .map(|t| {
                    let angle = 2.0 * std::f64::consts::PI * ((t + shift) % season) as f64 / season as f64;
                    level + amp * angle.sin() + eps.sample(rng)
                })
                .collect()
        };
        out.push(values);
        family.push(fam);
    }
    (out, family)
}

pub struct M4Run {
    pub reports: Vec<BenchmarkReport>,
    /// Indices of series skipped for being too short.
    pub skipped: Vec<usize>,
    pub fits: Vec<(usize, LinearMtMs)>,
    pub set: SeriesSet,
}

/// Per-series MASE of recursive forecasts. `beta` acts on the scaled
/// series, so the absolute error in scaled units is already the MASE.
fn score(set: &SeriesSet, tests: &[Vec<f64>], beta_of: impl Fn(usize) -> Vec<f64>) -> Result<Vec<f64>> {
    set.series
        .iter()
        .zip(tests)
        .enumerate()
        .map(|(m, (s, test))| {
            let f = forecast_recursive(&beta_of(m), &s.history, test.len())?;
            Ok(f.iter().zip(test).map(|(a, b)| (a - b / s.scale).abs()).sum::<f64>() / test.len() as f64)
        })
        .collect()
}

/// Fits pooled, clustered and localized linear models on synthetic monthly
/// series and scores recursive forecasts over the horizon.
pub fn run_m4like(config: &M4Config, seed: u64) -> Result<M4Run> {
    let (raw, _) = synth_series(config, &mut substream(seed, "series"));
    run_m4like_on(&raw, config, seed)
}

pub fn run_m4like_on(raw: &[Vec<f64>], config: &M4Config, seed: u64) -> Result<M4Run> {
    let h = M4_FREQUENCY.horizon();
    let mut train = Vec::new();
    let mut tests = Vec::new();
    let mut too_short = Vec::new();
    let mut kept_idx = Vec::new();
    for (i, s) in raw.iter().enumerate() {
        if s.len() < config.d_x + h + 2 {
            log::warn!("series {i}: {} values, needs {} for lags and horizon", s.len(), config.d_x + h + 2);
            too_short.push(i);
            continue;
        }
        train.push(s[..s.len() - h].to_vec());
        tests.push(s[s.len() - h..].to_vec());
        kept_idx.push(i);
    }
    if train.is_empty() {
        return Err(Error::Degenerate("no series long enough".into()));
    }
    let (set, skipped_inner) = SeriesSet::from_training(&train, M4_FREQUENCY, config.d_x)?;
    let tests: Vec<Vec<f64>> = (0..train.len())
        .filter(|i| !skipped_inner.contains(i))
        .map(|i| tests[i].clone())
        .collect();
    let mut skipped = too_short;
    skipped.extend(skipped_inner.iter().map(|&i| kept_idx[i]));
    skipped.sort_unstable();

    let snapshot = serde_json::to_value(config)?;
    let mut reports = Vec::new();
    let mut fits = Vec::new();

    let pooled = als_fit(&set, 0, &config.als)?.model;
    let b0: Vec<f64> = pooled.omega_b.iter().copied().collect();
    reports.push(BenchmarkReport::new("pooled", "mase", score(&set, &tests, |_| b0.clone())?, seed, snapshot.clone())?);

    let mut rng = substream(seed, "kmeans");
    for &k in &config.k_grid {
        if k > set.len() {
            log::warn!("skipping k={k}: only {} series", set.len());
            continue;
        }
        let cm = cluster_fit(&set, k, config.als.ridge, &mut rng)?;
        let per = score(&set, &tests, |m| cm.betas[cm.assignment[m]].clone())?;
        reports.push(BenchmarkReport::new(format!("cluster_k{k}"), "mase", per, seed, snapshot.clone())?);
    }

    for &d in &config.d_theta_grid {
        if d > set.n_coef {
            log::warn!("skipping d_theta={d}: only {} coefficients", set.n_coef);
            continue;
        }
        let fit = als_fit(&set, d, &config.als)?;
        let model = fit.model;
        let per = score(&set, &tests, |m| model.beta(m).iter().copied().collect())?;
        reports.push(BenchmarkReport::new(format!("mtms_d{d}"), "mase", per, seed, snapshot.clone())?);
        if config.finetune.enabled && d > 0 {
            let tuned = finetune_mase(&model, &set, &config.finetune)?;
            let per = score(&set, &tests, |m| tuned.beta(m).iter().copied().collect())?;
            reports.push(BenchmarkReport::new(format!("mtms_d{d}_ft"), "mase", per, seed, snapshot.clone())?);
        }
        fits.push((d, model));
    }
    for r in &reports {
        log::info!("m4like {}: mase {:.4} ± {:.4}", r.method, r.mean, r.ci_half_width);
    }
    Ok(M4Run {
        reports,
        skipped,
        fits,
        set,
    })
}
