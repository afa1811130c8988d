use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{substream, Rng};

use super::labels::augment_universes;

pub const UNIVERSE_SIZE: usize = 100;

/// Weekly one-factor market with stochastic idiosyncratic volatility.
/// All volatilities are per week.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarketConfig {
    pub factor_vol: f64,
    /// Median idiosyncratic volatility.
    pub idio_vol: f64,
    /// Standard deviation of the per-asset log volatility level.
    pub vol_dispersion: f64,
    /// AR(1) coefficient of log volatility around its asset level.
    pub vol_persistence: f64,
    pub vol_of_vol: f64,
    /// ETFs carry this multiple of the stock volatility level.
    pub etf_vol_ratio: f64,
    pub etf_fraction: f64,
    pub beta_mean: f64,
    pub beta_sd: f64,
}

impl MarketConfig {
    /// Assets differ strongly and persistently in volatility.
    pub fn heterogeneous() -> Self {
        Self {
            factor_vol: 0.02,
            idio_vol: 0.035,
            vol_dispersion: 1.0,
            vol_persistence: 0.95,
            vol_of_vol: 0.1,
            etf_vol_ratio: 0.6,
            etf_fraction: 0.5,
            beta_mean: 1.0,
            beta_sd: 0.3,
        }
    }

    /// Every asset has the same constant volatility and factor loading.
    pub fn homogeneous() -> Self {
        Self {
            vol_dispersion: 0.0,
            vol_of_vol: 0.0,
            etf_vol_ratio: 1.0,
            beta_sd: 0.0,
            ..Self::heterogeneous()
        }
    }
}

impl Default for MarketConfig {
    fn default() -> Self {
        Self::heterogeneous()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Market {
    /// `n_assets x (n_weeks + 1)`, starting at 100.
    pub prices: Vec<Vec<f64>>,
    pub is_etf: Vec<bool>,
    /// Latent idiosyncratic volatility, `n_assets x n_weeks`.
    pub vol: Vec<Vec<f64>>,
    /// The primary universe (assets `0..100`) first, then the auxiliary ones.
    pub universes: Vec<Vec<usize>>,
    /// Every weekly return is identical across assets and weeks.
    pub degenerate: bool,
}

impl Market {
    pub fn n_assets(&self) -> usize {
        self.prices.len()
    }

    pub fn n_weeks(&self) -> usize {
        self.prices[0].len() - 1
    }

    /// Universe index of every asset.
    pub fn universe_of(&self) -> Vec<usize> {
        let mut out = vec![0; self.n_assets()];
        for (u, members) in self.universes.iter().enumerate() {
            for &a in members {
                out[a] = u;
            }
        }
        out
    }

    /// Weekly log returns, `n_assets x n_weeks`.
    pub fn log_returns(&self) -> Vec<Vec<f64>> {
        self.prices
            .iter()
            .map(|p| p.windows(2).map(|w| (w[1] / w[0]).ln()).collect())
            .collect()
    }
}

/// Log return of asset `i` at week `t` is `b_i f_t + σ_{i,t} e_{i,t}`.
/// The primary universe holds 50 stocks followed by 50 ETFs.
pub fn synth_market(n_assets: usize, n_weeks: usize, seed: u64, config: &MarketConfig) -> Result<Market> {
    if n_assets == 0 || n_assets % UNIVERSE_SIZE != 0 {
        return Err(Error::Parameter(format!(
            "{n_assets} assets is not a positive multiple of {UNIVERSE_SIZE}"
        )));
    }
    if n_weeks == 0 {
        return Err(Error::Parameter("market needs at least one week".into()));
    }
    let mut rng = substream(seed, "market");
    let is_etf: Vec<bool> = (0..n_assets)
        .map(|i| {
            if i < UNIVERSE_SIZE {
                i >= UNIVERSE_SIZE / 2
            } else {
                rng.random::<f64>() < config.etf_fraction
            }
        })
        .collect();
    let factor: Vec<f64> = (0..n_weeks).map(|_| config.factor_vol * normal(&mut rng)).collect();
    let mut prices = Vec::with_capacity(n_assets);
    let mut vols = Vec::with_capacity(n_assets);
    for &etf in &is_etf {
        let beta = config.beta_mean + config.beta_sd * normal(&mut rng);
        let mut level = (config.idio_vol).ln() + config.vol_dispersion * normal(&mut rng);
        if etf {
            level += config.etf_vol_ratio.ln();
        }
        let stationary_sd = config.vol_of_vol / (1.0 - config.vol_persistence.powi(2)).max(1e-12).sqrt();
        let mut h = level + stationary_sd * normal(&mut rng);
        let mut p = Vec::with_capacity(n_weeks + 1);
        let mut v = Vec::with_capacity(n_weeks);
        p.push(100.0);
        for f in &factor {
            h = level + config.vol_persistence * (h - level) + config.vol_of_vol * normal(&mut rng);
            let sigma = if config.idio_vol > 0.0 { h.exp() } else { 0.0 };
            let r = beta * f + sigma * normal(&mut rng);
            let last = *p.last().expect("seeded");
            p.push(last * r.exp());
            v.push(sigma);
        }
        prices.push(p);
        vols.push(v);
    }
    let extra: Vec<usize> = (UNIVERSE_SIZE..n_assets).collect();
    let mut universes = vec![(0..UNIVERSE_SIZE).collect::<Vec<_>>()];
    if !extra.is_empty() {
        universes.extend(augment_universes(&extra, &mut substream(seed, "universes"))?);
    }
    let first = prices[0][1] / prices[0][0];
    let degenerate = prices
        .iter()
        .all(|p| p.windows(2).all(|w| w[1] / w[0] == first));
    if degenerate {
        log::warn!("every asset has the same return in every week");
    }
    Ok(Market {
        prices,
        is_etf,
        vol: vols,
        universes,
        degenerate,
    })
}

fn normal(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Cross-sectional standard deviation of each asset's realized weekly
/// volatility over the whole sample.
pub fn realized_vol_dispersion(market: &Market) -> f64 {
    let vols: Vec<f64> = market
        .log_returns()
        .iter()
        .map(|r| {
            let n = r.len() as f64;
            let m = r.iter().sum::<f64>() / n;
            (r.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0)).sqrt()
        })
        .collect();
    let n = vols.len() as f64;
    let m = vols.iter().sum::<f64>() / n;
    (vols.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0)).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_market() {
        let cfg = MarketConfig::heterogeneous();
        let a = synth_market(200, 30, 4, &cfg).unwrap();
        let b = synth_market(200, 30, 4, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.universes.len(), 2);
        assert!(a.prices.iter().flatten().all(|p| *p > 0.0));
        assert_eq!(a.is_etf[..100].iter().filter(|e| **e).count(), 50);
        assert_ne!(a, synth_market(200, 30, 5, &cfg).unwrap());
    }

    #[test]
    fn silent_market_is_degenerate() {
        let cfg = MarketConfig {
            factor_vol: 0.0,
            idio_vol: 0.0,
            ..MarketConfig::homogeneous()
        };
        let m = synth_market(100, 10, 0, &cfg).unwrap();
        assert!(m.degenerate);
        assert!(m.prices.iter().flatten().all(|p| *p == 100.0));
        assert!(!synth_market(100, 10, 0, &MarketConfig::homogeneous()).unwrap().degenerate);
    }

    #[test]
    fn rejects_partial_universes() {
        assert!(synth_market(150, 10, 0, &MarketConfig::default()).is_err());
        assert!(synth_market(0, 10, 0, &MarketConfig::default()).is_err());
    }

    #[test]
    fn heterogeneous_vols_are_spread_out() {
        let het = realized_vol_dispersion(&synth_market(100, 200, 11, &MarketConfig::heterogeneous()).unwrap());
        let hom = realized_vol_dispersion(&synth_market(100, 200, 11, &MarketConfig::homogeneous()).unwrap());
        assert!(het > 5.0 * hom, "{het} vs {hom}");
    }
}
