use serde::{Deserialize, Serialize};

use crate::autodiff::Array2;
use crate::error::{Error, Result};
use crate::mtms::NormStats;

use super::labels::INTERVAL_WEEKS;

pub const N_LAGS: usize = 7;
/// Weeks of price history needed before the first interval.
pub const MIN_HISTORY: usize = N_LAGS * INTERVAL_WEEKS;
const LONG_VOL_WEEKS: usize = 52;

pub fn feature_names() -> Vec<String> {
    let mut names = vec!["is_etf".to_string()];
    names.extend((1..=N_LAGS).map(|j| format!("ret_lag{j}")));
    names.extend((1..=N_LAGS).map(|j| format!("vol_lag{j}")));
    names.extend(["ema10", "rsi14", "roc12", "macd", "vol52"].map(String::from));
    names
}

fn ema_series(prices: &[f64], span: usize) -> Vec<f64> {
    let a = 2.0 / (span as f64 + 1.0);
    let mut out = Vec::with_capacity(prices.len());
    let mut e = prices[0];
    for p in prices {
        e = a * p + (1.0 - a) * e;
        out.push(e);
    }
    out
}

fn sample_sd(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    if x.len() < 2 {
        return 0.0;
    }
    let m = x.iter().sum::<f64>() / n;
    (x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1.0)).sqrt()
}

/// Precomputed series for one asset; `features_at` reads only weeks `<= s`.
pub struct AssetHistory<'a> {
    prices: &'a [f64],
    is_etf: bool,
    /// `log_ret[t]` is the return from week `t` to `t + 1`.
    log_ret: Vec<f64>,
    ema10: Vec<f64>,
    ema12: Vec<f64>,
    ema26: Vec<f64>,
}

impl<'a> AssetHistory<'a> {
    pub fn new(prices: &'a [f64], is_etf: bool) -> Self {
        Self {
            prices,
            is_etf,
            log_ret: prices.windows(2).map(|w| (w[1] / w[0]).ln()).collect(),
            ema10: ema_series(prices, 10),
            ema12: ema_series(prices, 12),
            ema26: ema_series(prices, 26),
        }
    }

    /// Features observable at the start of an interval beginning at week
    /// `s`. The long-window volatility is missing (NaN) before week 52.
    pub fn features_at(&self, s: usize) -> Result<Vec<f64>> {
        if s < MIN_HISTORY || s >= self.prices.len() {
            return Err(Error::Precondition(format!(
                "interval at week {s} needs weeks {MIN_HISTORY}..{}",
                self.prices.len()
            )));
        }
        let p = self.prices;
        let mut f = Vec::with_capacity(20);
        f.push(if self.is_etf { 1.0 } else { 0.0 });
        for j in 1..=N_LAGS {
            let end = s - (j - 1) * INTERVAL_WEEKS;
            f.push((p[end] / p[end - INTERVAL_WEEKS]).ln());
        }
        for j in 1..=N_LAGS {
            let end = s - (j - 1) * INTERVAL_WEEKS;
            f.push(sample_sd(&self.log_ret[end - INTERVAL_WEEKS..end]));
        }
        f.push(self.ema10[s] / p[s] - 1.0);
        let (mut gain, mut loss) = (0.0, 0.0);
        for t in s.saturating_sub(14)..s {
            let d = p[t + 1] - p[t];
            if d > 0.0 {
                gain += d;
            } else {
                loss -= d;
            }
        }
        f.push(if gain + loss > 0.0 { 100.0 * gain / (gain + loss) } else { 50.0 });
        f.push(p[s] / p[s - 12] - 1.0);
        f.push((self.ema12[s] - self.ema26[s]) / p[s]);
        f.push(if s >= LONG_VOL_WEEKS {
            sample_sd(&self.log_ret[s - LONG_VOL_WEEKS..s])
        } else {
            f64::NAN
        });
        Ok(f)
    }
}

/// Median imputation followed by standardization, both fitted on training
/// rows only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeaturePipeline {
    pub medians: Vec<f64>,
    pub norm: NormStats,
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

impl FeaturePipeline {
    pub fn fit(train_rows: &[&[f64]]) -> Result<Self> {
        let d = train_rows.first().map(|r| r.len()).ok_or_else(|| Error::Parameter("no training rows".into()))?;
        let medians: Vec<f64> = (0..d)
            .map(|c| median(train_rows.iter().map(|r| r[c]).filter(|v| !v.is_nan()).collect()))
            .collect();
        let mut imputed = Vec::with_capacity(train_rows.len() * d);
        for r in train_rows {
            imputed.extend(r.iter().zip(&medians).map(|(v, m)| if v.is_nan() { *m } else { *v }));
        }
        let norm = NormStats::fit(&Array2::new(train_rows.len(), d, imputed)?);
        Ok(Self { medians, norm })
    }

    pub fn impute(&self, row: &mut [f64]) {
        for (v, m) in row.iter_mut().zip(&self.medians) {
            if v.is_nan() {
                *v = *m;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_price_has_zero_returns_and_vols() {
        let p = vec![50.0; 60];
        let h = AssetHistory::new(&p, false);
        let f = h.features_at(56).unwrap();
        assert_eq!(f.len(), feature_names().len());
        assert!(f[1..1 + 2 * N_LAGS].iter().all(|v| *v == 0.0));
        assert_eq!(f[15], 0.0);
        assert_eq!(f[16], 50.0);
        assert_eq!(f[17], 0.0);
        assert_eq!(f[19], 0.0);
        assert!(h.features_at(27).is_err());
        assert!(h.features_at(30).unwrap()[19].is_nan());
    }

    #[test]
    fn lagged_returns_use_past_prices_only() {
        let p: Vec<f64> = (0..40).map(|t| 100.0 * (0.01 * t as f64).exp()).collect();
        let f = AssetHistory::new(&p, true).features_at(32).unwrap();
        assert_eq!(f[0], 1.0);
        for j in 0..N_LAGS {
            assert!((f[1 + j] - 0.04).abs() < 1e-12);
        }
        // Changing the future leaves the features alone.
        let mut q = p.clone();
        q[33] = 1.0;
        let g = AssetHistory::new(&q, true).features_at(32).unwrap();
        assert!(f.iter().zip(&g).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn imputation_and_normalization() {
        let rows = [vec![1.0, f64::NAN], vec![3.0, 4.0], vec![5.0, 8.0]];
        let refs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
        let pipe = FeaturePipeline::fit(&refs).unwrap();
        assert_eq!(pipe.medians, vec![3.0, 6.0]);
        let mut r = vec![2.0, f64::NAN];
        pipe.impute(&mut r);
        assert_eq!(r, vec![2.0, 6.0]);
        let mut full = vec![7.0, 1.0];
        pipe.impute(&mut full);
        assert_eq!(full, vec![7.0, 1.0]);
    }
}
