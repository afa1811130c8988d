use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Signed weights split into gross exposure `alpha = Σ|w|` and the
/// scaleless direction `w / alpha`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PortfolioWeights {
    pub alpha: f64,
    pub w_tilde: Vec<f64>,
}

impl PortfolioWeights {
    pub fn recompose(&self) -> Vec<f64> {
        self.w_tilde.iter().map(|v| v * self.alpha).collect()
    }
}

pub fn decompose(w: &[f64]) -> Result<PortfolioWeights> {
    let alpha: f64 = w.iter().map(|v| v.abs()).sum();
    if !(alpha > 0.0) {
        return Err(Error::Degenerate("all weights are zero; direction undefined".into()));
    }
    Ok(PortfolioWeights {
        alpha,
        w_tilde: w.iter().map(|v| v / alpha).collect(),
    })
}

pub fn sample_sd(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    (x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1.0)).sqrt()
}

/// `Σ x / sd(x)` with the `n - 1` standard deviation.
pub fn ratio(x: &[f64]) -> Result<f64> {
    if x.len() < 2 {
        return Err(Error::Precondition(format!("{} rounds; need at least 2", x.len())));
    }
    let sd = sample_sd(x);
    if !(sd > 0.0) {
        return Err(Error::Degenerate("round returns have zero spread; ratio undefined".into()));
    }
    Ok(x.iter().sum::<f64>() / sd)
}

/// Log portfolio return of one round.
pub fn round_log_return(weights: &[f64], returns: &[f64]) -> Result<f64> {
    if weights.len() != returns.len() {
        return Err(Error::Parameter(format!(
            "{} weights for {} assets",
            weights.len(),
            returns.len()
        )));
    }
    let gross = 1.0 + weights.iter().zip(returns).map(|(w, r)| w * r).sum::<f64>();
    if !(gross > 0.0) {
        return Err(Error::Degenerate(format!("portfolio value {gross} is not positive")));
    }
    Ok(gross.ln())
}

/// `ret_t = ln(1 + Σ_m w_t r_t)` for every round and `IR = Σ ret / sd(ret)`.
pub fn information_ratio(weights: &[Vec<f64>], returns: &[Vec<f64>]) -> Result<(f64, Vec<f64>)> {
    if weights.len() != returns.len() {
        return Err(Error::Parameter(format!(
            "{} weight rounds for {} return rounds",
            weights.len(),
            returns.len()
        )));
    }
    let rets = weights
        .iter()
        .zip(returns)
        .map(|(w, r)| round_log_return(w, r))
        .collect::<Result<Vec<f64>>>()?;
    Ok((ratio(&rets)?, rets))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingCurve {
    pub alphas: Vec<f64>,
    pub ir: Vec<f64>,
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

/// Least-squares line through `(x, y)` and its R².
pub fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let syy: f64 = y.iter().map(|b| (b - my) * (b - my)).sum();
    let slope = sxy / sxx;
    let r2 = if syy > 0.0 { sxy * sxy / (sxx * syy) } else { 1.0 };
    (slope, my - slope * mx, r2)
}

/// IR of `alpha * w_tilde` for every `alpha` in the grid.
pub fn scaling_curve(w_tilde: &[Vec<f64>], returns: &[Vec<f64>], alphas: &[f64]) -> Result<ScalingCurve> {
    if alphas.len() < 2 {
        return Err(Error::Parameter("scaling grid needs two points".into()));
    }
    if let Some(a) = alphas.iter().find(|a| !(**a > 0.0 && **a <= 1.0)) {
        return Err(Error::Parameter(format!("scale {a} outside (0, 1]")));
    }
    let ir = alphas
        .iter()
        .map(|&a| {
            let w: Vec<Vec<f64>> = w_tilde.iter().map(|row| row.iter().map(|v| v * a).collect()).collect();
            information_ratio(&w, returns).map(|(ir, _)| ir)
        })
        .collect::<Result<Vec<f64>>>()?;
    let (slope, intercept, r_squared) = linear_fit(alphas, &ir);
    Ok(ScalingCurve {
        alphas: alphas.to_vec(),
        ir,
        slope,
        intercept,
        r_squared,
    })
}
