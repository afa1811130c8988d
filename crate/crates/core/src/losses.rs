//! Loss functions: mean squared error, ranked probability score over five
//! quintiles and mean absolute scaled error.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Array2, NodeId, Tape, Unary};
use crate::error::{shape_err, Error, Result};

pub const N_QUINTILES: usize = 5;

/// One-hot quintile membership.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuintileOutcome {
    /// Zero-based quintile, 0 = lowest returns.
    pub quintile: usize,
}

impl QuintileOutcome {
    pub fn new(quintile: usize) -> Result<Self> {
        if quintile >= N_QUINTILES {
            return Err(Error::Parameter(format!("quintile {quintile} out of range")));
        }
        Ok(Self { quintile })
    }

    pub fn one_hot(self) -> [f64; N_QUINTILES] {
        let mut v = [0.0; N_QUINTILES];
        v[self.quintile] = 1.0;
        v
    }
}

pub fn mse(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(shape_err("mse", format!("{} vs {}", pred.len(), target.len())));
    }
    if pred.is_empty() {
        return Err(Error::Parameter("mse of empty vectors".into()));
    }
    Ok(pred
        .iter()
        .zip(target)
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / pred.len() as f64)
}

/// `(1/5) Σ_k (cumulative predicted − cumulative realized)²`.
pub fn rps(pred: &[f64], outcome: QuintileOutcome) -> Result<f64> {
    if pred.len() != N_QUINTILES {
        return Err(shape_err("rps", format!("{} probabilities", pred.len())));
    }
    if pred.iter().any(|p| !(*p >= 0.0)) || (pred.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Parameter(format!("{pred:?} is not a probability vector")));
    }
    let y = outcome.one_hot();
    let (mut cp, mut cy, mut total) = (0.0, 0.0, 0.0);
    for k in 0..N_QUINTILES {
        cp += pred[k];
        cy += y[k];
        total += (cp - cy) * (cp - cy);
    }
    Ok(total / N_QUINTILES as f64)
}

/// Seasonal period used for the naive-forecast scale of each frequency.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Frequency {
    Yearly,
    Quarterly,
    Monthly,
    Weekly,
}

impl Frequency {
    pub fn season(self) -> usize {
        match self {
            Frequency::Yearly | Frequency::Weekly => 1,
            Frequency::Quarterly => 4,
            Frequency::Monthly => 12,
        }
    }

    pub fn horizon(self) -> usize {
        match self {
            Frequency::Yearly => 6,
            Frequency::Quarterly => 8,
            Frequency::Monthly => 18,
            Frequency::Weekly => 13,
        }
    }
}

/// In-sample mean absolute error of the seasonal-naive forecast.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaseScale {
    pub scale: f64,
    pub season: usize,
}

impl MaseScale {
    pub fn from_training(train: &[f64], season: usize) -> Result<Self> {
        if season == 0 || train.len() <= season {
            return Err(Error::Degenerate(format!(
                "{} training values cannot define a season-{season} scale",
                train.len()
            )));
        }
        let n = train.len() - season;
        let scale = (season..train.len())
            .map(|t| (train[t] - train[t - season]).abs())
            .sum::<f64>()
            / n as f64;
        if !(scale > 0.0) {
            return Err(Error::Degenerate(
                "training series is constant at its seasonal lag; MASE undefined".into(),
            ));
        }
        Ok(Self { scale, season })
    }
}

pub fn mase(forecasts: &[f64], actuals: &[f64], scale: MaseScale) -> Result<f64> {
    if forecasts.len() != actuals.len() || forecasts.is_empty() {
        return Err(shape_err(
            "mase",
            format!("{} forecasts for {} actuals", forecasts.len(), actuals.len()),
        ));
    }
    if !(scale.scale > 0.0) {
        return Err(Error::Degenerate("MASE scale must be positive".into()));
    }
    let mae = forecasts
        .iter()
        .zip(actuals)
        .map(|(f, a)| (f - a).abs())
        .sum::<f64>()
        / forecasts.len() as f64;
    Ok(mae / scale.scale)
}

/// Differentiable training loss attached to a prediction node.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Mse,
    /// Targets are one-hot quintile rows; predictions are probabilities.
    Rps,
    /// Mean absolute error; equals MASE once series are pre-scaled.
    Mae,
}

impl LossKind {
    /// Records the mean loss between `pred` and the constant `target`.
    pub fn on_tape(self, tape: &mut Tape, pred: NodeId, target: &Array2) -> NodeId {
        match self {
            LossKind::Mse => {
                let t = tape.constant(target.clone());
                let d = tape.sub(pred, t);
                let s = tape.square(d);
                tape.mean(s)
            }
            LossKind::Mae => {
                let t = tape.constant(target.clone());
                let d = tape.sub(pred, t);
                let s = tape.unary(d, Unary::Abs);
                tape.mean(s)
            }
            LossKind::Rps => {
                let upper = cumulative_matrix(target.cols());
                let cum_y = target.matmul(&upper).expect("target width matches");
                let u = tape.constant(upper);
                let cp = tape.matmul(pred, u);
                let cy = tape.constant(cum_y);
                let d = tape.sub(cp, cy);
                let s = tape.square(d);
                tape.mean(s)
            }
        }
    }

    /// Mean loss without a tape.
    pub fn evaluate(self, pred: &Array2, target: &Array2) -> f64 {
        match self {
            LossKind::Mse => mean_over(pred, target, |p, t| (p - t) * (p - t)),
            LossKind::Mae => mean_over(pred, target, |p, t| (p - t).abs()),
            LossKind::Rps => {
                let k = target.cols();
                let mut total = 0.0;
                for r in 0..pred.rows() {
                    let (mut cp, mut cy) = (0.0, 0.0);
                    for (p, t) in pred.row(r).iter().zip(target.row(r)) {
                        cp += p;
                        cy += t;
                        total += (cp - cy) * (cp - cy);
                    }
                }
                total / (pred.rows() * k) as f64
            }
        }
    }
}

impl LossKind {
    /// Mean loss and its gradient with respect to `pred`.
    pub fn value_grad(self, pred: &Array2, target: &Array2) -> (f64, Array2) {
        let n = pred.data().len() as f64;
        match self {
            LossKind::Mse => {
                let d = pred.zip_map(target, |p, t| p - t);
                let v = d.data().iter().map(|e| e * e).sum::<f64>() / n;
                (v, d.map(|e| 2.0 * e / n))
            }
            LossKind::Mae => {
                let d = pred.zip_map(target, |p, t| p - t);
                let v = d.data().iter().map(|e| e.abs()).sum::<f64>() / n;
                let sign = |e: f64| if e > 0.0 { 1.0 } else if e < 0.0 { -1.0 } else { 0.0 };
                (v, d.map(|e| sign(e) / n))
            }
            LossKind::Rps => {
                let k = pred.cols();
                let mut grad = Array2::zeros(pred.rows(), k);
                let mut total = 0.0;
                let mut e = vec![0.0; k];
                for r in 0..pred.rows() {
                    let (mut cp, mut cy) = (0.0, 0.0);
                    for (j, (p, t)) in pred.row(r).iter().zip(target.row(r)).enumerate() {
                        cp += p;
                        cy += t;
                        e[j] = cp - cy;
                        total += e[j] * e[j];
                    }
                    let g = grad.row_mut(r);
                    let mut acc = 0.0;
                    for j in (0..k).rev() {
                        acc += 2.0 * e[j] / n;
                        g[j] = acc;
                    }
                }
                (total / n, grad)
            }
        }
    }
}

fn mean_over(a: &Array2, b: &Array2, f: impl Fn(f64, f64) -> f64) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).sum::<f64>() / a.data().len() as f64
}

/// `U[i][j] = 1` for `i <= j`, so `p · U` is the running sum of `p`.
fn cumulative_matrix(k: usize) -> Array2 {
    let mut u = Array2::zeros(k, k);
    for i in 0..k {
        for j in i..k {
            u.set(i, j, 1.0);
        }
    }
    u
}
