use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::optimize::{Adam, EarlyStop, Optimizer};

use super::als::LinearMtMs;
use super::series::SeriesSet;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FineTuneConfig {
    pub enabled: bool,
    pub lr: f64,
    pub steps: usize,
}

impl Default for FineTuneConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            lr: 0.001,
            steps: 300,
        }
    }
}

/// Mean over series of the in-sample mean absolute one-step error. Series
/// are already divided by their MASE scale, so this is the in-sample MASE.
pub fn in_sample_mase(model: &LinearMtMs, set: &SeriesSet) -> f64 {
    let total: f64 = set
        .series
        .iter()
        .enumerate()
        .map(|(m, s)| (&s.y - &s.x * model.beta(m)).abs().mean())
        .sum();
    total / set.len() as f64
}

fn pack(model: &LinearMtMs) -> Vec<f64> {
    let mut v: Vec<f64> = model.omega_b.iter().copied().collect();
    v.extend(model.omega_w.iter());
    v.extend(model.thetas.iter());
    v
}

fn unpack(v: &[f64], p: usize, d: usize, m: usize) -> LinearMtMs {
    LinearMtMs {
        omega_b: DVector::from_column_slice(&v[..p]),
        omega_w: DMatrix::from_column_slice(p, d, &v[p..p + p * d]),
        thetas: DMatrix::from_column_slice(m, d, &v[p + p * d..]),
    }
}

fn mase_grad(model: &LinearMtMs, set: &SeriesSet) -> Vec<f64> {
    let p = model.omega_b.len();
    let d = model.d_theta();
    let m_total = set.len();
    let mut g_b = DVector::zeros(p);
    let mut g_w = DMatrix::zeros(p, d);
    let mut g_t = DMatrix::zeros(m_total, d);
    for (m, s) in set.series.iter().enumerate() {
        let theta = model.thetas.row(m).transpose();
        let r = &s.y - &s.x * model.beta_for(&theta);
        let sign = r.map(|v| if v > 0.0 { -1.0 } else if v < 0.0 { 1.0 } else { 0.0 });
        let g_beta = s.x.transpose() * sign / (s.n_rows() as f64 * m_total as f64);
        g_b += &g_beta;
        g_w += &g_beta * theta.transpose();
        g_t.set_row(m, &(model.omega_w.transpose() * &g_beta).transpose());
    }
    let mut v: Vec<f64> = g_b.iter().copied().collect();
    v.extend(g_w.iter());
    v.extend(g_t.iter());
    v
}

/// Full-batch Adam on the in-sample MASE starting from `model`. Keeps the
/// best iterate seen, so the result never scores worse than the start.
pub fn finetune_mase(model: &LinearMtMs, set: &SeriesSet, config: &FineTuneConfig) -> Result<LinearMtMs> {
    let (p, d, m) = (model.omega_b.len(), model.d_theta(), set.len());
    let mut params = pack(model);
    let mut opt = Adam::new(config.lr, params.len());
    let mut best = EarlyStop::new(usize::MAX, in_sample_mase(model, set), &params);
    for step in 1..=config.steps {
        let current = unpack(&params, p, d, m);
        let g = mase_grad(&current, set);
        opt.step(&mut params, &g)?;
        let loss = in_sample_mase(&unpack(&params, p, d, m), set);
        best.observe(step, loss, &params);
    }
    log::debug!("mase fine-tune: best {:.5} at step {}", best.best_loss, best.best_epoch);
    Ok(unpack(&best.best_params, p, d, m))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linear::series::LaggedSeries;
    use crate::losses::Frequency;

    fn toy() -> (LinearMtMs, SeriesSet) {
        let mk = |vals: &[f64]| LaggedSeries::embed(vals, 1, 1.0).unwrap();
        let set = SeriesSet::new(
            Frequency::Yearly,
            vec![mk(&[1.0, 2.0, 1.5, 3.0, 2.0]), mk(&[4.0, 1.0, 3.0, 2.5, 0.5])],
        )
        .unwrap();
        let model = LinearMtMs {
            omega_b: DVector::from_vec(vec![0.3, 0.2]),
            omega_w: DMatrix::from_column_slice(2, 1, &[0.5, -0.4]),
            thetas: DMatrix::from_column_slice(2, 1, &[0.7, -0.2]),
        };
        (model, set)
    }

    #[test]
    fn gradient_matches_central_differences() {
        let (model, set) = toy();
        let g = mase_grad(&model, &set);
        let x = pack(&model);
        for i in 0..x.len() {
            let h = 1e-6;
            let mut up = x.clone();
            up[i] += h;
            let mut dn = x.clone();
            dn[i] -= h;
            let fd = (in_sample_mase(&unpack(&up, 2, 1, 2), &set) - in_sample_mase(&unpack(&dn, 2, 1, 2), &set)) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-6, "coordinate {i}: {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn never_worse_than_start() {
        let (model, set) = toy();
        let start = in_sample_mase(&model, &set);
        let tuned = finetune_mase(&model, &set, &FineTuneConfig::default()).unwrap();
        assert!(in_sample_mase(&tuned, &set) < start);
    }
}
