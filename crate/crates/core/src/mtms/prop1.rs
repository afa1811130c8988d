//! Brute-force comparison of the nested (bilevel) and joint (single-level)
//! training problems on finite parameter sets.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

/// `loss[w][t][m]`: in-sample loss of task `m` under meta value `w` and
/// mesa value `t`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossTable {
    pub loss: Vec<Vec<Vec<f64>>>,
}

impl LossTable {
    pub fn new(loss: Vec<Vec<Vec<f64>>>) -> Result<Self> {
        let n_theta = loss.first().map_or(0, Vec::len);
        let n_tasks = loss.first().and_then(|w| w.first()).map_or(0, Vec::len);
        if loss.is_empty() || n_theta == 0 || n_tasks == 0 {
            return Err(Error::Parameter("loss table needs at least one of each axis".into()));
        }
        for w in &loss {
            if w.len() != n_theta || w.iter().any(|t| t.len() != n_tasks) {
                return Err(Error::Parameter("ragged loss table".into()));
            }
            if w.iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    node: "loss table".into(),
                });
            }
        }
        Ok(Self { loss })
    }

    pub fn n_omega(&self) -> usize {
        self.loss.len()
    }

    pub fn n_theta(&self) -> usize {
        self.loss[0].len()
    }

    pub fn n_tasks(&self) -> usize {
        self.loss[0][0].len()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prop1Outcome {
    pub bilevel: Vec<usize>,
    pub single_level: Vec<usize>,
    pub equal: bool,
    /// `(w, m)` pairs whose inner minimizer over mesa values is not unique.
    pub inner_ties: Vec<(usize, usize)>,
}

impl Prop1Outcome {
    pub fn unique_inner_minima(&self) -> bool {
        self.inner_ties.is_empty()
    }
}

fn argmin_set(values: &[f64]) -> Vec<usize> {
    let best = values.iter().copied().fold(f64::INFINITY, f64::min);
    (0..values.len()).filter(|&i| values[i] == best).collect()
}

/// Solves both problems by enumeration. The joint problem visits all
/// `|Θ|^M` mesa assignments for every meta value; keep tables small.
pub fn prop1_oracle(table: &LossTable) -> Result<Prop1Outcome> {
    let (nw, nt, nm) = (table.n_omega(), table.n_theta(), table.n_tasks());
    let combos = (nt as f64).powi(nm as i32);
    if combos > 1e7 {
        return Err(Error::Parameter(format!(
            "{combos} mesa assignments per meta value is too many to enumerate"
        )));
    }
    let mut inner_ties = Vec::new();
    let mut outer = Vec::with_capacity(nw);
    for (w, lw) in table.loss.iter().enumerate() {
        let mut total = 0.0;
        for m in 0..nm {
            let col: Vec<f64> = (0..nt).map(|t| lw[t][m]).collect();
            let am = argmin_set(&col);
            if am.len() > 1 {
                inner_ties.push((w, m));
            }
            total += col[am[0]];
        }
        outer.push(total / nm as f64);
    }
    let bilevel = argmin_set(&outer);

    let mut joint = Vec::with_capacity(nw);
    let mut assign = vec![0usize; nm];
    for lw in &table.loss {
        let mut best = f64::INFINITY;
        assign.iter_mut().for_each(|a| *a = 0);
        loop {
            let mut total = 0.0;
            for (m, &t) in assign.iter().enumerate() {
                total += lw[t][m];
            }
            best = best.min(total / nm as f64);
            let mut i = 0;
            while i < nm {
                assign[i] += 1;
                if assign[i] < nt {
                    break;
                }
                assign[i] = 0;
                i += 1;
            }
            if i == nm {
                break;
            }
        }
        joint.push(best);
    }
    let single_level = argmin_set(&joint);
    Ok(Prop1Outcome {
        equal: bilevel == single_level,
        bilevel,
        single_level,
        inner_ties,
    })
}

/// Random table with continuous losses, so inner minima are unique with
/// probability one; redrawn until they are.
pub fn random_table(n_omega: usize, n_theta: usize, n_tasks: usize, rng: &mut Rng) -> LossTable {
    loop {
        let loss: Vec<Vec<Vec<f64>>> = (0..n_omega)
            .map(|_| {
                (0..n_theta)
                    .map(|_| (0..n_tasks).map(|_| rng.random::<f64>() * 10.0).collect())
                    .collect()
            })
            .collect();
        let table = LossTable { loss };
        let unique = (0..n_omega).all(|w| {
            (0..n_tasks).all(|m| {
                let col: Vec<f64> = (0..n_theta).map(|t| table.loss[w][t][m]).collect();
                argmin_set(&col).len() == 1
            })
        });
        if unique {
            return table;
        }
    }
}
