use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Array2;
use crate::error::{Error, Result};
use crate::losses::{QuintileOutcome, N_QUINTILES};
use crate::mtms::{PredictionOverride, Task, TaskBundle};

use super::features::{feature_names, AssetHistory, FeaturePipeline};
use super::labels::{quintile_labels, IntervalGrid, INTERVAL_WEEKS};
use super::market::Market;

/// One asset over one four-week interval.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureRow {
    pub asset_id: usize,
    pub universe_id: usize,
    pub shift: usize,
    pub interval_start: usize,
    pub label: QuintileOutcome,
    /// Return over the interval the label was computed from.
    pub realized: f64,
    pub features: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureTable {
    pub names: Vec<String>,
    pub rows: Vec<FeatureRow>,
}

/// Labels are computed inside each universe for every interval of every
/// grid. Rows come out ordered by grid, interval, universe, then asset.
pub fn build_features(market: &Market, grids: &[IntervalGrid]) -> Result<FeatureTable> {
    let histories: Vec<AssetHistory> = market
        .prices
        .iter()
        .zip(&market.is_etf)
        .map(|(p, &e)| AssetHistory::new(p, e))
        .collect();
    let n_weeks = market.n_weeks();
    let mut jobs = Vec::new();
    for g in grids {
        for &s in &g.starts {
            if s + INTERVAL_WEEKS > n_weeks {
                return Err(Error::Precondition(format!("interval at week {s} runs past week {n_weeks}")));
            }
            jobs.push((g.shift, s));
        }
    }
    let chunks: Vec<Result<Vec<FeatureRow>>> = jobs
        .par_iter()
        .map(|&(shift, s)| {
            let mut rows = Vec::with_capacity(market.n_assets());
            for (u, members) in market.universes.iter().enumerate() {
                let returns: Vec<f64> = members
                    .iter()
                    .map(|&a| (market.prices[a][s + INTERVAL_WEEKS] / market.prices[a][s]).ln())
                    .collect();
                let labels = quintile_labels(&returns)?;
                for ((&a, label), realized) in members.iter().zip(labels).zip(returns) {
                    rows.push(FeatureRow {
                        asset_id: a,
                        universe_id: u,
                        shift,
                        interval_start: s,
                        label,
                        realized,
                        features: histories[a].features_at(s)?,
                    });
                }
            }
            Ok(rows)
        })
        .collect();
    let mut rows = Vec::new();
    for c in chunks {
        rows.extend(c?);
    }
    Ok(FeatureTable {
        names: feature_names(),
        rows,
    })
}

/// Week boundaries separating training, validation and test intervals.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitWeeks {
    pub val_start: usize,
    pub test_start: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Part {
    Train,
    Val,
    Test,
    Unused,
}

impl SplitWeeks {
    /// Intervals must lie entirely inside one part. Test rows are the
    /// unshifted intervals of the primary universe.
    pub fn part(&self, row: &FeatureRow) -> Part {
        let (s, e) = (row.interval_start, row.interval_start + INTERVAL_WEEKS);
        if e <= self.val_start {
            Part::Train
        } else if s >= self.val_start && e <= self.test_start {
            Part::Val
        } else if s >= self.test_start && row.shift == 0 && row.universe_id == 0 {
            Part::Test
        } else {
            Part::Unused
        }
    }
}

pub struct PreparedData {
    pub pipeline: FeaturePipeline,
    /// One task per asset, features imputed and standardized.
    pub bundle: TaskBundle,
    /// Test rows with imputed but unscaled features.
    pub test: Vec<FeatureRow>,
    pub overrides: Vec<PredictionOverride>,
}

/// Fits the imputation and scaling on training rows, then builds one task
/// per asset whose first `k` rows are training rows and the rest validation.
pub fn prepare(table: &FeatureTable, n_assets: usize, split: SplitWeeks) -> Result<PreparedData> {
    let parts: Vec<Part> = table.rows.iter().map(|r| split.part(r)).collect();
    let train_refs: Vec<&[f64]> = table
        .rows
        .iter()
        .zip(&parts)
        .filter(|(_, p)| **p == Part::Train)
        .map(|(r, _)| r.features.as_slice())
        .collect();
    let pipeline = FeaturePipeline::fit(&train_refs)?;
    let d = table.names.len();

    let mut per_asset: Vec<(Vec<&FeatureRow>, Vec<&FeatureRow>)> = vec![(Vec::new(), Vec::new()); n_assets];
    let mut test = Vec::new();
    for (r, p) in table.rows.iter().zip(&parts) {
        match p {
            Part::Train => per_asset[r.asset_id].0.push(r),
            Part::Val => per_asset[r.asset_id].1.push(r),
            Part::Test => {
                let mut row = r.clone();
                pipeline.impute(&mut row.features);
                test.push(row);
            }
            Part::Unused => {}
        }
    }
    let mut tasks = Vec::with_capacity(n_assets);
    let mut overrides = Vec::new();
    for (asset, (tr, va)) in per_asset.iter().enumerate() {
        if tr.is_empty() {
            return Err(Error::Degenerate(format!("asset {asset} has no training rows")));
        }
        let mut x = Vec::with_capacity((tr.len() + va.len()) * d);
        let mut y = Vec::with_capacity((tr.len() + va.len()) * N_QUINTILES);
        for r in tr.iter().chain(va) {
            let mut f = r.features.clone();
            pipeline.impute(&mut f);
            x.extend(f);
            y.extend(r.label.one_hot());
        }
        let n = tr.len() + va.len();
        let xn = pipeline.norm.apply(&Array2::new(n, d, x)?)?;
        tasks.push(Task::new(xn, Array2::new(n, N_QUINTILES, y)?, tr.len())?);

        let first = tr[0].realized;
        if tr.iter().all(|r| r.realized == first) {
            let mut freq = vec![0.0; N_QUINTILES];
            for r in tr {
                freq[r.label.quintile] += 1.0 / tr.len() as f64;
            }
            log::warn!("asset {asset} has constant training returns; using observed quintile frequencies");
            overrides.push(PredictionOverride { task: asset, probs: freq });
        }
    }
    Ok(PreparedData {
        pipeline,
        bundle: TaskBundle::new(tasks)?,
        test,
        overrides,
    })
}
