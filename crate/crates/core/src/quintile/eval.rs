use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Array2;
use crate::error::{Error, Result};
use crate::losses::{rps, QuintileOutcome, N_QUINTILES};
use crate::mtms::MtMsModel;

use super::dataset::{FeatureRow, FeatureTable};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScatterPoint {
    pub asset_id: usize,
    pub interval_start: usize,
    pub probs: [f64; N_QUINTILES],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RpsEvaluation {
    pub aggregate: f64,
    /// `(interval_start, mean RPS over assets)` in time order.
    pub per_interval: Vec<(usize, f64)>,
    /// Mean RPS of each asset over the test intervals, by asset id.
    pub per_asset: Vec<(usize, f64)>,
    pub scatter: Vec<ScatterPoint>,
}

impl RpsEvaluation {
    /// Pearson correlation between `P(q_a)` and `P(q_b)` across the scatter.
    pub fn correlation(&self, a: usize, b: usize) -> f64 {
        let n = self.scatter.len() as f64;
        let xs: Vec<f64> = self.scatter.iter().map(|p| p.probs[a]).collect();
        let ys: Vec<f64> = self.scatter.iter().map(|p| p.probs[b]).collect();
        let mx = xs.iter().sum::<f64>() / n;
        let my = ys.iter().sum::<f64>() / n;
        let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
        let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
        let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
        if sxx <= 0.0 || syy <= 0.0 {
            return 0.0;
        }
        sxy / (sxx * syy).sqrt()
    }
}

/// Scores one probability row per test row.
pub fn evaluate_predictions(rows: &[FeatureRow], probs: &[[f64; N_QUINTILES]]) -> Result<RpsEvaluation> {
    if rows.len() != probs.len() || rows.is_empty() {
        return Err(Error::Parameter(format!(
            "{} predictions for {} rows",
            probs.len(),
            rows.len()
        )));
    }
    let mut by_interval: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    let mut by_asset: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    let mut total = 0.0;
    let mut scatter = Vec::with_capacity(rows.len());
    for (r, p) in rows.iter().zip(probs) {
        let v = rps(p, r.label)?;
        total += v;
        let e = by_interval.entry(r.interval_start).or_default();
        e.0 += v;
        e.1 += 1;
        let e = by_asset.entry(r.asset_id).or_default();
        e.0 += v;
        e.1 += 1;
        scatter.push(ScatterPoint {
            asset_id: r.asset_id,
            interval_start: r.interval_start,
            probs: *p,
        });
    }
    Ok(RpsEvaluation {
        aggregate: total / rows.len() as f64,
        per_interval: by_interval.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect(),
        per_asset: by_asset.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect(),
        scatter,
    })
}

/// Model probabilities for rows of unscaled features; the asset id selects
/// the mesa row.
pub fn predict_rows(model: &MtMsModel, rows: &[FeatureRow]) -> Result<Vec<[f64; N_QUINTILES]>> {
    if model.base_spec.output_size() != N_QUINTILES {
        return Err(Error::Parameter(format!(
            "model emits {} values, expected {N_QUINTILES}",
            model.base_spec.output_size()
        )));
    }
    let mut by_asset: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, r) in rows.iter().enumerate() {
        by_asset.entry(r.asset_id).or_default().push(i);
    }
    let mut out = vec![[0.0; N_QUINTILES]; rows.len()];
    for (asset, idx) in by_asset {
        let x = Array2::from_rows(&idx.iter().map(|&i| rows[i].features.clone()).collect::<Vec<_>>())?;
        let p = model.predict(asset, &x)?;
        for (j, &i) in idx.iter().enumerate() {
            out[i].copy_from_slice(p.row(j));
        }
    }
    Ok(out)
}

pub fn evaluate_rps(model: &MtMsModel, rows: &[FeatureRow]) -> Result<RpsEvaluation> {
    evaluate_predictions(rows, &predict_rows(model, rows)?)
}

const ID_COLUMNS: [&str; 4] = ["asset_id", "universe_id", "shift", "interval_start"];
const LABEL_COLUMNS: [&str; N_QUINTILES] = ["q1", "q2", "q3", "q4", "q5"];

pub fn write_feature_csv(path: &Path, names: &[String], rows: &[FeatureRow]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    let mut header: Vec<String> = ID_COLUMNS.iter().chain(&LABEL_COLUMNS).map(|s| s.to_string()).collect();
    header.extend(names.iter().cloned());
    writeln!(f, "{}", header.join(","))?;
    for r in rows {
        let mut cells = vec![
            r.asset_id.to_string(),
            r.universe_id.to_string(),
            r.shift.to_string(),
            r.interval_start.to_string(),
        ];
        cells.extend(r.label.one_hot().iter().map(|v| v.to_string()));
        cells.extend(r.features.iter().map(|v| v.to_string()));
        writeln!(f, "{}", cells.join(","))?;
    }
    f.flush()?;
    Ok(())
}

/// Reads a table written by [`write_feature_csv`]. The feature columns
/// must match `expected` in name and order.
pub fn read_feature_csv(path: &Path, expected: &[String]) -> Result<FeatureTable> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header: Vec<&str> = lines
        .next()
        .ok_or_else(|| Error::Schema("empty feature file".into()))?
        .split(',')
        .map(str::trim)
        .collect();
    let want: Vec<&str> = ID_COLUMNS
        .iter()
        .chain(&LABEL_COLUMNS)
        .copied()
        .chain(expected.iter().map(String::as_str))
        .collect();
    for (i, w) in want.iter().enumerate() {
        match header.get(i) {
            Some(h) if h == w => {}
            Some(h) => return Err(Error::Schema(format!("column {}: expected `{w}`, found `{h}`", i + 1))),
            None => return Err(Error::Schema(format!("missing column `{w}`"))),
        }
    }
    if header.len() > want.len() {
        return Err(Error::Schema(format!("unexpected column `{}`", header[want.len()])));
    }
    let mut rows = Vec::new();
    for (ln, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        if cells.len() != want.len() {
            return Err(Error::Schema(format!(
                "line {}: {} cells, header has {}",
                ln + 2,
                cells.len(),
                want.len()
            )));
        }
        let num = |i: usize| -> Result<f64> {
            cells[i]
                .parse::<f64>()
                .map_err(|_| Error::Schema(format!("line {}, column `{}`: `{}`", ln + 2, want[i], cells[i])))
        };
        let int = |i: usize| -> Result<usize> {
            cells[i]
                .parse::<usize>()
                .map_err(|_| Error::Schema(format!("line {}, column `{}`: `{}`", ln + 2, want[i], cells[i])))
        };
        let onehot: Vec<f64> = (4..4 + N_QUINTILES).map(num).collect::<Result<_>>()?;
        let q = onehot
            .iter()
            .position(|v| *v == 1.0)
            .ok_or_else(|| Error::Schema(format!("line {}: no quintile marked", ln + 2)))?;
        rows.push(FeatureRow {
            asset_id: int(0)?,
            universe_id: int(1)?,
            shift: int(2)?,
            interval_start: int(3)?,
            label: QuintileOutcome::new(q)?,
            realized: f64::NAN,
            features: (4 + N_QUINTILES..want.len()).map(num).collect::<Result<_>>()?,
        });
    }
    Ok(FeatureTable {
        names: expected.to_vec(),
        rows,
    })
}

/// `asset_id,Rank1..Rank5`, one line per row.
pub fn write_submission(path: &Path, rows: &[FeatureRow], probs: &[[f64; N_QUINTILES]]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "asset_id,Rank1,Rank2,Rank3,Rank4,Rank5")?;
    for (r, p) in rows.iter().zip(probs) {
        let cells: Vec<String> = p.iter().map(|v| v.to_string()).collect();
        writeln!(f, "{},{}", r.asset_id, cells.join(","))?;
    }
    f.flush()?;
    Ok(())
}
