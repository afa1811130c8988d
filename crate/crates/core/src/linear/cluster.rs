use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

use super::als::solve_spd;
use super::series::SeriesSet;

pub const N_ACF_LAGS: usize = 10;
pub const N_RESTARTS: usize = 20;
const MAX_LLOYD_ITERS: usize = 300;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    /// `k` centroids in z-scored feature space.
    pub centroids: Vec<Vec<f64>>,
    pub assignment: Vec<usize>,
    /// Pooled OLS coefficients for each cluster.
    pub betas: Vec<Vec<f64>>,
    pub inertia: f64,
}

impl ClusterModel {
    pub fn k(&self) -> usize {
        self.centroids.len()
    }

    pub fn beta_for_series(&self, m: usize) -> DVector<f64> {
        DVector::from_vec(self.betas[self.assignment[m]].clone())
    }

    pub fn objective(&self, set: &SeriesSet) -> f64 {
        let betas: Vec<DVector<f64>> = (0..set.len()).map(|m| self.beta_for_series(m)).collect();
        set.sse(&betas)
    }
}

/// Sample autocorrelation at lags `1..=n_lags`; lags beyond the series
/// length, or a constant series, give 0.
pub fn acf(values: &[f64], n_lags: usize) -> Vec<f64> {
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n.max(1) as f64;
    let denom: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    (1..=n_lags)
        .map(|lag| {
            if lag >= n || denom <= 0.0 {
                return 0.0;
            }
            let num: f64 = (lag..n).map(|t| (values[t] - mean) * (values[t - lag] - mean)).sum();
            num / denom
        })
        .collect()
}

/// R² of a least-squares fit of `values` on the columns of `design`.
fn r_squared(values: &[f64], design: &DMatrix<f64>) -> f64 {
    let y = DVector::from_column_slice(values);
    let mean = y.mean();
    let tss: f64 = y.iter().map(|v| (v - mean) * (v - mean)).sum();
    if tss <= 0.0 {
        return 0.0;
    }
    let mut flag = false;
    let b = solve_spd(design.transpose() * design, &(design.transpose() * &y), 1e-8, &mut flag);
    let rss = (&y - design * b).norm_squared();
    (1.0 - rss / tss).clamp(0.0, 1.0)
}

pub fn trend_strength(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 3 {
        return 0.0;
    }
    let design = DMatrix::from_fn(n, 2, |r, c| if c == 0 { 1.0 } else { r as f64 });
    r_squared(values, &design)
}

/// R² of a regression on one dummy per season position.
pub fn seasonal_strength(values: &[f64], season: usize) -> f64 {
    let n = values.len();
    if season < 2 || n <= season {
        return 0.0;
    }
    let design = DMatrix::from_fn(n, season, |r, c| if r % season == c { 1.0 } else { 0.0 });
    r_squared(values, &design)
}

/// Autocorrelations, trend strength and seasonal strength for every
/// series, z-scored per column across the set.
pub fn series_features(set: &SeriesSet) -> Vec<Vec<f64>> {
    let season = set.frequency.season();
    let raw: Vec<Vec<f64>> = set
        .series
        .iter()
        .map(|s| {
            let h: Vec<f64> = if s.history.is_empty() {
                s.y.iter().copied().collect()
            } else {
                s.history.clone()
            };
            let mut f = acf(&h, N_ACF_LAGS);
            f.push(trend_strength(&h));
            f.push(seasonal_strength(&h, season));
            f
        })
        .collect();
    zscore_columns(raw)
}

fn zscore_columns(mut rows: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
    let n = rows.len() as f64;
    let width = rows.first().map_or(0, Vec::len);
    for c in 0..width {
        let mean = rows.iter().map(|r| r[c]).sum::<f64>() / n;
        let var = rows.iter().map(|r| (r[c] - mean) * (r[c] - mean)).sum::<f64>() / n;
        let sd = var.sqrt();
        for r in rows.iter_mut() {
            r[c] = if sd > 1e-12 { (r[c] - mean) / sd } else { 0.0 };
        }
    }
    rows
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = dist2(point, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// One Lloyd run from `k` distinct data points. Returns centroids,
/// assignment and inertia.
fn lloyd(points: &[Vec<f64>], k: usize, rng: &mut Rng) -> (Vec<Vec<f64>>, Vec<usize>, f64) {
    let n = points.len();
    let width = points[0].len();
    let mut centroids: Vec<Vec<f64>> = sample(rng, n, k).into_iter().map(|i| points[i].clone()).collect();
    let mut assignment = vec![usize::MAX; n];
    for _ in 0..MAX_LLOYD_ITERS {
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let (j, _) = nearest(p, &centroids);
            if assignment[i] != j {
                assignment[i] = j;
                changed = true;
            }
        }
        let mut sums = vec![vec![0.0; width]; k];
        let mut counts = vec![0usize; k];
        for (p, &j) in points.iter().zip(&assignment) {
            counts[j] += 1;
            for (s, v) in sums[j].iter_mut().zip(p) {
                *s += v;
            }
        }
        for j in 0..k {
            if counts[j] == 0 {
                // Move the empty centroid onto the point worst served now.
                let far = (0..n)
                    .max_by(|&a, &b| {
                        dist2(&points[a], &centroids[assignment[a]])
                            .total_cmp(&dist2(&points[b], &centroids[assignment[b]]))
                    })
                    .expect("non-empty");
                log::debug!("empty cluster {j} reseeded at point {far}");
                centroids[j] = points[far].clone();
                assignment[far] = j;
                changed = true;
            } else {
                centroids[j] = sums[j].iter().map(|s| s / counts[j] as f64).collect();
            }
        }
        if !changed {
            break;
        }
    }
    let inertia = points.iter().zip(&assignment).map(|(p, &j)| dist2(p, &centroids[j])).sum();
    (centroids, assignment, inertia)
}

/// k-means over series features (best of 20 Lloyd runs by inertia),
/// then pooled OLS inside each cluster.
pub fn cluster_fit(set: &SeriesSet, k: usize, ridge: f64, rng: &mut Rng) -> Result<ClusterModel> {
    let m = set.len();
    if k == 0 || k > m {
        return Err(Error::Parameter(format!("{k} clusters for {m} series")));
    }
    let points = series_features(set);
    let mut best: Option<(Vec<Vec<f64>>, Vec<usize>, f64)> = None;
    for _ in 0..N_RESTARTS {
        let run = lloyd(&points, k, rng);
        if best.as_ref().is_none_or(|b| run.2 < b.2) {
            best = Some(run);
        }
    }
    let (centroids, assignment, inertia) = best.expect("at least one restart");
    let p = set.n_coef;
    let mut ridge_used = false;
    let betas = (0..k)
        .map(|j| {
            let mut a = DMatrix::zeros(p, p);
            let mut b = DVector::zeros(p);
            for (s, _) in set.series.iter().zip(&assignment).filter(|(_, &c)| c == j) {
                a += s.x.transpose() * &s.x;
                b += s.x.transpose() * &s.y;
            }
            solve_spd(a, &b, ridge, &mut ridge_used).iter().copied().collect()
        })
        .collect();
    Ok(ClusterModel {
        centroids,
        assignment,
        betas,
        inertia,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::Frequency;
    use crate::rng::substream;

    #[test]
    fn acf_of_alternating_series() {
        let v: Vec<f64> = (0..20).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let a = acf(&v, 3);
        // lag j keeps 20 - j of 20 equal-magnitude products
        assert!((a[0] + 19.0 / 20.0).abs() < 1e-12);
        assert!((a[1] - 18.0 / 20.0).abs() < 1e-12);
        assert_eq!(acf(&[2.0; 5], 2), vec![0.0, 0.0]);
    }

    #[test]
    fn strengths_of_pure_components() {
        let line: Vec<f64> = (0..30).map(|t| 2.0 + 0.5 * t as f64).collect();
        assert!((trend_strength(&line) - 1.0).abs() < 1e-9);
        let seas: Vec<f64> = (0..36).map(|t| [1.0, 3.0, -2.0, 0.0][t % 4]).collect();
        assert!((seasonal_strength(&seas, 4) - 1.0).abs() < 1e-9);
        assert_eq!(seasonal_strength(&seas, 1), 0.0);
    }

    #[test]
    fn lloyd_separates_two_blobs() {
        let mut pts = Vec::new();
        for i in 0..10 {
            pts.push(vec![i as f64 * 0.01, 0.0]);
            pts.push(vec![10.0 + i as f64 * 0.01, 0.0]);
        }
        let (_, a, _) = lloyd(&pts, 2, &mut substream(0, "k"));
        for i in 0..10 {
            assert_eq!(a[2 * i], a[0]);
            assert_eq!(a[2 * i + 1], a[1]);
        }
        assert_ne!(a[0], a[1]);
    }

    #[test]
    fn empty_cluster_is_reseeded() {
        // Three identical points and one outlier: any init that puts two
        // centroids on the duplicate leaves one empty.
        let pts = vec![vec![0.0], vec![0.0], vec![0.0], vec![5.0]];
        for s in 0..20 {
            let (c, a, _) = lloyd(&pts, 2, &mut substream(s, "k"));
            assert_eq!(c.len(), 2);
            assert_ne!(a[3], a[0]);
        }
    }

    #[test]
    fn rejects_too_many_clusters() {
        let s = super::super::series::LaggedSeries::embed(&[1.0, 2.0, 4.0, 3.0], 1, 1.0).unwrap();
        let set = SeriesSet::new(Frequency::Yearly, vec![s]).unwrap();
        assert!(cluster_fit(&set, 2, 1e-8, &mut substream(0, "k")).is_err());
    }
}
