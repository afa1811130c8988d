use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{QuintileOutcome, N_QUINTILES};
use crate::rng::Rng;

use super::market::UNIVERSE_SIZE;

pub const INTERVAL_WEEKS: usize = 4;

/// Quintile of every asset in a 100-asset universe. Assets are sorted by
/// `(return, index)`, so ties go to the lower index first.
pub fn quintile_labels(returns: &[f64]) -> Result<Vec<QuintileOutcome>> {
    if returns.len() != UNIVERSE_SIZE {
        return Err(Error::Parameter(format!(
            "{} returns, a universe holds {UNIVERSE_SIZE}",
            returns.len()
        )));
    }
    if let Some(i) = returns.iter().position(|r| r.is_nan()) {
        return Err(Error::NonFinite {
            node: format!("return of asset {i}"),
        });
    }
    let mut order: Vec<usize> = (0..returns.len()).collect();
    order.sort_by(|&a, &b| returns[a].total_cmp(&returns[b]).then(a.cmp(&b)));
    let per = UNIVERSE_SIZE / N_QUINTILES;
    let mut out = vec![QuintileOutcome { quintile: 0 }; returns.len()];
    for (rank, &asset) in order.iter().enumerate() {
        out[asset] = QuintileOutcome { quintile: rank / per };
    }
    Ok(out)
}

/// Random partition of `extra` into universes of 100.
pub fn augment_universes(extra: &[usize], rng: &mut Rng) -> Result<Vec<Vec<usize>>> {
    if extra.is_empty() || extra.len() % UNIVERSE_SIZE != 0 {
        return Err(Error::Parameter(format!(
            "{} extra assets do not split into universes of {UNIVERSE_SIZE}",
            extra.len()
        )));
    }
    let mut shuffled = extra.to_vec();
    shuffled.shuffle(rng);
    Ok(shuffled
        .chunks(UNIVERSE_SIZE)
        .map(|c| {
            let mut u = c.to_vec();
            u.sort_unstable();
            u
        })
        .collect())
}

/// Four-week intervals `[start, start + 4)` in weeks.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntervalGrid {
    pub shift: usize,
    pub starts: Vec<usize>,
}

impl IntervalGrid {
    /// Intervals starting at `first_start + shift + 4j` that end by `n_weeks`.
    pub fn new(n_weeks: usize, first_start: usize, shift: usize) -> Self {
        let starts = (first_start + shift..)
            .step_by(INTERVAL_WEEKS)
            .take_while(|s| s + INTERVAL_WEEKS <= n_weeks)
            .collect();
        Self { shift, starts }
    }

    pub fn len(&self) -> usize {
        self.starts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.starts.is_empty()
    }
}

/// The unshifted grid and the grids shifted by one, two and three weeks.
pub fn augment_time_shift(n_weeks: usize, first_start: usize) -> Vec<IntervalGrid> {
    (0..INTERVAL_WEEKS)
        .map(|shift| IntervalGrid::new(n_weeks, first_start, shift))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    fn counts(labels: &[QuintileOutcome]) -> [usize; 5] {
        let mut c = [0; 5];
        for l in labels {
            c[l.quintile] += 1;
        }
        c
    }

    #[test]
    fn ascending_returns() {
        let r: Vec<f64> = (1..=100).map(f64::from).collect();
        let l = quintile_labels(&r).unwrap();
        assert_eq!(l[0].quintile, 0);
        assert_eq!(l[19].quintile, 0);
        assert_eq!(l[20].quintile, 1);
        assert_eq!(l[99].quintile, 4);
    }

    #[test]
    fn ties_break_by_index() {
        let l = quintile_labels(&[0.0; 100]).unwrap();
        assert_eq!(counts(&l), [20; 5]);
        assert_eq!(l[19].quintile, 0);
        assert_eq!(l[20].quintile, 1);
        // assets 18..22 share a return straddling the first boundary
        let mut r: Vec<f64> = (0..100).map(f64::from).collect();
        for v in &mut r[18..22] {
            *v = 18.5;
        }
        let l = quintile_labels(&r).unwrap();
        assert_eq!(l[19].quintile, 0);
        assert_eq!(l[20].quintile, 1);
        assert!(quintile_labels(&r[..99]).is_err());
        r[3] = f64::NAN;
        assert!(quintile_labels(&r).is_err());
    }

    #[test]
    fn universes_partition_extra_assets() {
        let extra: Vec<usize> = (100..1000).collect();
        let u = augment_universes(&extra, &mut substream(3, "u")).unwrap();
        assert_eq!(u.len(), 9);
        assert!(u.iter().all(|x| x.len() == 100));
        let mut all: Vec<usize> = u.concat();
        all.sort_unstable();
        assert_eq!(all, extra);
        assert_eq!(u, augment_universes(&extra, &mut substream(3, "u")).unwrap());
        assert!(augment_universes(&extra[..850], &mut substream(3, "u")).is_err());
    }

    #[test]
    fn forty_week_grids() {
        let g = augment_time_shift(40, 0);
        let lens: Vec<usize> = g.iter().map(IntervalGrid::len).collect();
        // starts 0..=36, then 1..=33, 2..=34, 3..=35
        assert_eq!(lens, vec![10, 9, 9, 9]);
        let mut pairs: Vec<usize> = g.iter().flat_map(|x| x.starts.clone()).collect();
        pairs.sort_unstable();
        pairs.dedup();
        assert_eq!(pairs.len(), 37);
    }
}
