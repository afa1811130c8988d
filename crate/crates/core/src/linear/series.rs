use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::losses::{Frequency, MaseScale};

/// One lag-embedded series. Row `t` of `x` is `[1, y_{t-1}, ..., y_{t-d_x}]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LaggedSeries {
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    /// Divides the raw values; 1 when the design was given directly.
    pub scale: f64,
    /// Scaled training values, oldest first.
    pub history: Vec<f64>,
}

impl LaggedSeries {
    /// Embeds an already-scaled series with `d_x` lags.
    pub fn embed(values: &[f64], d_x: usize, scale: f64) -> Result<Self> {
        if values.len() <= d_x {
            return Err(Error::Degenerate(format!(
                "{} values cannot fill {d_x} lags",
                values.len()
            )));
        }
        let n = values.len() - d_x;
        let x = DMatrix::from_fn(n, d_x + 1, |r, c| {
            if c == 0 {
                1.0
            } else {
                values[d_x + r - c]
            }
        });
        let y = DVector::from_iterator(n, values[d_x..].iter().copied());
        Ok(Self {
            x,
            y,
            scale,
            history: values.to_vec(),
        })
    }

    pub fn from_design(x: DMatrix<f64>, y: DVector<f64>) -> Result<Self> {
        if x.nrows() != y.len() {
            return Err(crate::error::shape_err(
                "series design",
                format!("{} rows, {} targets", x.nrows(), y.len()),
            ));
        }
        Ok(Self {
            x,
            y,
            scale: 1.0,
            history: Vec::new(),
        })
    }

    pub fn n_rows(&self) -> usize {
        self.y.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeriesSet {
    pub frequency: Frequency,
    /// Regressors per row, intercept included.
    pub n_coef: usize,
    pub series: Vec<LaggedSeries>,
}

impl SeriesSet {
    pub fn new(frequency: Frequency, series: Vec<LaggedSeries>) -> Result<Self> {
        let n_coef = series
            .first()
            .map(|s| s.x.ncols())
            .ok_or_else(|| Error::Parameter("empty series set".into()))?;
        if series.iter().any(|s| s.x.ncols() != n_coef) {
            return Err(Error::Parameter("series use different lag counts".into()));
        }
        Ok(Self {
            frequency,
            n_coef,
            series,
        })
    }

    /// Scales each training segment by its MASE scale and embeds it.
    /// Returns the set and the indices of series that were skipped
    /// because they are too short or constant at the seasonal lag.
    pub fn from_training(train: &[Vec<f64>], frequency: Frequency, d_x: usize) -> Result<(Self, Vec<usize>)> {
        let mut kept = Vec::new();
        let mut skipped = Vec::new();
        for (i, values) in train.iter().enumerate() {
            let scale = match MaseScale::from_training(values, frequency.season()) {
                Ok(s) if values.len() > d_x => s,
                _ => {
                    log::warn!("series {i}: {} training values, skipped", values.len());
                    skipped.push(i);
                    continue;
                }
            };
            let scaled: Vec<f64> = values.iter().map(|v| v / scale.scale).collect();
            kept.push(LaggedSeries::embed(&scaled, d_x, scale.scale)?);
        }
        if kept.is_empty() {
            return Err(Error::Degenerate("every series was too short".into()));
        }
        Ok((Self::new(frequency, kept)?, skipped))
    }

    pub fn len(&self) -> usize {
        self.series.len()
    }

    pub fn is_empty(&self) -> bool {
        self.series.is_empty()
    }

    /// Sum of squared residuals for per-series coefficient vectors.
    pub fn sse(&self, betas: &[DVector<f64>]) -> f64 {
        self.series
            .iter()
            .zip(betas)
            .map(|(s, b)| (&s.y - &s.x * b).norm_squared())
            .sum()
    }
}

/// One series per line, comma-separated, lengths may differ. Blank lines
/// are ignored.
pub fn read_series_csv(path: &Path) -> Result<Vec<Vec<f64>>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row = line
            .split(',')
            .map(|v| {
                v.trim().parse::<f64>().map_err(|_| {
                    Error::Schema(format!("line {}: `{}` is not a number", ln + 1, v.trim()))
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        out.push(row);
    }
    Ok(out)
}

pub fn write_series_csv(path: &Path, series: &[Vec<f64>]) -> Result<()> {
    let mut text = String::new();
    for s in series {
        let row: Vec<String> = s.iter().map(|v| v.to_string()).collect();
        text.push_str(&row.join(","));
        text.push('\n');
    }
    std::fs::write(path, text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn embedding_layout() {
        let s = LaggedSeries::embed(&[1.0, 2.0, 3.0, 4.0, 5.0], 2, 1.0).unwrap();
        assert_eq!(s.n_rows(), 3);
        assert_eq!(s.x.row(0).iter().copied().collect::<Vec<_>>(), vec![1.0, 2.0, 1.0]);
        assert_eq!(s.x.row(2).iter().copied().collect::<Vec<_>>(), vec![1.0, 4.0, 3.0]);
        assert_eq!(s.y.as_slice(), &[3.0, 4.0, 5.0]);
        assert!(LaggedSeries::embed(&[1.0, 2.0], 2, 1.0).is_err());
    }

    #[test]
    fn short_and_flat_series_are_skipped() {
        let train = vec![
            vec![1.0, 3.0, 2.0, 5.0, 4.0, 6.0],
            vec![1.0, 2.0],
            vec![2.0; 8],
        ];
        let (set, skipped) = SeriesSet::from_training(&train, Frequency::Yearly, 2).unwrap();
        assert_eq!(skipped, vec![1, 2]);
        assert_eq!(set.len(), 1);
        // mean |diff| of the first series = (2+1+3+1+2)/5
        assert!((set.series[0].scale - 1.8).abs() < 1e-15);
        assert!((set.series[0].history[1] - 3.0 / 1.8).abs() < 1e-15);
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.csv");
        let data = vec![vec![1.5, 2.0, 3.25], vec![4.0]];
        write_series_csv(&p, &data).unwrap();
        assert_eq!(read_series_csv(&p).unwrap(), data);
        std::fs::write(&p, "1,2\n3,x\n").unwrap();
        let err = read_series_csv(&p).unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");
    }
}
