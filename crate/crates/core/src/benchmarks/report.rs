use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Summary of one method on one benchmark.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub method: String,
    pub metric: String,
    pub mean: f64,
    /// `1.96 * SE` over tasks.
    pub ci_half_width: f64,
    pub per_task: Vec<f64>,
    pub seed: u64,
    pub config: serde_json::Value,
    /// Wall-clock seconds. Logged, never written to files.
    #[serde(skip)]
    pub runtime_secs: f64,
}

impl BenchmarkReport {
    pub fn new(
        method: impl Into<String>,
        metric: impl Into<String>,
        per_task: Vec<f64>,
        seed: u64,
        config: serde_json::Value,
    ) -> Result<Self> {
        if per_task.is_empty() {
            return Err(Error::Parameter("report over zero tasks".into()));
        }
        let (mean, ci_half_width) = mean_ci(&per_task);
        Ok(Self {
            method: method.into(),
            metric: metric.into(),
            mean,
            ci_half_width,
            per_task,
            seed,
            config,
            runtime_secs: 0.0,
        })
    }
}

/// Mean and `1.96 * s / sqrt(n)` with the sample standard deviation.
pub fn mean_ci(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, 1.96 * (var / n).sqrt())
}

#[derive(Serialize)]
struct SummaryRow<'a> {
    method: &'a str,
    metric: &'a str,
    mean: f64,
    ci_half_width: f64,
    n_tasks: usize,
    seed: u64,
}

/// Writes `<stem>.csv` (one row per method and task) and
/// `<stem>_summary.json`.
pub fn write_reports(dir: &Path, stem: &str, reports: &[BenchmarkReport]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join(format!("{stem}.csv")))?);
    writeln!(f, "method,task,{}", reports.first().map_or("loss", |r| r.metric.as_str()))?;
    for r in reports {
        for (i, v) in r.per_task.iter().enumerate() {
            writeln!(f, "{},{i},{v}", r.method)?;
        }
    }
    f.flush()?;
    let summary: Vec<SummaryRow> = reports
        .iter()
        .map(|r| SummaryRow {
            method: &r.method,
            metric: &r.metric,
            mean: r.mean,
            ci_half_width: r.ci_half_width,
            n_tasks: r.per_task.len(),
            seed: r.seed,
        })
        .collect();
    let doc = serde_json::json!({
        "reports": summary,
        "config": reports.first().map(|r| r.config.clone()),
    });
    std::fs::write(
        dir.join(format!("{stem}_summary.json")),
        serde_json::to_string_pretty(&doc)? + "\n",
    )?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ci_matches_hand_computation() {
        // mean 2, sample variance 1, n 3
        let (m, h) = mean_ci(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((h - 1.96 / 3f64.sqrt()).abs() < 1e-15);
        assert_eq!(mean_ci(&[4.0]), (4.0, 0.0));
    }

    #[test]
    fn files_are_written() {
        let dir = tempfile::tempdir().unwrap();
        let r = BenchmarkReport::new("a", "mse", vec![0.1, 0.3], 5, serde_json::json!({"k": 5})).unwrap();
        write_reports(dir.path(), "sin", &[r]).unwrap();
        let csv = std::fs::read_to_string(dir.path().join("sin.csv")).unwrap();
        assert_eq!(csv, "method,task,mse\na,0,0.1\na,1,0.3\n");
        let js = std::fs::read_to_string(dir.path().join("sin_summary.json")).unwrap();
        assert!(js.contains("\"n_tasks\": 2"));
        assert!(BenchmarkReport::new("a", "mse", vec![], 0, serde_json::Value::Null).is_err());
    }
}
