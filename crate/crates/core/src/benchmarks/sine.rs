use std::f64::consts::PI;
use std::time::Instant;

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Array2;
use crate::error::Result;
use crate::losses::LossKind;
use crate::mtms::{
    adapt_new_task, train_phase1, train_phase2, AdaptConfig, Connection, MtMsModel, NormStats,
    Phase1Config, Phase2Config, Task, TaskBundle,
};
use crate::nn::{Activation, InitScheme, MlpSpec, OutputTransform};
use crate::optimize::{OptimizerKind, TraceRow, TrainConfig};
use crate::rng::{substream, substream_indexed, Rng};

use super::report::BenchmarkReport;

/// One sine wave `y = amplitude * sin(x + phase)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SineTask {
    pub amplitude: f64,
    pub phase: f64,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    /// The first `k` points are observed; the rest are scored.
    pub k: usize,
}

impl SineTask {
    pub fn sample(k: usize, n_val: usize, rng: &mut Rng) -> Self {
        let amplitude = rng.random_range(0.1..5.0);
        let phase = rng.random_range(0.0..PI);
        let x: Vec<f64> = (0..k + n_val).map(|_| rng.random_range(-5.0..5.0)).collect();
        let y = x.iter().map(|v| amplitude * (v + phase).sin()).collect();
        Self {
            amplitude,
            phase,
            x,
            y,
            k,
        }
    }

    pub fn truth(&self, x: f64) -> f64 {
        self.amplitude * (x + self.phase).sin()
    }

    pub fn to_task(&self) -> Task {
        Task::new(
            Array2::column_vector(self.x.clone()),
            Array2::column_vector(self.y.clone()),
            self.k,
        )
        .expect("matching lengths")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SineConfig {
    pub k: usize,
    pub n_train_tasks: usize,
    pub n_eval_tasks: usize,
    pub n_val_points: usize,
    /// Held-out points per training task, used only for early stopping.
    pub n_train_val_points: usize,
    pub hidden: Vec<usize>,
    pub d_theta: usize,
    pub phase1: Phase1Config,
    pub phase2: Phase2Config,
    pub adapt: AdaptConfig,
}

impl Default for SineConfig {
    fn default() -> Self {
        Self {
            k: 5,
            n_train_tasks: 1000,
            n_eval_tasks: 600,
            n_val_points: 100,
            n_train_val_points: 20,
            hidden: vec![40, 40],
            d_theta: 2,
            phase1: Phase1Config {
                lr: 0.001,
                init: InitScheme::XavierUniform,
                train: TrainConfig {
                    batch_size: 200,
                    max_epochs: 50,
                    patience: 10,
                },
            },
            phase2: Phase2Config {
                optimizer: OptimizerKind::Adam,
                ladder: vec![0.001],
                train: TrainConfig {
                    batch_size: 100,
                    max_epochs: 2000,
                    patience: 100,
                },
                meta_init: InitScheme::Uniform(-1.0, 1.0),
                mesa_l2: 0.0,
            },
            adapt: AdaptConfig::default(),
        }
    }
}

pub struct SineRun {
    pub report: BenchmarkReport,
    pub model: MtMsModel,
    pub train_tasks: Vec<SineTask>,
    pub eval_tasks: Vec<SineTask>,
    pub eval_thetas: Vec<Vec<f64>>,
    pub trace: Vec<TraceRow>,
}

pub fn base_spec(hidden: &[usize]) -> Result<MlpSpec> {
    let mut sizes = vec![1];
    sizes.extend_from_slice(hidden);
    sizes.push(1);
    MlpSpec::new(sizes, Activation::Relu, OutputTransform::None, 0.0)
}

/// Meta-trains on `n_train_tasks` sine tasks observed at `k` points each,
/// then adapts a fresh mesa vector to every evaluation task from its `k`
/// points and scores MSE on its held-out points.
pub fn run_sinusoidal(config: &SineConfig, seed: u64) -> Result<SineRun> {
    let start = Instant::now();
    let mut task_rng = substream(seed, "tasks");
    let train_tasks: Vec<SineTask> = (0..config.n_train_tasks)
        .map(|_| SineTask::sample(config.k, config.n_train_val_points, &mut task_rng))
        .collect();
    let mut eval_rng = substream(seed, "eval");
    let eval_tasks: Vec<SineTask> = (0..config.n_eval_tasks)
        .map(|_| SineTask::sample(config.k, config.n_val_points, &mut eval_rng))
        .collect();
    let bundle = TaskBundle::new(train_tasks.iter().map(SineTask::to_task).collect())?;

    let base = base_spec(&config.hidden)?;
    let (beta, mut trace) = train_phase1(
        &bundle,
        &base,
        LossKind::Mse,
        &config.phase1,
        &mut substream(seed, "phase1"),
    )?;
    let meta = MlpSpec::new(
        vec![config.d_theta, base.n_params()],
        Activation::None,
        OutputTransform::None,
        0.0,
    )?;
    let init = MtMsModel::from_pooled(
        base,
        meta,
        Connection::All,
        &beta,
        bundle.len(),
        config.phase2.meta_init,
        NormStats::identity(1),
        &mut substream(seed, "init"),
    )?;
    let (model, trace2) = train_phase2(
        &bundle,
        &init,
        LossKind::Mse,
        &config.phase2,
        &mut substream(seed, "phase2"),
    )?;
    let offset = trace.len();
    trace.extend(trace2.into_iter().map(|mut r| {
        r.epoch += offset;
        r
    }));
    log::info!(
        "sine k={} meta-training done after {} epochs in {:.1}s",
        config.k,
        trace.len(),
        start.elapsed().as_secs_f64()
    );

    let results: Vec<Result<(Vec<f64>, f64)>> = eval_tasks
        .par_iter()
        .enumerate()
        .map(|(i, t)| {
            let task = t.to_task();
            debug_assert_eq!(task.train_x().rows(), config.k);
            let a = adapt_new_task(
                &model,
                &task,
                LossKind::Mse,
                &config.adapt,
                &mut substream_indexed(seed, "adapt", i as u64),
            )?;
            let pred = model.predict_theta(&a.theta, &task.val_x())?;
            Ok((a.theta, LossKind::Mse.evaluate(&pred, &task.val_y())))
        })
        .collect();
    let mut eval_thetas = Vec::with_capacity(results.len());
    let mut losses = Vec::with_capacity(results.len());
    for r in results {
        let (theta, l) = r?;
        eval_thetas.push(theta);
        losses.push(l);
    }
    let mut report = BenchmarkReport::new(
        format!("mtms_k{}", config.k),
        "mse",
        losses,
        seed,
        serde_json::to_value(config)?,
    )?;
    report.runtime_secs = start.elapsed().as_secs_f64();
    log::info!(
        "sine k={}: mse {:.4} ± {:.4} in {:.1}s",
        config.k,
        report.mean,
        report.ci_half_width,
        report.runtime_secs
    );
    Ok(SineRun {
        report,
        model,
        train_tasks,
        eval_tasks,
        eval_thetas,
        trace,
    })
}

/// Prediction function traced over `x` for one mesa vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MesaCurve {
    /// Index of the mesa coordinate being varied.
    pub varied: usize,
    pub theta: Vec<f64>,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// For each mesa coordinate, `n_grid` curves that vary it between the 5th
/// and 95th percentile of the trained mesa rows while every other
/// coordinate sits at its median. Each curve has `n_x` points on `[-5, 5]`.
pub fn sweep_mesa(model: &MtMsModel, n_grid: usize, n_x: usize) -> Result<Vec<MesaCurve>> {
    let d = model.d_theta();
    let cols: Vec<Vec<f64>> = (0..d)
        .map(|j| {
            let mut c: Vec<f64> = (0..model.n_tasks()).map(|m| model.mesa.get(m, j)).collect();
            c.sort_by(f64::total_cmp);
            c
        })
        .collect();
    let medians: Vec<f64> = cols.iter().map(|c| quantile(c, 0.5)).collect();
    let xs: Vec<f64> = (0..n_x)
        .map(|i| -5.0 + 10.0 * i as f64 / (n_x.max(2) - 1) as f64)
        .collect();
    let x = Array2::column_vector(xs.clone());
    let mut curves = Vec::with_capacity(d * n_grid);
    for j in 0..d {
        let (lo, hi) = (quantile(&cols[j], 0.05), quantile(&cols[j], 0.95));
        for g in 0..n_grid {
            let mut theta = medians.clone();
            theta[j] = lo + (hi - lo) * g as f64 / (n_grid.max(2) - 1) as f64;
            let y = model.predict_theta(&theta, &x)?.into_data();
            curves.push(MesaCurve {
                varied: j,
                theta,
                x: xs.clone(),
                y,
            });
        }
    }
    Ok(curves)
}
