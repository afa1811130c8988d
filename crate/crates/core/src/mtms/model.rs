use serde::{Deserialize, Serialize};

use crate::autodiff::Array2;
use crate::error::{shape_err, Error, Result};
use crate::nn::{eval_forward, init_params, InitScheme, MlpSpec, ParamVector};
use crate::rng::Rng;

/// One prediction problem. Rows `0..k` are training rows; the rest are
/// held out and only ever used for early stopping or scoring.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub x: Array2,
    pub y: Array2,
    pub k: usize,
}

impl Task {
    pub fn new(x: Array2, y: Array2, k: usize) -> Result<Self> {
        if x.rows() != y.rows() {
            return Err(shape_err(
                "task",
                format!("{} feature rows, {} target rows", x.rows(), y.rows()),
            ));
        }
        if k > x.rows() {
            return Err(Error::Parameter(format!(
                "split point {k} beyond {} rows",
                x.rows()
            )));
        }
        Ok(Self { x, y, k })
    }

    pub fn n_rows(&self) -> usize {
        self.x.rows()
    }

    pub fn train_rows(&self) -> Vec<usize> {
        (0..self.k).collect()
    }

    pub fn val_rows(&self) -> Vec<usize> {
        (self.k..self.x.rows()).collect()
    }

    pub fn train_x(&self) -> Array2 {
        self.x.select_rows(&self.train_rows())
    }

    pub fn train_y(&self) -> Array2 {
        self.y.select_rows(&self.train_rows())
    }

    pub fn val_x(&self) -> Array2 {
        self.x.select_rows(&self.val_rows())
    }

    pub fn val_y(&self) -> Array2 {
        self.y.select_rows(&self.val_rows())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskBundle {
    pub tasks: Vec<Task>,
    pub d_x: usize,
    pub d_y: usize,
}

impl TaskBundle {
    pub fn new(tasks: Vec<Task>) -> Result<Self> {
        let first = tasks
            .first()
            .ok_or_else(|| Error::Parameter("task bundle is empty".into()))?;
        let (d_x, d_y) = (first.x.cols(), first.y.cols());
        for (m, t) in tasks.iter().enumerate() {
            if t.x.cols() != d_x || t.y.cols() != d_y {
                return Err(shape_err(
                    format!("task {m}"),
                    format!(
                        "{}x{} features/targets, bundle uses {d_x}/{d_y}",
                        t.x.cols(),
                        t.y.cols()
                    ),
                ));
            }
        }
        Ok(Self { tasks, d_x, d_y })
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn has_val_rows(&self) -> bool {
        self.tasks.iter().any(|t| t.k < t.n_rows())
    }
}

/// Which entries of the base network's parameter vector the meta module
/// produces. Everything else is an orphaned constant shared by all tasks.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Connection {
    FinalLayer,
    All,
    Explicit(Vec<usize>),
}

impl Connection {
    /// Sorted connected indices into the base parameter vector.
    pub fn indices(&self, base: &MlpSpec) -> Result<Vec<usize>> {
        let n = base.n_params();
        let mut idx = match self {
            Connection::FinalLayer => base.final_layer_indices(),
            Connection::All => (0..n).collect(),
            Connection::Explicit(v) => v.clone(),
        };
        idx.sort_unstable();
        idx.dedup();
        if idx.is_empty() {
            return Err(Error::Parameter("no connected parameters".into()));
        }
        if idx.last().is_some_and(|&i| i >= n) {
            return Err(Error::Parameter(format!(
                "connected index beyond {n} base parameters"
            )));
        }
        Ok(idx)
    }

    pub fn orphaned_indices(&self, base: &MlpSpec) -> Result<Vec<usize>> {
        let conn = self.indices(base)?;
        let mut out = Vec::with_capacity(base.n_params() - conn.len());
        let mut c = conn.iter().peekable();
        for i in 0..base.n_params() {
            if c.peek() == Some(&&i) {
                c.next();
            } else {
                out.push(i);
            }
        }
        Ok(out)
    }
}

/// Task whose predictions are replaced by fixed probabilities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionOverride {
    pub task: usize,
    pub probs: Vec<f64>,
}

/// Per-feature standardization applied before the base network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    #[serde(default)]
    pub overrides: Vec<PredictionOverride>,
}

impl NormStats {
    pub fn identity(d: usize) -> Self {
        Self {
            mean: vec![0.0; d],
            std: vec![1.0; d],
            overrides: Vec::new(),
        }
    }

    /// Column means and standard deviations of `x`; zero spreads become 1.
    pub fn fit(x: &Array2) -> Self {
        let (n, d) = x.shape();
        let mut mean = vec![0.0; d];
        let mut std = vec![0.0; d];
        for r in 0..n {
            for (m, v) in mean.iter_mut().zip(x.row(r)) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= n.max(1) as f64;
        }
        for r in 0..n {
            for ((s, v), m) in std.iter_mut().zip(x.row(r)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        for s in &mut std {
            *s = (*s / n.max(1) as f64).sqrt();
            if !(*s > 1e-12) {
                *s = 1.0;
            }
        }
        Self {
            mean,
            std,
            overrides: Vec::new(),
        }
    }

    pub fn apply(&self, x: &Array2) -> Result<Array2> {
        if x.cols() != self.mean.len() {
            return Err(shape_err(
                "normalization",
                format!("{} columns, stats cover {}", x.cols(), self.mean.len()),
            ));
        }
        let mut out = x.clone();
        for r in 0..out.rows() {
            for ((v, m), s) in out.row_mut(r).iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - m) / s;
            }
        }
        Ok(out)
    }

    pub fn override_for(&self, task: usize) -> Option<&[f64]> {
        self.overrides
            .iter()
            .find(|o| o.task == task)
            .map(|o| o.probs.as_slice())
    }
}

/// Base network `f`, meta module `g` and one mesa row per task.
#[derive(Clone, Debug, PartialEq)]
pub struct MtMsModel {
    pub base_spec: MlpSpec,
    pub meta_spec: MlpSpec,
    pub connection: Connection,
    pub omega: ParamVector,
    pub orphaned: Vec<f64>,
    /// `M x d_theta`.
    pub mesa: Array2,
    pub norm_stats: NormStats,
    connected: Vec<usize>,
    orphaned_idx: Vec<usize>,
}

impl MtMsModel {
    pub fn new(
        base_spec: MlpSpec,
        meta_spec: MlpSpec,
        connection: Connection,
        omega: ParamVector,
        orphaned: Vec<f64>,
        mesa: Array2,
        norm_stats: NormStats,
    ) -> Result<Self> {
        base_spec.validate()?;
        meta_spec.validate()?;
        let connected = connection.indices(&base_spec)?;
        let orphaned_idx = connection.orphaned_indices(&base_spec)?;
        if meta_spec.output_size() != connected.len() {
            return Err(Error::Parameter(format!(
                "meta module emits {} values for {} connected parameters",
                meta_spec.output_size(),
                connected.len()
            )));
        }
        if meta_spec.input_size() != mesa.cols() {
            return Err(Error::Parameter(format!(
                "meta module takes {} inputs, mesa rows have {}",
                meta_spec.input_size(),
                mesa.cols()
            )));
        }
        if omega.len() != meta_spec.n_params() {
            return Err(Error::Parameter(format!(
                "{} meta parameters, meta module needs {}",
                omega.len(),
                meta_spec.n_params()
            )));
        }
        if orphaned.len() != orphaned_idx.len() {
            return Err(Error::Parameter(format!(
                "{} orphaned constants for {} orphaned slots",
                orphaned.len(),
                orphaned_idx.len()
            )));
        }
        if norm_stats.mean.len() != base_spec.input_size()
            || norm_stats.std.len() != base_spec.input_size()
        {
            return Err(Error::Parameter(
                "normalization stats do not match the base input width".into(),
            ));
        }
        Ok(Self {
            base_spec,
            meta_spec,
            connection,
            omega,
            orphaned,
            mesa,
            norm_stats,
            connected,
            orphaned_idx,
        })
    }

    /// Phase-2 starting point: meta weights drawn from `weight_init`, mesa
    /// rows zero, and the meta output at `theta = 0` equal to `beta` on the
    /// connected slots. Remaining entries of `beta` become the orphaned
    /// constants.
    #[allow(clippy::too_many_arguments)]
    pub fn from_pooled(
        base_spec: MlpSpec,
        meta_spec: MlpSpec,
        connection: Connection,
        beta: &ParamVector,
        n_tasks: usize,
        weight_init: InitScheme,
        norm_stats: NormStats,
        rng: &mut Rng,
    ) -> Result<Self> {
        if beta.len() != base_spec.n_params() {
            return Err(Error::Parameter(format!(
                "pooled vector has {} entries, base network {}",
                beta.len(),
                base_spec.n_params()
            )));
        }
        let connected = connection.indices(&base_spec)?;
        let orphaned_idx = connection.orphaned_indices(&base_spec)?;
        let mut omega = init_params(&meta_spec, weight_init, rng);
        let d_theta = meta_spec.input_size();
        let last = *omega.layout.last().expect("validated spec");
        for v in &mut omega.values[last.bias_offset..last.bias_offset + last.fan_out] {
            *v = 0.0;
        }
        let at_zero = eval_forward(&meta_spec, &omega.values, &Array2::zeros(1, d_theta));
        for (j, &i) in connected.iter().enumerate() {
            omega.values[last.bias_offset + j] = beta.values[i] - at_zero.data()[j];
        }
        let orphaned = orphaned_idx.iter().map(|&i| beta.values[i]).collect();
        Self::new(
            base_spec,
            meta_spec,
            connection,
            omega,
            orphaned,
            Array2::zeros(n_tasks, d_theta),
            norm_stats,
        )
    }

    pub fn n_tasks(&self) -> usize {
        self.mesa.rows()
    }

    pub fn d_theta(&self) -> usize {
        self.mesa.cols()
    }

    pub fn connected_indices(&self) -> &[usize] {
        &self.connected
    }

    pub fn orphaned_indices(&self) -> &[usize] {
        &self.orphaned_idx
    }

    pub fn theta(&self, m: usize) -> Result<&[f64]> {
        if m >= self.n_tasks() {
            return Err(Error::Parameter(format!(
                "task {m} outside 0..{}",
                self.n_tasks()
            )));
        }
        Ok(self.mesa.row(m))
    }

    /// Base parameters for an arbitrary mesa vector.
    pub fn beta_for(&self, theta: &[f64]) -> Result<ParamVector> {
        if theta.len() != self.d_theta() {
            return Err(shape_err(
                "mesa vector",
                format!("{} entries, model uses {}", theta.len(), self.d_theta()),
            ));
        }
        let g = eval_forward(
            &self.meta_spec,
            &self.omega.values,
            &Array2::row_vector(theta.to_vec()),
        );
        Ok(self.assemble(g.data(), &self.orphaned))
    }

    pub(crate) fn assemble(&self, connected_values: &[f64], orphaned: &[f64]) -> ParamVector {
        let mut values = vec![0.0; self.base_spec.n_params()];
        for (&i, &v) in self.connected.iter().zip(connected_values) {
            values[i] = v;
        }
        for (&i, &v) in self.orphaned_idx.iter().zip(orphaned) {
            values[i] = v;
        }
        ParamVector {
            values,
            layout: self.base_spec.layout(),
        }
    }

    pub fn lookup_beta(&self, m: usize) -> Result<ParamVector> {
        self.beta_for(self.theta(m)?)
    }

    /// Eval-mode prediction for already-normalized features.
    pub fn predict_normalized(&self, m: usize, x: &Array2) -> Result<Array2> {
        if let Some(p) = self.norm_stats.override_for(m) {
            return override_rows(p, x.rows());
        }
        let beta = self.lookup_beta(m)?;
        self.predict_beta(&beta, x)
    }

    /// Eval-mode prediction for raw features; applies `norm_stats` first.
    pub fn predict(&self, m: usize, x: &Array2) -> Result<Array2> {
        let xn = self.norm_stats.apply(x)?;
        self.predict_normalized(m, &xn)
    }

    /// Prediction for a mesa vector outside the trained table.
    pub fn predict_theta(&self, theta: &[f64], x_normalized: &Array2) -> Result<Array2> {
        let beta = self.beta_for(theta)?;
        self.predict_beta(&beta, x_normalized)
    }

    pub(crate) fn predict_beta(&self, beta: &ParamVector, x: &Array2) -> Result<Array2> {
        if x.cols() != self.base_spec.input_size() {
            return Err(shape_err(
                "predict",
                format!(
                    "{} feature columns, model expects {}",
                    x.cols(),
                    self.base_spec.input_size()
                ),
            ));
        }
        let out = eval_forward(&self.base_spec, &beta.values, x);
        if !out.is_finite() {
            return Err(Error::NonFinite {
                node: "base network output".into(),
            });
        }
        Ok(out)
    }
}

fn override_rows(p: &[f64], n: usize) -> Result<Array2> {
    let mut data = Vec::with_capacity(n * p.len());
    for _ in 0..n {
        data.extend_from_slice(p);
    }
    Array2::new(n, p.len(), data)
}
