use rand::{Rng as _, SeedableRng};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Array2, Mode};
use crate::error::{Error, Result};
use crate::losses::LossKind;
use crate::nn::{backward_cached, eval_forward, forward_cached, init_params, InitScheme, MlpSpec, ParamVector};
use crate::optimize::{
    train_ladder, train_loop, Adam, LrLadder, Objective, OptimizerKind, TraceRow, TrainConfig,
};
use crate::rng::Rng;

use super::model::{MtMsModel, Task, TaskBundle};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Phase1Config {
    pub lr: f64,
    pub init: InitScheme,
    pub train: TrainConfig,
}

impl Default for Phase1Config {
    fn default() -> Self {
        Self {
            lr: 0.01,
            init: InitScheme::XavierUniform,
            train: TrainConfig {
                batch_size: 200,
                max_epochs: 500,
                patience: 10,
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Phase2Config {
    pub optimizer: OptimizerKind,
    pub ladder: Vec<f64>,
    /// Batch size counts tasks.
    pub train: TrainConfig,
    pub meta_init: InitScheme,
    /// Weight of `‖θ‖²` added to each task's loss.
    pub mesa_l2: f64,
}

impl Default for Phase2Config {
    fn default() -> Self {
        Self {
            optimizer: OptimizerKind::Adam,
            ladder: LrLadder::quintile_default().0,
            train: TrainConfig {
                batch_size: 100,
                max_epochs: 500,
                patience: 10,
            },
            meta_init: InitScheme::Uniform(-1.0, 1.0),
            mesa_l2: 0.0,
        }
    }
}

/// Rows of every task stacked into one design matrix.
struct Pooled {
    x: Array2,
    y: Array2,
}

fn pool(bundle: &TaskBundle, pick: impl Fn(&Task) -> Vec<usize>) -> Pooled {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut n = 0;
    for t in &bundle.tasks {
        for r in pick(t) {
            xs.extend_from_slice(t.x.row(r));
            ys.extend_from_slice(t.y.row(r));
            n += 1;
        }
    }
    Pooled {
        x: Array2::new(n, bundle.d_x, xs).expect("consistent widths"),
        y: Array2::new(n, bundle.d_y, ys).expect("consistent widths"),
    }
}

struct PooledObjective<'a> {
    spec: &'a MlpSpec,
    loss: LossKind,
    train: Pooled,
    val: Pooled,
}

impl Objective for PooledObjective<'_> {
    fn n_units(&self) -> usize {
        self.train.x.rows()
    }

    fn loss_grad(&self, params: &[f64], batch: &[usize], rng: &mut Rng) -> Result<(f64, Vec<f64>)> {
        let x = self.train.x.select_rows(batch);
        let cache = forward_cached(self.spec, params, &x, Mode::Train, rng);
        let (loss, d_out) = self.loss.value_grad(&cache.output, &self.train.y.select_rows(batch));
        if !loss.is_finite() {
            return Err(Error::NonFinite { node: "pooled loss".into() });
        }
        Ok((loss, backward_cached(self.spec, params, &cache, &d_out, false).0))
    }

    fn val_loss(&self, params: &[f64]) -> Result<f64> {
        let pred = eval_forward(self.spec, params, &self.val.x);
        Ok(self.loss.evaluate(&pred, &self.val.y))
    }
}

/// Trains one base network on all training rows pooled across tasks.
/// Early stopping watches the held-out rows, or the training rows when no
/// task has any.
pub fn train_phase1(
    bundle: &TaskBundle,
    base_spec: &MlpSpec,
    loss: LossKind,
    config: &Phase1Config,
    rng: &mut Rng,
) -> Result<(ParamVector, Vec<TraceRow>)> {
    check_bundle(bundle, base_spec)?;
    let train = pool(bundle, Task::train_rows);
    if train.x.rows() == 0 {
        return Err(Error::Parameter("no training rows in bundle".into()));
    }
    let val = if bundle.has_val_rows() {
        pool(bundle, Task::val_rows)
    } else {
        pool(bundle, Task::train_rows)
    };
    let obj = PooledObjective {
        spec: base_spec,
        loss,
        train,
        val,
    };
    let init = init_params(base_spec, config.init, rng);
    let mut opt = Adam::new(config.lr, init.len());
    let out = train_loop(&obj, init.values, &mut opt, &config.train, rng)?;
    Ok((ParamVector::from_flat(base_spec, out.params)?, out.trace))
}

fn check_bundle(bundle: &TaskBundle, base_spec: &MlpSpec) -> Result<()> {
    if bundle.is_empty() {
        return Err(Error::Parameter("task bundle is empty".into()));
    }
    if bundle.d_x != base_spec.input_size() || bundle.d_y != base_spec.output_size() {
        return Err(crate::error::shape_err(
            "bundle",
            format!(
                "{}->{} data for a {}->{} network",
                bundle.d_x,
                bundle.d_y,
                base_spec.input_size(),
                base_spec.output_size()
            ),
        ));
    }
    Ok(())
}

/// Which parts of the per-task graph receive gradients.
#[derive(Clone, Copy)]
pub(crate) struct Trainable {
    pub omega: bool,
    pub orphaned: bool,
    pub theta: bool,
}

pub(crate) struct TaskGrad {
    pub loss: f64,
    pub omega: Vec<f64>,
    pub orphaned: Vec<f64>,
    pub theta: Vec<f64>,
}

/// Loss of one task at the given meta, orphaned and mesa values, together
/// with the gradients requested by `trainable`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn task_loss_grad(
    model: &MtMsModel,
    omega: &[f64],
    orphaned: &[f64],
    theta: &[f64],
    x: &Array2,
    y: &Array2,
    loss: LossKind,
    mesa_l2: f64,
    trainable: Trainable,
    mode: Mode,
    rng: &mut Rng,
) -> Result<TaskGrad> {
    let th = Array2::row_vector(theta.to_vec());
    let g = forward_cached(&model.meta_spec, omega, &th, Mode::Eval, rng);
    let beta = model.assemble(g.output.data(), orphaned);
    let f = forward_cached(&model.base_spec, &beta.values, x, mode, rng);
    let (mut value, d_out) = loss.value_grad(&f.output, y);
    let (d_beta, _) = backward_cached(&model.base_spec, &beta.values, &f, &d_out, false);
    let orphaned_g = if trainable.orphaned {
        model.orphaned_indices().iter().map(|&i| d_beta[i]).collect()
    } else {
        Vec::new()
    };
    let d_g = Array2::row_vector(model.connected_indices().iter().map(|&i| d_beta[i]).collect());
    let (omega_g, d_theta) = if trainable.omega || trainable.theta {
        backward_cached(&model.meta_spec, omega, &g, &d_g, trainable.theta)
    } else {
        (Vec::new(), None)
    };
    let mut theta_g = d_theta.map(Array2::into_data).unwrap_or_default();
    if mesa_l2 > 0.0 {
        value += mesa_l2 * theta.iter().map(|v| v * v).sum::<f64>();
        for (g, v) in theta_g.iter_mut().zip(theta) {
            *g += 2.0 * mesa_l2 * v;
        }
    }
    if !value.is_finite() {
        return Err(Error::NonFinite { node: "task loss".into() });
    }
    Ok(TaskGrad {
        loss: value,
        omega: if trainable.omega { omega_g } else { Vec::new() },
        orphaned: orphaned_g,
        theta: if trainable.theta { theta_g } else { Vec::new() },
    })
}

/// Joint objective over `[omega | orphaned | mesa]`; sampling units are
/// tasks.
struct JointObjective<'a> {
    model: &'a MtMsModel,
    bundle: &'a TaskBundle,
    loss: LossKind,
    mesa_l2: f64,
    train: Vec<(Array2, Array2)>,
    val: Vec<(Array2, Array2)>,
}

impl JointObjective<'_> {
    fn split<'p>(&self, params: &'p [f64]) -> (&'p [f64], &'p [f64], &'p [f64]) {
        let a = self.model.omega.len();
        let b = a + self.model.orphaned.len();
        (&params[..a], &params[a..b], &params[b..])
    }
}

impl Objective for JointObjective<'_> {
    fn n_units(&self) -> usize {
        self.bundle.len()
    }

    fn loss_grad(&self, params: &[f64], batch: &[usize], rng: &mut Rng) -> Result<(f64, Vec<f64>)> {
        let (omega, orphaned, mesa) = self.split(params);
        let d = self.model.d_theta();
        let seeds: Vec<u64> = batch.iter().map(|_| rng.random()).collect();
        let parts: Vec<Result<TaskGrad>> = batch
            .par_iter()
            .zip(seeds.par_iter())
            .map(|(&m, &seed)| {
                let (x, y) = &self.train[m];
                task_loss_grad(
                    self.model,
                    omega,
                    orphaned,
                    &mesa[m * d..(m + 1) * d],
                    x,
                    y,
                    self.loss,
                    self.mesa_l2,
                    Trainable {
                        omega: true,
                        orphaned: true,
                        theta: true,
                    },
                    Mode::Train,
                    &mut Rng::seed_from_u64(seed),
                )
            })
            .collect();
        let scale = 1.0 / batch.len() as f64;
        let mut grad = vec![0.0; params.len()];
        let (a, b) = (omega.len(), omega.len() + orphaned.len());
        let mut total = 0.0;
        for (&m, part) in batch.iter().zip(parts) {
            let tg = part?;
            total += tg.loss;
            for (g, v) in grad[..a].iter_mut().zip(&tg.omega) {
                *g += v * scale;
            }
            for (g, v) in grad[a..b].iter_mut().zip(&tg.orphaned) {
                *g += v * scale;
            }
            for (g, v) in grad[b + m * d..b + (m + 1) * d].iter_mut().zip(&tg.theta) {
                *g += v * scale;
            }
        }
        Ok((total * scale, grad))
    }

    fn val_loss(&self, params: &[f64]) -> Result<f64> {
        let (omega, orphaned, mesa) = self.split(params);
        let d = self.model.d_theta();
        let losses: Vec<f64> = (0..self.val.len())
            .into_par_iter()
            .map(|m| {
                let (x, y) = &self.val[m];
                if x.rows() == 0 {
                    return 0.0;
                }
                let theta = Array2::row_vector(mesa[m * d..(m + 1) * d].to_vec());
                let g = eval_forward(&self.model.meta_spec, omega, &theta);
                let beta = self.model.assemble(g.data(), orphaned);
                let pred = eval_forward(&self.model.base_spec, &beta.values, x);
                let reg = self.mesa_l2 * theta.data().iter().map(|v| v * v).sum::<f64>();
                self.loss.evaluate(&pred, y) + reg
            })
            .collect();
        let n = self.val.iter().filter(|(x, _)| x.rows() > 0).count();
        Ok(losses.iter().sum::<f64>() / n.max(1) as f64)
    }
}

/// Jointly optimizes meta parameters, orphaned constants and all mesa rows
/// on the training rows of every task, stage by stage along the ladder.
pub fn train_phase2(
    bundle: &TaskBundle,
    model: &MtMsModel,
    loss: LossKind,
    config: &Phase2Config,
    rng: &mut Rng,
) -> Result<(MtMsModel, Vec<TraceRow>)> {
    check_bundle(bundle, &model.base_spec)?;
    if bundle.len() != model.n_tasks() {
        return Err(Error::Parameter(format!(
            "{} tasks for a model with {} mesa rows",
            bundle.len(),
            model.n_tasks()
        )));
    }
    let train: Vec<_> = bundle.tasks.iter().map(|t| (t.train_x(), t.train_y())).collect();
    let val = if bundle.has_val_rows() {
        bundle.tasks.iter().map(|t| (t.val_x(), t.val_y())).collect()
    } else {
        train.clone()
    };
    let obj = JointObjective {
        model,
        bundle,
        loss,
        mesa_l2: config.mesa_l2,
        train,
        val,
    };
    let mut params = model.omega.values.clone();
    params.extend_from_slice(&model.orphaned);
    params.extend_from_slice(model.mesa.data());
    let ladder = LrLadder::new(config.ladder.clone())?;
    let out = train_ladder(&obj, params, config.optimizer, &ladder, &config.train, rng)?;
    let (omega, orphaned, mesa) = obj.split(&out.params);
    let mut trained = model.clone();
    trained.omega.values = omega.to_vec();
    trained.orphaned = orphaned.to_vec();
    trained.mesa = Array2::new(model.n_tasks(), model.d_theta(), mesa.to_vec())?;
    Ok((trained, out.trace))
}

/// Mean per-task loss on training rows, each task weighted equally.
pub fn mean_train_loss(model: &MtMsModel, bundle: &TaskBundle, loss: LossKind) -> Result<f64> {
    let mut total = 0.0;
    for (m, t) in bundle.tasks.iter().enumerate() {
        let pred = model.predict_normalized(m, &t.train_x())?;
        total += loss.evaluate(&pred, &t.train_y());
    }
    Ok(total / bundle.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use super::super::fixtures::*;
    use crate::autodiff::{NodeId, Tape};
    use crate::nn::mlp_on_tape;
    use crate::nn::{Activation, OutputTransform};
    use crate::rng::substream;

    fn linear_spec() -> MlpSpec {
        MlpSpec::new(vec![1, 1], Activation::None, OutputTransform::None, 0.0).unwrap()
    }

    /// Loss of one task at the given meta, orphaned and mesa values, together
    /// with the gradients requested by `trainable`.
    #[allow(clippy::too_many_arguments)]
        fn tape_task_loss_grad(
        model: &MtMsModel,
        omega: &[f64],
        orphaned: &[f64],
        theta: &[f64],
        x: &Array2,
        y: &Array2,
        loss: LossKind,
        mesa_l2: f64,
        trainable: Trainable,
        mode: Mode,
        rng: &mut Rng,
    ) -> Result<TaskGrad> {
        let mut tape = Tape::new();
        let node = |tape: &mut Tape, name: &str, v: &[f64], grad: bool| -> NodeId {
            let a = Array2::row_vector(v.to_vec());
            if grad {
                tape.param(name, a)
            } else {
                tape.constant(a)
            }
        };
        let om = node(&mut tape, "omega", omega, trainable.omega);
        let th = node(&mut tape, "theta", theta, trainable.theta && !theta.is_empty());
        let g = mlp_on_tape(&mut tape, &model.meta_spec, om, th, Mode::Eval, rng)?;
        let mut parts = vec![(g, model.connected_indices().to_vec())];
        let orph = if orphaned.is_empty() {
            None
        } else {
            let o = node(&mut tape, "orphaned", orphaned, trainable.orphaned);
            parts.push((o, model.orphaned_indices().to_vec()));
            Some(o)
        };
        let beta = tape.scatter(model.base_spec.n_params(), parts);
        let xi = tape.constant(x.clone());
        let pred = mlp_on_tape(&mut tape, &model.base_spec, beta, xi, mode, rng)?;
        let l = loss.on_tape(&mut tape, pred, y);
        if mesa_l2 > 0.0 && !theta.is_empty() {
            let sq = tape.square(th);
            let s = tape.sum(sq);
            let r = tape.scale(s, mesa_l2);
            tape.add(l, r);
        }
        let value = tape.forward(&Default::default())?.data()[0];
        let mut grads = tape.backward(&Array2::scalar(1.0))?;
        let mut take = |n: NodeId, want: bool, len: usize| -> Vec<f64> {
            if want {
                grads
                    .take(n)
                    .map(Array2::into_data)
                    .unwrap_or_else(|| vec![0.0; len])
            } else {
                Vec::new()
            }
        };
        let omega_g = take(om, trainable.omega, omega.len());
        let theta_g = take(th, trainable.theta, theta.len());
        let orph_g = match orph {
            Some(o) => take(o, trainable.orphaned, orphaned.len()),
            None => Vec::new(),
        };
        Ok(TaskGrad {
            loss: value,
            omega: omega_g,
            orphaned: orph_g,
            theta: theta_g,
        })
    }

    #[test]
    fn fused_task_gradient_matches_tape() {
        let base = MlpSpec::new(vec![3, 6, 5], Activation::LeakyRelu, OutputTransform::Softmax, 0.3).unwrap();
        let meta = MlpSpec::new(vec![2, 4, base.final_layer_indices().len()], Activation::LeakyRelu, OutputTransform::None, 0.0).unwrap();
        let beta = init_params(&base, InitScheme::XavierUniform, &mut substream(1, "b"));
        let mut model = MtMsModel::from_pooled(
            base,
            meta,
            super::super::Connection::FinalLayer,
            &beta,
            3,
            InitScheme::Uniform(-1.0, 1.0),
            super::super::NormStats::identity(3),
            &mut substream(1, "g"),
        )
        .unwrap();
        model.mesa = Array2::new(3, 2, vec![0.3, -0.2, 0.1, 0.5, -0.4, 0.0]).unwrap();
        let x = Array2::new(4, 3, (0..12).map(|v| (v as f64 * 0.7).sin()).collect()).unwrap();
        let mut y = Array2::zeros(4, 5);
        for r in 0..4 {
            y.set(r, (r * 2) % 5, 1.0);
        }
        let all = Trainable { omega: true, orphaned: true, theta: true };
        for mode in [Mode::Train, Mode::Eval] {
            let a = task_loss_grad(&model, &model.omega.values, &model.orphaned, model.mesa.row(1), &x, &y, LossKind::Rps, 0.1, all, mode, &mut substream(4, "d")).unwrap();
            let b = tape_task_loss_grad(&model, &model.omega.values, &model.orphaned, model.mesa.row(1), &x, &y, LossKind::Rps, 0.1, all, mode, &mut substream(4, "d")).unwrap();
            assert!((a.loss - b.loss).abs() < 1e-14);
            for (u, v) in [(&a.omega, &b.omega), (&a.orphaned, &b.orphaned), (&a.theta, &b.theta)] {
                assert_eq!(u.len(), v.len());
                for (p, q) in u.iter().zip(v.iter()) {
                    assert!((p - q).abs() < 1e-12, "{p} vs {q}");
                }
            }
        }
    }

    #[test]
    fn phase1_matches_ols_on_single_task() {
        let task = line_task(2.0, -1.0, 40, 0.3, 1);
        let bundle = TaskBundle::new(vec![task.clone()]).unwrap();
        let cfg = Phase1Config {
            lr: 0.01,
            init: InitScheme::Zeros,
            train: TrainConfig {
                batch_size: 200,
                max_epochs: 5000,
                patience: 200,
            },
        };
        let (beta, _) = train_phase1(&bundle, &linear_spec(), LossKind::Mse, &cfg, &mut substream(0, "t")).unwrap();
        let (a, b) = ols_line(&task);
        let pred = eval_forward(&linear_spec(), &beta.values, &task.x);
        let ols = task.x.map(|x| a * x + b);
        let got = LossKind::Mse.evaluate(&pred, &task.y);
        let best = LossKind::Mse.evaluate(&ols, &task.y);
        assert!(got - best < 1e-6, "{got} vs {best}");
    }

    #[test]
    fn phase1_is_deterministic() {
        let bundle = TaskBundle::new(vec![line_task(1.0, 0.5, 30, 0.1, 2)]).unwrap();
        let cfg = Phase1Config::default();
        let run = || train_phase1(&bundle, &linear_spec(), LossKind::Mse, &cfg, &mut substream(4, "t")).unwrap().0;
        assert_eq!(run(), run());
    }

    #[test]
    fn phase2_separates_opposite_tasks() {
        let bundle = TaskBundle::new(vec![line_task(1.0, 0.0, 20, 0.0, 3), line_task(-1.0, 0.0, 20, 0.0, 4)]).unwrap();
        let spec = linear_spec();
        let cfg1 = Phase1Config::default();
        let (beta, _) = train_phase1(&bundle, &spec, LossKind::Mse, &cfg1, &mut substream(5, "p1")).unwrap();
        let meta = MlpSpec::new(vec![1, 2], Activation::None, OutputTransform::None, 0.0).unwrap();
        let model = MtMsModel::from_pooled(
            spec,
            meta,
            super::super::Connection::FinalLayer,
            &beta,
            2,
            InitScheme::Uniform(-1.0, 1.0),
            super::super::NormStats::identity(1),
            &mut substream(5, "g"),
        )
        .unwrap();
        let before = mean_train_loss(&model, &bundle, LossKind::Mse).unwrap();
        let cfg2 = Phase2Config {
            ladder: vec![0.01, 0.001],
            train: TrainConfig {
                batch_size: 2,
                max_epochs: 3000,
                patience: 100,
            },
            ..Phase2Config::default()
        };
        let (trained, _) = train_phase2(&bundle, &model, LossKind::Mse, &cfg2, &mut substream(5, "p2")).unwrap();
        let after = mean_train_loss(&trained, &bundle, LossKind::Mse).unwrap();
        assert!(after < 0.01 * before, "{after} vs pooled {before}");
    }
}
