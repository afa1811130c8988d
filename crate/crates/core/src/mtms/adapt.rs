use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Array2, Mode};
use crate::error::{Error, Result};
use crate::losses::LossKind;
use crate::optimize::OptimizerKind;
use crate::rng::Rng;

use super::model::{MtMsModel, Task};
use super::train::{task_loss_grad, Trainable};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptConfig {
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub steps: usize,
    /// Random starting points tried in addition to `theta = 0`.
    pub restarts: usize,
    /// Steps without improvement of the training loss before a start is
    /// abandoned.
    pub patience: usize,
    /// Also start from the trained mesa row that fits the new data best.
    pub screen_mesa: bool,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerKind::Adadelta,
            lr: 0.001,
            steps: 2000,
            restarts: 3,
            patience: 200,
            screen_mesa: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adaptation {
    pub theta: Vec<f64>,
    pub train_loss: f64,
    /// Loss of every start after its descent, `theta = 0` first.
    pub start_losses: Vec<f64>,
}

/// Fits a mesa vector for a task the model has never seen, holding the meta
/// parameters and orphaned constants fixed. Only the training rows
/// (`0..task.k`) are touched.
pub fn adapt_new_task(
    model: &MtMsModel,
    task: &Task,
    loss: LossKind,
    config: &AdaptConfig,
    rng: &mut Rng,
) -> Result<Adaptation> {
    if task.k == 0 {
        return Err(Error::Parameter("cannot adapt to a task without training rows".into()));
    }
    let d = model.d_theta();
    if d == 0 {
        return Err(Error::Parameter("model has no mesa parameters to adapt".into()));
    }
    let x = model.norm_stats.apply(&task.train_x())?;
    let y = task.train_y();
    let mut starts = vec![vec![0.0; d]];
    if model.n_tasks() > 0 {
        for _ in 0..config.restarts {
            let m = rng.random_range(0..model.n_tasks());
            starts.push(model.mesa.row(m).to_vec());
        }
        if config.screen_mesa {
            starts.push(best_mesa_row(model, &x, &y, loss)?);
        }
    }
    let mut best: Option<(Vec<f64>, f64)> = None;
    let mut start_losses = Vec::with_capacity(starts.len());
    for s in starts {
        let (theta, l) = descend(model, s, &x, &y, loss, config, rng)?;
        start_losses.push(l);
        if best.as_ref().is_none_or(|(_, b)| l < *b) {
            best = Some((theta, l));
        }
    }
    let (theta, train_loss) = best.expect("at least one start");
    Ok(Adaptation {
        theta,
        train_loss,
        start_losses,
    })
}

fn best_mesa_row(model: &MtMsModel, x: &Array2, y: &Array2, loss: LossKind) -> Result<Vec<f64>> {
    let mut best = (0, f64::INFINITY);
    for m in 0..model.n_tasks() {
        let pred = model.predict_theta(model.mesa.row(m), x)?;
        let l = loss.evaluate(&pred, y);
        if l < best.1 {
            best = (m, l);
        }
    }
    Ok(model.mesa.row(best.0).to_vec())
}

fn descend(
    model: &MtMsModel,
    start: Vec<f64>,
    x: &Array2,
    y: &Array2,
    loss: LossKind,
    config: &AdaptConfig,
    rng: &mut Rng,
) -> Result<(Vec<f64>, f64)> {
    let mut opt = config.optimizer.build(config.lr, start.len());
    let mut theta = start;
    let mut best = (theta.clone(), f64::INFINITY);
    let mut since_best = 0;
    for _ in 0..config.steps {
        let tg = task_loss_grad(
            model,
            &model.omega.values,
            &model.orphaned,
            &theta,
            x,
            y,
            loss,
            0.0,
            Trainable {
                omega: false,
                orphaned: false,
                theta: true,
            },
            Mode::Eval,
            rng,
        )?;
        if tg.loss < best.1 {
            best = (theta.clone(), tg.loss);
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                return Ok(best);
            }
        }
        opt.step(&mut theta, &tg.theta)?;
    }
    let last = loss.evaluate(&model.predict_theta(&theta, x)?, y);
    if last < best.1 {
        best = (theta, last);
    }
    Ok(best)
}
