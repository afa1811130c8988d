//! First-order optimizers, minibatch training loops, learning-rate ladders
//! and early stopping.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

/// In-place parameter update rule.
pub trait Optimizer: Send {
    fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()>;
    fn lr(&self) -> f64;
    fn set_lr(&mut self, lr: f64);
}

fn check_grads(params: &[f64], grads: &[f64]) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::Parameter(format!(
            "{} gradients for {} parameters",
            grads.len(),
            params.len()
        )));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite {
            node: format!("gradient entry {i}"),
        });
    }
    Ok(())
}

/// Bias-corrected Adam.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl Adam {
    pub fn new(lr: f64, n: usize) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }
}

impl Optimizer for Adam {
    fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        check_grads(params, grads)?;
        if self.m.len() != params.len() {
            return Err(Error::Parameter("Adam state sized for another vector".into()));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
        Ok(())
    }

    fn lr(&self) -> f64 {
        self.lr
    }

    fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }
}

/// Adadelta with the final update multiplied by `lr`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Adadelta {
    pub lr: f64,
    pub rho: f64,
    pub eps: f64,
    pub sq_grad: Vec<f64>,
    pub sq_delta: Vec<f64>,
}

impl Adadelta {
    pub fn new(lr: f64, n: usize) -> Self {
        Self {
            lr,
            rho: 0.9,
            eps: 1e-6,
            sq_grad: vec![0.0; n],
            sq_delta: vec![0.0; n],
        }
    }
}

impl Optimizer for Adadelta {
    fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        check_grads(params, grads)?;
        if self.sq_grad.len() != params.len() {
            return Err(Error::Parameter("Adadelta state sized for another vector".into()));
        }
        for i in 0..params.len() {
            let g = grads[i];
            self.sq_grad[i] = self.rho * self.sq_grad[i] + (1.0 - self.rho) * g * g;
            let delta = (self.sq_delta[i] + self.eps).sqrt() / (self.sq_grad[i] + self.eps).sqrt() * g;
            self.sq_delta[i] = self.rho * self.sq_delta[i] + (1.0 - self.rho) * delta * delta;
            params[i] -= self.lr * delta;
        }
        Ok(())
    }

    fn lr(&self) -> f64 {
        self.lr
    }

    fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Sgd {
    pub lr: f64,
}

impl Optimizer for Sgd {
    fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        check_grads(params, grads)?;
        for (p, g) in params.iter_mut().zip(grads) {
            *p -= self.lr * g;
        }
        Ok(())
    }

    fn lr(&self) -> f64 {
        self.lr
    }

    fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    Adadelta,
    Sgd,
}

impl OptimizerKind {
    pub fn build(self, lr: f64, n: usize) -> Box<dyn Optimizer> {
        match self {
            OptimizerKind::Adam => Box::new(Adam::new(lr, n)),
            OptimizerKind::Adadelta => Box::new(Adadelta::new(lr, n)),
            OptimizerKind::Sgd => Box::new(Sgd { lr }),
        }
    }
}

/// Tracks the best validation loss and the parameters that achieved it.
#[derive(Clone, Debug)]
pub struct EarlyStop {
    pub best_loss: f64,
    pub best_params: Vec<f64>,
    pub best_epoch: usize,
    pub epochs_since_best: usize,
    pub patience: usize,
}

impl EarlyStop {
    pub fn new(patience: usize, initial_loss: f64, initial_params: &[f64]) -> Self {
        Self {
            best_loss: initial_loss,
            best_params: initial_params.to_vec(),
            best_epoch: 0,
            epochs_since_best: 0,
            patience,
        }
    }

    /// Records one epoch; returns `true` when training should stop.
    pub fn observe(&mut self, epoch: usize, loss: f64, params: &[f64]) -> bool {
        if loss < self.best_loss {
            self.best_loss = loss;
            self.best_params.clear();
            self.best_params.extend_from_slice(params);
            self.best_epoch = epoch;
            self.epochs_since_best = 0;
        } else {
            self.epochs_since_best += 1;
        }
        self.epochs_since_best >= self.patience
    }
}

/// Learning rates visited in order, each stage running to its own early stop.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrLadder(pub Vec<f64>);

impl LrLadder {
    pub fn new(rates: Vec<f64>) -> Result<Self> {
        if rates.is_empty() || rates.iter().any(|r| !(*r > 0.0)) {
            return Err(Error::Parameter("learning-rate ladder must be non-empty and positive".into()));
        }
        Ok(Self(rates))
    }

    /// Phase-two ladder used for the quintile model, including the repeated
    /// 0.001 stage.
    pub fn quintile_default() -> Self {
        Self(vec![0.01, 0.001, 0.001, 0.0005, 0.0003, 0.0001, 0.00005])
    }
}

/// Something trainable by minibatch gradient descent over `n_units`
/// sampling units (rows or whole tasks).
pub trait Objective: Sync {
    fn n_units(&self) -> usize;

    /// Mean loss over `batch` and its gradient, in training mode.
    fn loss_grad(&self, params: &[f64], batch: &[usize], rng: &mut Rng) -> Result<(f64, Vec<f64>)>;

    /// Deterministic loss used for early stopping.
    fn val_loss(&self, params: &[f64]) -> Result<f64>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 200,
            max_epochs: 500,
            patience: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub stage_lr: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: Vec<f64>,
    pub best_val: f64,
    pub trace: Vec<TraceRow>,
}

/// Shuffled minibatches covering every unit exactly once.
pub fn epoch_batches(n: usize, batch_size: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// Minibatch loop with early stopping on `val_loss`. The starting point
/// counts as epoch 0, so the result is never worse on validation than the
/// parameters passed in.
pub fn train_loop(
    objective: &dyn Objective,
    params: Vec<f64>,
    optimizer: &mut dyn Optimizer,
    config: &TrainConfig,
    rng: &mut Rng,
) -> Result<TrainOutcome> {
    let n = objective.n_units();
    if n == 0 {
        return Err(Error::Parameter("no training data".into()));
    }
    let mut params = params;
    let mut stop = EarlyStop::new(config.patience, objective.val_loss(&params)?, &params);
    let mut trace = Vec::new();
    for epoch in 1..=config.max_epochs {
        let mut total = 0.0;
        let mut count = 0usize;
        for batch in epoch_batches(n, config.batch_size, rng) {
            let (loss, grad) = objective.loss_grad(&params, &batch, rng)?;
            optimizer.step(&mut params, &grad)?;
            total += loss * batch.len() as f64;
            count += batch.len();
        }
        let val = objective.val_loss(&params)?;
        trace.push(TraceRow {
            epoch,
            train_loss: total / count as f64,
            val_loss: val,
            stage_lr: optimizer.lr(),
        });
        if stop.observe(epoch, val, &params) {
            break;
        }
    }
    Ok(TrainOutcome {
        params: stop.best_params,
        best_val: stop.best_loss,
        trace,
    })
}

/// Runs one [`train_loop`] per ladder stage with a fresh optimizer, each
/// stage starting from the best parameters of the previous one.
pub fn train_ladder(
    objective: &dyn Objective,
    params: Vec<f64>,
    kind: OptimizerKind,
    ladder: &LrLadder,
    config: &TrainConfig,
    rng: &mut Rng,
) -> Result<TrainOutcome> {
    let mut params = params;
    let mut trace: Vec<TraceRow> = Vec::new();
    let mut best_val = f64::INFINITY;
    for &lr in &ladder.0 {
        let mut opt = kind.build(lr, params.len());
        let out = train_loop(objective, params, opt.as_mut(), config, rng)?;
        let offset = trace.len();
        trace.extend(out.trace.into_iter().map(|mut r| {
            r.epoch += offset;
            r
        }));
        params = out.params;
        best_val = out.best_val;
    }
    Ok(TrainOutcome {
        params,
        best_val,
        trace,
    })
}

pub fn write_trace_csv(path: &Path, trace: &[TraceRow]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "epoch,train_loss,val_loss,stage_lr")?;
    for r in trace {
        writeln!(f, "{},{},{},{}", r.epoch, r.train_loss, r.val_loss, r.stage_lr)?;
    }
    f.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use std::sync::Mutex;

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = vec![1.0];
        let mut a = Adam::new(0.01, 1);
        a.step(&mut p, &[5.0]).unwrap();
        // m̂ = 5, v̂ = 25, step = 0.01 * 5 / (5 + 1e-8)
        let expected = 1.0 - 0.01 * 5.0 / (5.0 + 1e-8);
        assert!((p[0] - expected).abs() < 1e-15);
        assert!((p[0] - 0.99).abs() < 1e-9);
    }

    #[test]
    fn adam_zero_gradient_no_move_and_symmetry() {
        let mut p = vec![0.3];
        Adam::new(0.01, 1).step(&mut p, &[0.0]).unwrap();
        assert_eq!(p, vec![0.3]);
        let mut q = vec![0.0, 0.0];
        Adam::new(0.01, 2).step(&mut q, &[5.0, -5.0]).unwrap();
        assert!((q[0] + 0.01).abs() < 1e-9 && (q[1] - 0.01).abs() < 1e-9);
        assert_eq!(q[0], -q[1]);
    }

    #[test]
    fn non_finite_gradient_rejected() {
        let mut p = vec![0.0];
        assert!(Adam::new(0.01, 1).step(&mut p, &[f64::NAN]).is_err());
        assert!(Adadelta::new(0.01, 1).step(&mut p, &[f64::INFINITY]).is_err());
    }

    #[test]
    fn adadelta_single_step_matches_recurrences() {
        let (lr, rho, eps, g) = (0.5, 0.9, 1e-6, 2.0);
        let mut p = vec![1.0];
        Adadelta::new(lr, 1).step(&mut p, &[g]).unwrap();
        let sq = (1.0 - rho) * g * g;
        let delta = (0.0 + eps as f64).sqrt() / (sq + eps).sqrt() * g;
        assert!((p[0] - (1.0 - lr * delta)).abs() < 1e-12);
    }

    #[test]
    fn adadelta_zero_gradient_and_drift_sign() {
        let mut opt = Adadelta::new(0.001, 1);
        let mut p = vec![2.0];
        for _ in 0..50 {
            opt.step(&mut p, &[0.0]).unwrap();
        }
        assert_eq!(p, vec![2.0]);
        let mut opt = Adadelta::new(0.001, 1);
        let mut last = p[0];
        for _ in 0..200 {
            opt.step(&mut p, &[3.0]).unwrap();
            assert!(p[0] < last);
            last = p[0];
        }
    }

    #[test]
    fn adam_solves_2d_quadratic() {
        // f = (x-1)^2 + 10 (y+2)^2
        let mut p = vec![0.0, 0.0];
        let mut opt = Adam::new(0.01, 2);
        let f = |p: &[f64]| (p[0] - 1.0).powi(2) + 10.0 * (p[1] + 2.0).powi(2);
        let mut steps = 0;
        while f(&p) >= 1e-6 && steps < 5000 {
            let g = [2.0 * (p[0] - 1.0), 20.0 * (p[1] + 2.0)];
            opt.step(&mut p, &g).unwrap();
            steps += 1;
        }
        assert!(f(&p) < 1e-6, "loss {} after {steps}", f(&p));
    }

    #[test]
    fn early_stop_patience_rule() {
        let vals = [1.0, 0.9, 0.95, 0.96, 0.94];
        let mut es = EarlyStop::new(2, f64::INFINITY, &[0.0]);
        let mut stopped_at = None;
        for (i, v) in vals.iter().enumerate() {
            let epoch = i + 1;
            if es.observe(epoch, *v, &[epoch as f64]) {
                stopped_at = Some(epoch);
                break;
            }
        }
        assert_eq!(stopped_at, Some(4));
        assert_eq!(es.best_params, vec![2.0]);
        assert_eq!(es.best_loss, 0.9);
    }

    struct Quadratic {
        target: Vec<f64>,
    }

    impl Objective for Quadratic {
        fn n_units(&self) -> usize {
            self.target.len()
        }
        fn loss_grad(&self, p: &[f64], batch: &[usize], _: &mut Rng) -> Result<(f64, Vec<f64>)> {
            let mut g = vec![0.0; p.len()];
            let mut l = 0.0;
            for &i in batch {
                l += (p[0] - self.target[i]).powi(2);
                g[0] += 2.0 * (p[0] - self.target[i]);
            }
            let n = batch.len() as f64;
            g[0] /= n;
            Ok((l / n, g))
        }
        fn val_loss(&self, p: &[f64]) -> Result<f64> {
            let all: Vec<usize> = (0..self.target.len()).collect();
            Ok(self.loss_grad(p, &all, &mut substream(0, "x"))?.0)
        }
    }

    #[test]
    fn sgd_descends_and_is_deterministic() {
        let obj = Quadratic {
            target: (0..50).map(|i| (i as f64 * 0.7).sin()).collect(),
        };
        let cfg = TrainConfig {
            batch_size: 8,
            max_epochs: 30,
            patience: 5,
        };
        let init = obj.val_loss(&[3.0]).unwrap();
        let run = |seed| {
            let mut opt = Sgd { lr: 0.05 };
            train_loop(&obj, vec![3.0], &mut opt, &cfg, &mut substream(seed, "shuffle")).unwrap()
        };
        let a = run(1);
        let b = run(1);
        assert!(obj.val_loss(&a.params).unwrap() < init);
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.params, b.params);
    }

    struct Scripted {
        vals: Mutex<Vec<f64>>,
    }

    impl Objective for Scripted {
        fn n_units(&self) -> usize {
            1
        }
        fn loss_grad(&self, _: &[f64], _: &[usize], _: &mut Rng) -> Result<(f64, Vec<f64>)> {
            Ok((0.0, vec![-1.0]))
        }
        fn val_loss(&self, _: &[f64]) -> Result<f64> {
            Ok(self.vals.lock().unwrap().remove(0))
        }
    }

    #[test]
    fn train_loop_restores_best_epoch() {
        // First value is the starting point, then epochs 1..5.
        let obj = Scripted {
            vals: Mutex::new(vec![2.0, 1.0, 0.9, 0.95, 0.96, 0.94]),
        };
        let mut opt = Sgd { lr: 1.0 };
        let cfg = TrainConfig {
            batch_size: 1,
            max_epochs: 100,
            patience: 2,
        };
        let out = train_loop(&obj, vec![0.0], &mut opt, &cfg, &mut substream(0, "s")).unwrap();
        assert_eq!(out.trace.len(), 4);
        assert_eq!(out.params, vec![2.0]); // parameter value after epoch 2
        assert_eq!(out.best_val, 0.9);
    }

    #[test]
    fn batches_form_a_permutation() {
        let mut rng = substream(4, "s");
        for n in [1, 7, 200, 1001] {
            let mut seen: Vec<usize> = epoch_batches(n, 64, &mut rng).concat();
            seen.sort_unstable();
            assert_eq!(seen, (0..n).collect::<Vec<_>>());
        }
    }

    #[test]
    fn empty_data_rejected() {
        let obj = Quadratic { target: vec![] };
        let mut opt = Sgd { lr: 0.1 };
        let r = train_loop(&obj, vec![0.0], &mut opt, &TrainConfig::default(), &mut substream(0, "s"));
        assert!(matches!(r, Err(Error::Parameter(_))));
    }

    #[test]
    fn ladder_rejects_empty() {
        assert!(LrLadder::new(vec![]).is_err());
        assert_eq!(LrLadder::quintile_default().0.len(), 7);
    }
}
