//! Hypernetwork models: a shared meta module `g(θ; ω)` emits (part of) the
//! parameters of a base network `f`, and each task owns a low-dimensional
//! mesa vector `θ`.

mod adapt;
mod checkpoint;
mod model;
mod prop1;
mod train;

pub use adapt::{adapt_new_task, AdaptConfig, Adaptation};
pub use checkpoint::{from_json, load_checkpoint, save_checkpoint, to_json, CHECKPOINT_VERSION};
pub use model::{Connection, MtMsModel, NormStats, PredictionOverride, Task, TaskBundle};
pub use prop1::{prop1_oracle, random_table, LossTable, Prop1Outcome};
pub use train::{mean_train_loss, train_phase1, train_phase2, Phase1Config, Phase2Config};

#[cfg(test)]
pub(crate) mod fixtures {
    use rand::Rng as _;
    use rand_distr::{Distribution, StandardNormal};

    use super::*;
    use crate::autodiff::Array2;
    use crate::nn::{Activation, MlpSpec, OutputTransform, ParamVector};
    use crate::rng::substream;

    /// `y = slope * x + intercept + noise`, `x ~ U(-2, 2)`, all rows train.
    pub fn line_task(slope: f64, intercept: f64, n: usize, noise: f64, seed: u64) -> Task {
        let mut rng = substream(seed, "line");
        let xs: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let ys: Vec<f64> = xs
            .iter()
            .map(|x| {
                let e: f64 = StandardNormal.sample(&mut rng);
                slope * x + intercept + noise * e
            })
            .collect();
        Task::new(Array2::column_vector(xs), Array2::column_vector(ys), n).unwrap()
    }

    pub fn ols_line(task: &Task) -> (f64, f64) {
        let n = task.n_rows() as f64;
        let (x, y) = (task.x.data(), task.y.data());
        let mx = x.iter().sum::<f64>() / n;
        let my = y.iter().sum::<f64>() / n;
        let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
        let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
        let a = sxy / sxx;
        (a, my - a * mx)
    }

    /// Linear base, affine meta module with `slope = θ`, tasks `y = ±x`.
    pub fn two_line_model() -> (MtMsModel, TaskBundle) {
        let base = MlpSpec::new(vec![1, 1], Activation::None, OutputTransform::None, 0.0).unwrap();
        let meta = MlpSpec::new(vec![1, 2], Activation::None, OutputTransform::None, 0.0).unwrap();
        let omega = ParamVector::from_flat(&meta, vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let model = MtMsModel::new(
            base,
            meta,
            Connection::FinalLayer,
            omega,
            vec![],
            Array2::new(2, 1, vec![1.0, -1.0]).unwrap(),
            NormStats::identity(1),
        )
        .unwrap();
        let bundle = TaskBundle::new(vec![line_task(1.0, 0.0, 12, 0.0, 1), line_task(-1.0, 0.0, 12, 0.0, 2)]).unwrap();
        (model, bundle)
    }
}
