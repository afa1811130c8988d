use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{LossKind, N_QUINTILES};
use crate::mtms::{train_phase1, train_phase2, Connection, MtMsModel, NormStats, Phase1Config, Phase2Config};
use crate::nn::{Activation, InitScheme, MlpSpec, OutputTransform};
use crate::optimize::{TraceRow, TrainConfig};
use crate::quintile::{
    augment_time_shift, build_features, evaluate_rps, feature_names, prepare, synth_market, FeatureRow,
    FeaturePipeline, MarketConfig, RpsEvaluation, SplitWeeks, MIN_HISTORY,
};
use crate::rng::substream;

use super::report::BenchmarkReport;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuintileConfig {
    pub n_assets: usize,
    pub n_weeks: usize,
    pub val_weeks: usize,
    pub test_weeks: usize,
    pub market: MarketConfig,
    pub hidden: Vec<usize>,
    pub dropout: f64,
    pub d_theta: usize,
    pub phase1: Phase1Config,
    pub phase2: Phase2Config,
}

impl Default for QuintileConfig {
    fn default() -> Self {
        Self {
            n_assets: 1000,
            n_weeks: 320,
            val_weeks: 32,
            test_weeks: 96,
            market: MarketConfig::heterogeneous(),
            hidden: vec![32, 8],
            dropout: 0.2,
            d_theta: 1,
            phase1: Phase1Config {
                lr: 0.01,
                init: InitScheme::XavierUniform,
                train: TrainConfig {
                    batch_size: 200,
                    max_epochs: 200,
                    patience: 10,
                },
            },
            phase2: Phase2Config::default(),
        }
    }
}

impl QuintileConfig {
    pub fn split(&self) -> Result<SplitWeeks> {
        let need = MIN_HISTORY + self.val_weeks + self.test_weeks;
        if self.n_weeks <= need {
            return Err(Error::Parameter(format!(
                "{} weeks leave no training intervals; need more than {need}",
                self.n_weeks
            )));
        }
        Ok(SplitWeeks {
            val_start: self.n_weeks - self.test_weeks - self.val_weeks,
            test_start: self.n_weeks - self.test_weeks,
        })
    }
}

pub struct QuintileRun {
    pub report: BenchmarkReport,
    pub eval: RpsEvaluation,
    pub model: MtMsModel,
    pub pipeline: FeaturePipeline,
    /// Primary-universe test rows with imputed, unscaled features.
    pub test_rows: Vec<FeatureRow>,
    pub trace: Vec<TraceRow>,
}

pub fn quintile_base_spec(n_features: usize, hidden: &[usize], dropout: f64) -> Result<MlpSpec> {
    let mut sizes = vec![n_features];
    sizes.extend_from_slice(hidden);
    sizes.push(N_QUINTILES);
    MlpSpec::new(sizes, Activation::LeakyRelu, OutputTransform::Softmax, dropout)
}

/// Synthetic market, four shifted interval grids, features, pooled then
/// joint training under RPS, and RPS on the held-out primary universe.
pub fn run_quintile(config: &QuintileConfig, seed: u64) -> Result<QuintileRun> {
    let start = Instant::now();
    let split = config.split()?;
    let market = synth_market(config.n_assets, config.n_weeks, seed, &config.market)?;
    let grids = augment_time_shift(config.n_weeks, MIN_HISTORY);
    let table = build_features(&market, &grids)?;
    let data = prepare(&table, config.n_assets, split)?;
    log::info!(
        "quintile: {} rows, {} test rows, built in {:.1}s",
        table.rows.len(),
        data.test.len(),
        start.elapsed().as_secs_f64()
    );

    let base = quintile_base_spec(feature_names().len(), &config.hidden, config.dropout)?;
    let (beta, mut trace) = train_phase1(
        &data.bundle,
        &base,
        LossKind::Rps,
        &config.phase1,
        &mut substream(seed, "phase1"),
    )?;
    let meta = MlpSpec::new(
        vec![config.d_theta, Connection::FinalLayer.indices(&base)?.len()],
        Activation::None,
        OutputTransform::None,
        0.0,
    )?;
    let mut norm_stats: NormStats = data.pipeline.norm.clone();
    norm_stats.overrides = data.overrides.clone();
    let init = MtMsModel::from_pooled(
        base,
        meta,
        Connection::FinalLayer,
        &beta,
        data.bundle.len(),
        config.phase2.meta_init,
        norm_stats,
        &mut substream(seed, "init"),
    )?;
    let (model, trace2) = train_phase2(
        &data.bundle,
        &init,
        LossKind::Rps,
        &config.phase2,
        &mut substream(seed, "phase2"),
    )?;
    let offset = trace.len();
    trace.extend(trace2.into_iter().map(|mut r| {
        r.epoch += offset;
        r
    }));

    let eval = evaluate_rps(&model, &data.test)?;
    let mut report = BenchmarkReport::new(
        "mtms_rps",
        "rps",
        eval.per_asset.iter().map(|(_, v)| *v).collect(),
        seed,
        serde_json::to_value(config)?,
    )?;
    report.runtime_secs = start.elapsed().as_secs_f64();
    log::info!(
        "quintile: rps {:.5} over {} test rows, {} epochs, {:.1}s",
        eval.aggregate,
        data.test.len(),
        trace.len(),
        report.runtime_secs
    );
    Ok(QuintileRun {
        report,
        eval,
        model,
        pipeline: data.pipeline,
        test_rows: data.test,
        trace,
    })
}
