//! Synthetic weekly market, quintile labels, features and RPS evaluation
//! for cross-sectional return-quintile forecasting.

mod dataset;
mod eval;
mod features;
mod labels;
mod market;

pub use dataset::{build_features, prepare, FeatureRow, FeatureTable, Part, PreparedData, SplitWeeks};
pub use eval::{
    evaluate_predictions, evaluate_rps, predict_rows, read_feature_csv, write_feature_csv, write_submission,
    RpsEvaluation, ScatterPoint,
};
pub use features::{feature_names, AssetHistory, FeaturePipeline, MIN_HISTORY, N_LAGS};
pub use labels::{augment_time_shift, augment_universes, quintile_labels, IntervalGrid, INTERVAL_WEEKS};
pub use market::{realized_vol_dispersion, synth_market, Market, MarketConfig, UNIVERSE_SIZE};
