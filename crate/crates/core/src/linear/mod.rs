//! Linear base models whose coefficients are an affine function of a
//! per-series mesa vector, fitted in closed form, plus the pooled, per-series
//! and clustered least-squares baselines.

mod als;
mod cluster;
mod finetune;
mod series;

pub use als::{
    adapt_series, als_fit, forecast_recursive, pooled_ols, series_ols, AlsConfig, AlsFit, LinearMtMs,
};
pub use cluster::{acf, cluster_fit, seasonal_strength, series_features, trend_strength, ClusterModel};
pub use finetune::{finetune_mase, in_sample_mase, FineTuneConfig};
pub use series::{read_series_csv, write_series_csv, LaggedSeries, SeriesSet};
