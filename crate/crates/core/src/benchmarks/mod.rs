//! End-to-end experiment drivers.

mod m4like;
mod quintile;
mod report;
mod sine;

pub use m4like::{run_m4like, run_m4like_on, synth_series, M4Config, M4Run, SeriesFamilies, M4_FREQUENCY};
pub use quintile::{quintile_base_spec, run_quintile, QuintileConfig, QuintileRun};
pub use report::{mean_ci, write_reports, BenchmarkReport};
pub use sine::{base_spec as sine_base_spec, run_sinusoidal, sweep_mesa, MesaCurve, SineConfig, SineRun, SineTask};
