//! Portfolio scaling, information ratio and a leaderboard competition
//! simulator with a rank-driven short policy.

mod ir;
mod sim;

pub use ir::{
    decompose, information_ratio, linear_fit, ratio, round_log_return, sample_sd, scaling_curve,
    PortfolioWeights, ScalingCurve,
};
pub use sim::{
    adversarial_policy, default_alpha_grid, ranks, scaling_study, simulate_competition, simulate_once, write_sim_outputs, PairedDifference, Policy,
    PolicyState, PolicySummary, ReplicationResult, RoundMarket, ScalingStudy, SimConfig, SimOutcome, SimSummary, Thresholds,
    TopK, SHORT_LADDER, TOP_K,
};
