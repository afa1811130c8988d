use std::io::Write;
use std::path::Path;

use rand::seq::index::sample;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{substream_indexed, Rng};

use super::ir::{linear_fit, ratio, sample_sd, scaling_curve, ScalingCurve};

/// Four-week simple returns from one common factor plus idiosyncratic
/// noise, log-normal per asset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundMarket {
    pub n_assets: usize,
    pub drift: f64,
    pub factor_vol: f64,
    pub idio_vol: f64,
    pub beta_sd: f64,
}

impl Default for RoundMarket {
    fn default() -> Self {
        Self {
            n_assets: 100,
            drift: 0.01,
            factor_vol: 0.045,
            idio_vol: 0.08,
            beta_sd: 0.3,
        }
    }
}

impl RoundMarket {
    pub fn draw_betas(&self, rng: &mut Rng) -> Vec<f64> {
        (0..self.n_assets).map(|_| 1.0 + self.beta_sd * normal(rng)).collect()
    }

    pub fn draw_round(&self, betas: &[f64], rng: &mut Rng) -> Vec<f64> {
        let f = self.drift + self.factor_vol * normal(rng);
        betas
            .iter()
            .map(|b| (b * f + self.idio_vol * normal(rng) - 0.5 * self.idio_vol * self.idio_vol).exp() - 1.0)
            .collect()
    }

    /// `n_rounds x n_assets` simple returns.
    pub fn draw_path(&self, n_rounds: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
        let betas = self.draw_betas(rng);
        (0..n_rounds).map(|_| self.draw_round(&betas, rng)).collect()
    }
}

fn normal(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Leaderboard ranks at or below `safe` stay fully long, ranks up to
/// `risky` short 10 assets, and worse ranks short everything.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Thresholds {
    pub safe: usize,
    pub risky: usize,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self { safe: 20, risky: 80 }
    }
}

pub const SHORT_LADDER: [usize; 3] = [0, 10, 100];

pub fn adversarial_policy(rank: usize, n_participants: usize, t: Thresholds) -> Result<usize> {
    if t.safe == 0 || t.safe > t.risky || t.risky > n_participants {
        return Err(Error::Parameter(format!(
            "thresholds {}/{} invalid for {n_participants} participants",
            t.safe, t.risky
        )));
    }
    if rank == 0 || rank > n_participants {
        return Err(Error::Parameter(format!("rank {rank} outside 1..={n_participants}")));
    }
    Ok(if rank <= t.safe {
        SHORT_LADDER[0]
    } else if rank <= t.risky {
        SHORT_LADDER[1]
    } else {
        SHORT_LADDER[2]
    })
}

/// Our position in one round. Every asset carries `magnitude`; only signs
/// change.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyState {
    pub current_rank: usize,
    pub target_rank: usize,
    pub round: usize,
    pub n_short: usize,
    pub magnitude: f64,
}

impl PolicyState {
    pub fn n_long(&self, n_assets: usize) -> usize {
        n_assets - self.n_short
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    StaticLong,
    Adaptive,
}

impl Policy {
    pub fn name(self) -> &'static str {
        match self {
            Policy::StaticLong => "static_long",
            Policy::Adaptive => "adaptive",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub n_participants: usize,
    pub n_rounds: usize,
    pub replications: usize,
    pub thresholds: Thresholds,
    pub magnitude: f64,
    /// Shorted assets in every competitor portfolio.
    pub competitor_shorts: usize,
    /// Per-round return noise from each participant's own asset selection,
    /// as a multiple of its gross exposure.
    pub selection_noise: f64,
    pub market: RoundMarket,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n_participants: 163,
            n_rounds: 12,
            replications: 10_000,
            thresholds: Thresholds::default(),
            magnitude: 0.0025,
            competitor_shorts: 0,
            selection_noise: 0.01,
            market: RoundMarket::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplicationResult {
    pub final_rank: usize,
    pub final_ir: f64,
    pub cumulative_return: f64,
    /// Shorts we held in each round.
    pub shorts: Vec<usize>,
}

/// Score used for the leaderboard: the ratio once two rounds exist, the
/// summed log return before that.
fn leaderboard_score(rets: &[f64]) -> f64 {
    if rets.len() < 2 {
        return rets.iter().sum();
    }
    ratio(rets).unwrap_or(0.0)
}

/// Ranks `1..=n`, best score first; equal scores go to the lower index.
pub fn ranks(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut out = vec![0; scores.len()];
    for (r, &i) in order.iter().enumerate() {
        out[i] = r + 1;
    }
    out
}

/// `magnitude * (Σ r - 2 Σ_{shorted} r)`.
fn book_return(returns: &[f64], shorted: &[usize], magnitude: f64) -> f64 {
    let total: f64 = returns.iter().sum();
    let short: f64 = shorted.iter().map(|&i| returns[i]).sum();
    magnitude * (total - 2.0 * short)
}

/// One competition. We are participant 0. The market, the competitors and
/// the selection noise come from `world`; our short picks come from `own`,
/// so two policies run on the same world see identical competitors.
pub fn simulate_once(policy: Policy, config: &SimConfig, world: &mut Rng, own: &mut Rng) -> Result<ReplicationResult> {
    let n = config.n_participants;
    let n_assets = config.market.n_assets;
    if config.competitor_shorts > n_assets {
        return Err(Error::Parameter("more competitor shorts than assets".into()));
    }
    let alpha = config.magnitude * n_assets as f64;
    let betas = config.market.draw_betas(world);
    let mut rets = vec![Vec::with_capacity(config.n_rounds); n];
    let mut state = PolicyState {
        current_rank: (n + 1) / 2,
        target_rank: config.thresholds.safe,
        round: 0,
        n_short: 0,
        magnitude: config.magnitude,
    };
    let mut shorts = Vec::with_capacity(config.n_rounds);
    let mut simple = 1.0;
    let mut current = vec![0; n];
    for t in 0..config.n_rounds {
        state.round = t;
        state.n_short = match policy {
            Policy::StaticLong => 0,
            Policy::Adaptive if t == 0 => 0,
            Policy::Adaptive => adversarial_policy(state.current_rank, n, config.thresholds)?,
        };
        let r = config.market.draw_round(&betas, world);
        for (p, series) in rets.iter_mut().enumerate() {
            let shorted: Vec<usize> = if p == 0 {
                sample(own, n_assets, state.n_short).into_vec()
            } else {
                sample(world, n_assets, config.competitor_shorts).into_vec()
            };
            let noise = config.selection_noise * alpha * normal(world);
            let x = book_return(&r, &shorted, config.magnitude) + noise;
            if !(x > -1.0) {
                return Err(Error::Degenerate(format!("participant {p} lost everything in round {t}")));
            }
            if p == 0 {
                simple *= 1.0 + x;
            }
            series.push(x.ln_1p());
        }
        let scores: Vec<f64> = rets.iter().map(|s| leaderboard_score(s)).collect();
        current = ranks(&scores);
        state.current_rank = current[0];
        shorts.push(state.n_short);
    }
    Ok(ReplicationResult {
        final_rank: current[0],
        final_ir: leaderboard_score(&rets[0]),
        cumulative_return: simple - 1.0,
        shorts,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopK {
    pub k: usize,
    pub p: f64,
    pub se: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicySummary {
    pub policy: Policy,
    pub top_k: Vec<TopK>,
    pub mean_return: f64,
    pub return_se: f64,
    pub mean_rank: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedDifference {
    pub k: usize,
    /// Adaptive minus static probability of finishing in the top `k`.
    pub diff: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimSummary {
    pub policies: Vec<PolicySummary>,
    pub top20_difference: PairedDifference,
    pub return_difference: f64,
    pub return_difference_se: f64,
    pub replications: usize,
    pub seed: u64,
}

pub struct SimOutcome {
    pub static_runs: Vec<ReplicationResult>,
    pub adaptive_runs: Vec<ReplicationResult>,
    pub summary: SimSummary,
}

pub const TOP_K: [usize; 4] = [1, 5, 10, 20];

fn summarize(policy: Policy, runs: &[ReplicationResult]) -> PolicySummary {
    let n = runs.len() as f64;
    let top_k = TOP_K
        .iter()
        .map(|&k| {
            let p = runs.iter().filter(|r| r.final_rank <= k).count() as f64 / n;
            TopK {
                k,
                p,
                se: (p * (1.0 - p) / n).sqrt(),
            }
        })
        .collect();
    let rets: Vec<f64> = runs.iter().map(|r| r.cumulative_return).collect();
    PolicySummary {
        policy,
        top_k,
        mean_return: rets.iter().sum::<f64>() / n,
        return_se: if runs.len() > 1 { sample_sd(&rets) / n.sqrt() } else { 0.0 },
        mean_rank: runs.iter().map(|r| r.final_rank as f64).sum::<f64>() / n,
    }
}

/// Runs both policies on the same simulated worlds. Replication `i` draws
/// from its own substreams, so the result does not depend on threading.
pub fn simulate_competition(config: &SimConfig, seed: u64) -> Result<SimOutcome> {
    if config.replications == 0 || config.n_rounds == 0 || config.n_participants < 2 {
        return Err(Error::Parameter(
            "need at least one replication, one round and two participants".into(),
        ));
    }
    let pairs: Vec<Result<(ReplicationResult, ReplicationResult)>> = (0..config.replications)
        .into_par_iter()
        .map(|i| {
            let i = i as u64;
            let a = simulate_once(
                Policy::StaticLong,
                config,
                &mut substream_indexed(seed, "world", i),
                &mut substream_indexed(seed, "own", i),
            )?;
            let b = simulate_once(
                Policy::Adaptive,
                config,
                &mut substream_indexed(seed, "world", i),
                &mut substream_indexed(seed, "own", i),
            )?;
            Ok((a, b))
        })
        .collect();
    let mut static_runs = Vec::with_capacity(config.replications);
    let mut adaptive_runs = Vec::with_capacity(config.replications);
    for p in pairs {
        let (a, b) = p?;
        static_runs.push(a);
        adaptive_runs.push(b);
    }
    let n = config.replications as f64;
    let d20: Vec<f64> = static_runs
        .iter()
        .zip(&adaptive_runs)
        .map(|(s, a)| f64::from(u8::from(a.final_rank <= 20)) - f64::from(u8::from(s.final_rank <= 20)))
        .collect();
    let diff = d20.iter().sum::<f64>() / n;
    let half = if d20.len() > 1 { 1.96 * sample_sd(&d20) / n.sqrt() } else { 0.0 };
    let dret: Vec<f64> = static_runs
        .iter()
        .zip(&adaptive_runs)
        .map(|(s, a)| a.cumulative_return - s.cumulative_return)
        .collect();
    let summary = SimSummary {
        policies: vec![
            summarize(Policy::StaticLong, &static_runs),
            summarize(Policy::Adaptive, &adaptive_runs),
        ],
        top20_difference: PairedDifference {
            k: 20,
            diff,
            ci_low: diff - half,
            ci_high: diff + half,
        },
        return_difference: dret.iter().sum::<f64>() / n,
        return_difference_se: if dret.len() > 1 { sample_sd(&dret) / n.sqrt() } else { 0.0 },
        replications: config.replications,
        seed,
    };
    Ok(SimOutcome {
        static_runs,
        adaptive_runs,
        summary,
    })
}

/// `<dir>/portfolio_sim.csv` and `<dir>/portfolio_sim_summary.json`.
pub fn write_sim_outputs(dir: &Path, outcome: &SimOutcome) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join("portfolio_sim.csv"))?);
    writeln!(f, "policy,replication,final_rank,final_IR,cumulative_return")?;
    for (policy, runs) in [
        (Policy::StaticLong, &outcome.static_runs),
        (Policy::Adaptive, &outcome.adaptive_runs),
    ] {
        for (i, r) in runs.iter().enumerate() {
            writeln!(
                f,
                "{},{i},{},{},{}",
                policy.name(),
                r.final_rank,
                r.final_ir,
                r.cumulative_return
            )?;
        }
    }
    f.flush()?;
    std::fs::write(
        dir.join("portfolio_sim_summary.json"),
        serde_json::to_string_pretty(&outcome.summary)? + "\n",
    )?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingStudy {
    pub n_paths: usize,
    /// Share of paths where IR at scale 0.25 beats IR at scale 1.
    pub share_quarter_beats_full: f64,
    /// Fit of the path-averaged IR curve.
    pub mean_curve: ScalingCurve,
    /// Share of paths whose own curve is strictly decreasing.
    pub share_decreasing: f64,
}

/// Equal-weight long portfolio on `n_paths` simulated return paths.
pub fn scaling_study(market: &RoundMarket, n_paths: usize, n_rounds: usize, alphas: &[f64], seed: u64) -> Result<ScalingStudy> {
    if n_paths == 0 {
        return Err(Error::Parameter("no paths".into()));
    }
    let n = market.n_assets;
    let w_tilde = vec![vec![1.0 / n as f64; n]; n_rounds];
    let curves = (0..n_paths)
        .into_par_iter()
        .map(|i| {
            let path = market.draw_path(n_rounds, &mut substream_indexed(seed, "path", i as u64));
            let c = scaling_curve(&w_tilde, &path, alphas)?;
            let q = scaling_curve(&w_tilde, &path, &[0.25, 1.0])?;
            Ok((c, q.ir[0] > q.ir[1]))
        })
        .collect::<Result<Vec<(ScalingCurve, bool)>>>()?;
    let mean_ir: Vec<f64> = (0..alphas.len())
        .map(|j| curves.iter().map(|(c, _)| c.ir[j]).sum::<f64>() / n_paths as f64)
        .collect();
    let (slope, intercept, r_squared) = linear_fit(alphas, &mean_ir);
    Ok(ScalingStudy {
        n_paths,
        share_quarter_beats_full: curves.iter().filter(|(_, b)| *b).count() as f64 / n_paths as f64,
        mean_curve: ScalingCurve {
            alphas: alphas.to_vec(),
            ir: mean_ir,
            slope,
            intercept,
            r_squared,
        },
        share_decreasing: curves
            .iter()
            .filter(|(c, _)| c.ir.windows(2).all(|w| w[1] < w[0]))
            .count() as f64
            / n_paths as f64,
    })
}

/// Twenty evenly spaced scales from 0.05 to 1.
pub fn default_alpha_grid() -> Vec<f64> {
    (1..=20).map(|i| 0.05 * i as f64).collect()
}
