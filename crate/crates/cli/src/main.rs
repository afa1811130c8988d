//! `mtms`: runs the benchmarks, the finite-case oracle and the portfolio
//! simulators, and fits or applies saved models.

mod config;

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context as _;
use clap::{CommandFactory, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use mtms_core::autodiff::Array2;
use mtms_core::benchmarks::{
    run_m4like, run_quintile, run_sinusoidal, sweep_mesa, write_reports, M4Config, QuintileConfig, SeriesFamilies,
    SineConfig,
};
use mtms_core::losses::LossKind;
use mtms_core::mtms::{adapt_new_task, load_checkpoint, prop1_oracle, random_table, save_checkpoint, AdaptConfig, Task};
use mtms_core::nn::OutputTransform;
use mtms_core::optimize::write_trace_csv;
use mtms_core::portfolio::{
    default_alpha_grid, scaling_study, simulate_competition, write_sim_outputs, RoundMarket, SimConfig,
};
use mtms_core::quintile::{
    feature_names, predict_rows, read_feature_csv, write_feature_csv, write_submission, MarketConfig,
};
use mtms_core::rng::{substream, substream_indexed};

/// Bad invocation or configuration; exits with status 1.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Parser, Debug)]
#[command(name = "mtms", version, about = "Hypernetwork meta-learning benchmarks and tools")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Root seed; every random stream is derived from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "results")]
    out: PathBuf,
    /// Flat `key = value` config file, e.g. a snapshot of an earlier run.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Config override `key=value`; repeatable, applied after the file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Worker threads for parallel sections.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Families {
    Homogeneous,
    ArAndSeasonal,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum MarketKind {
    Heterogeneous,
    Homogeneous,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Few-shot sine regression.
    Sin {
        /// Observed points per task.
        #[arg(long)]
        k: Option<usize>,
    },
    /// Synthetic monthly forecasting: pooled, clustered and linear MtMs.
    M4like {
        #[arg(long, value_enum)]
        families: Option<Families>,
    },
    /// Synthetic quintile forecasting scored by RPS.
    Quintile {
        #[arg(long, value_enum)]
        market: Option<MarketKind>,
    },
    /// Bilevel versus single-level argmin on random finite instances.
    Prop1 {
        #[arg(long)]
        instances: usize,
    },
    /// Information ratio against gross exposure on simulated paths.
    PortfolioScale {
        #[arg(long)]
        paths: Option<usize>,
    },
    /// Leaderboard competition with a rank-driven short policy.
    PortfolioSim {
        #[arg(long)]
        replications: Option<usize>,
    },
    /// Fits a mesa vector for a new task with the meta module frozen.
    Adapt {
        #[arg(long)]
        checkpoint: PathBuf,
        /// CSV with a header: input columns, then target columns.
        #[arg(long)]
        data: PathBuf,
        /// Leading rows used for fitting; the rest are scored.
        #[arg(long)]
        k: Option<usize>,
    },
    /// Quintile probabilities for every row of a feature CSV.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        features: PathBuf,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Sin { .. } => "sin",
            Command::M4like { .. } => "m4like",
            Command::Quintile { .. } => "quintile",
            Command::Prop1 { .. } => "prop1",
            Command::PortfolioScale { .. } => "portfolio-scale",
            Command::PortfolioSim { .. } => "portfolio-sim",
            Command::Adapt { .. } => "adapt",
            Command::Predict { .. } => "predict",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Prop1Config {
    instances: usize,
    n_omega: usize,
    n_theta: usize,
    n_tasks: usize,
}

impl Default for Prop1Config {
    fn default() -> Self {
        Self {
            instances: 100,
            n_omega: 4,
            n_theta: 3,
            n_tasks: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ScaleConfig {
    paths: usize,
    rounds: usize,
    alphas: Vec<f64>,
    market: RoundMarket,
}

impl Default for ScaleConfig {
    fn default() -> Self {
        Self {
            paths: 1000,
            rounds: 12,
            alphas: default_alpha_grid(),
            market: RoundMarket::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct PredictConfig {}

/// Config file and `--set` overrides, with the file's `seed` split out.
struct Layers {
    seed: Option<u64>,
    overrides: Vec<config::Override>,
}

fn layers(cli: &Cli) -> anyhow::Result<Layers> {
    let mut overrides = match &cli.config {
        Some(p) => config::read_file(p)?,
        None => Vec::new(),
    };
    for s in &cli.set {
        overrides.push(config::parse_set(s)?);
    }
    let mut seed = None;
    let mut rest = Vec::with_capacity(overrides.len());
    for (k, v) in overrides {
        if k == "seed" {
            let s = v
                .as_integer()
                .filter(|s| *s >= 0)
                .ok_or_else(|| UsageError(format!("seed must be a non-negative integer, got {v}")))?;
            seed = Some(s as u64);
        } else {
            rest.push((k, v));
        }
    }
    Ok(Layers { seed, overrides: rest })
}

struct Ctx {
    seed: u64,
    out: PathBuf,
    name: &'static str,
}

impl Ctx {
    fn path(&self, file: &str) -> PathBuf {
        self.out.join(file)
    }

    fn snapshot<T: Serialize>(&self, config: &T) -> anyhow::Result<()> {
        std::fs::create_dir_all(&self.out).with_context(|| format!("creating {}", self.out.display()))?;
        let text = config::snapshot(self.seed, config)?;
        std::fs::write(self.path(&format!("{}_config.toml", self.name)), text)?;
        Ok(())
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(UsageError("--threads must be at least 1".into()).into());
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    let l = layers(&cli)?;
    let ctx = Ctx {
        seed: cli.seed.or(l.seed).unwrap_or(0),
        out: cli.out.clone(),
        name: cli.command.name(),
    };
    match &cli.command {
        Command::Sin { k } => {
            let mut cfg: SineConfig = config::apply(&SineConfig::default(), &l.overrides)?;
            if let Some(k) = k {
                cfg.k = *k;
            }
            ctx.snapshot(&cfg)?;
            sin(&ctx, &cfg)
        }
        Command::M4like { families } => {
            let mut cfg: M4Config = config::apply(&M4Config::default(), &l.overrides)?;
            if let Some(f) = families {
                cfg.families = match f {
                    Families::Homogeneous => SeriesFamilies::Homogeneous,
                    Families::ArAndSeasonal => SeriesFamilies::ArAndSeasonal,
                };
            }
            ctx.snapshot(&cfg)?;
            let run = run_m4like(&cfg, ctx.seed)?;
            write_reports(&ctx.out, "m4like", &run.reports)?;
            for r in &run.reports {
                println!("{:<14} mase {:.4} ± {:.4}", r.method, r.mean, r.ci_half_width);
            }
            if !run.skipped.is_empty() {
                println!("{} series skipped as too short", run.skipped.len());
            }
            Ok(())
        }
        Command::Quintile { market } => {
            let mut cfg: QuintileConfig = config::apply(&QuintileConfig::default(), &l.overrides)?;
            if let Some(m) = market {
                cfg.market = match m {
                    MarketKind::Heterogeneous => MarketConfig::heterogeneous(),
                    MarketKind::Homogeneous => MarketConfig::homogeneous(),
                };
            }
            ctx.snapshot(&cfg)?;
            quintile(&ctx, &cfg)
        }
        Command::Prop1 { instances } => {
            let mut cfg: Prop1Config = config::apply(&Prop1Config::default(), &l.overrides)?;
            cfg.instances = *instances;
            ctx.snapshot(&cfg)?;
            prop1(&ctx, &cfg)
        }
        Command::PortfolioScale { paths } => {
            let mut cfg: ScaleConfig = config::apply(&ScaleConfig::default(), &l.overrides)?;
            if let Some(p) = paths {
                cfg.paths = *p;
            }
            ctx.snapshot(&cfg)?;
            portfolio_scale(&ctx, &cfg)
        }
        Command::PortfolioSim { replications } => {
            let mut cfg: SimConfig = config::apply(&SimConfig::default(), &l.overrides)?;
            if let Some(r) = replications {
                cfg.replications = *r;
            }
            ctx.snapshot(&cfg)?;
            let out = simulate_competition(&cfg, ctx.seed)?;
            write_sim_outputs(&ctx.out, &out)?;
            let s = &out.summary;
            for p in &s.policies {
                let top20 = p.top_k.iter().find(|t| t.k == 20).map_or(f64::NAN, |t| t.p);
                println!(
                    "{:<12} P(top-20) {:.4}  mean return {:.4}  mean rank {:.1}",
                    p.policy.name(),
                    top20,
                    p.mean_return,
                    p.mean_rank
                );
            }
            Ok(())
        }
        Command::Adapt { checkpoint, data, k } => {
            let cfg: AdaptConfig = config::apply(&AdaptConfig::default(), &l.overrides)?;
            ctx.snapshot(&cfg)?;
            adapt(&ctx, &cfg, checkpoint, data, *k)
        }
        Command::Predict { checkpoint, features } => {
            let cfg: PredictConfig = config::apply(&PredictConfig {}, &l.overrides)?;
            ctx.snapshot(&cfg)?;
            predict(&ctx, checkpoint, features)
        }
    }
}

fn sin(ctx: &Ctx, cfg: &SineConfig) -> anyhow::Result<()> {
    let run = run_sinusoidal(cfg, ctx.seed)?;
    write_reports(&ctx.out, "sin", std::slice::from_ref(&run.report))?;
    write_trace_csv(&ctx.path("sin_trace.csv"), &run.trace)?;
    save_checkpoint(&run.model, &ctx.path("sin_model.json"))?;
    let curves = sweep_mesa(&run.model, 11, 201)?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(ctx.path("sin_curves.csv"))?);
    let theta_cols: Vec<String> = (0..run.model.d_theta()).map(|j| format!("theta{j}")).collect();
    writeln!(f, "varied,curve,{},x,y", theta_cols.join(","))?;
    for (c, curve) in curves.iter().enumerate() {
        let theta: Vec<String> = curve.theta.iter().map(f64::to_string).collect();
        for (x, y) in curve.x.iter().zip(&curve.y) {
            writeln!(f, "{},{c},{},{x},{y}", curve.varied, theta.join(","))?;
        }
    }
    f.flush()?;
    println!(
        "sin k={} mse {:.5} ± {:.5} over {} tasks",
        cfg.k,
        run.report.mean,
        run.report.ci_half_width,
        run.report.per_task.len()
    );
    Ok(())
}

fn quintile(ctx: &Ctx, cfg: &QuintileConfig) -> anyhow::Result<()> {
    let run = run_quintile(cfg, ctx.seed)?;
    write_reports(&ctx.out, "quintile", std::slice::from_ref(&run.report))?;
    write_trace_csv(&ctx.path("quintile_trace.csv"), &run.trace)?;
    save_checkpoint(&run.model, &ctx.path("quintile_model.json"))?;
    write_feature_csv(&ctx.path("quintile_test_features.csv"), &feature_names(), &run.test_rows)?;
    let probs: Vec<_> = run.eval.scatter.iter().map(|p| p.probs).collect();
    write_submission(&ctx.path("quintile_submission.csv"), &run.test_rows, &probs)?;

    let mut f = std::io::BufWriter::new(std::fs::File::create(ctx.path("quintile_scatter.csv"))?);
    writeln!(f, "asset_id,interval_start,p1,p2,p3,p4,p5")?;
    for p in &run.eval.scatter {
        let probs: Vec<String> = p.probs.iter().map(f64::to_string).collect();
        writeln!(f, "{},{},{}", p.asset_id, p.interval_start, probs.join(","))?;
    }
    f.flush()?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(ctx.path("quintile_intervals.csv"))?);
    writeln!(f, "interval_start,rps")?;
    for (s, v) in &run.eval.per_interval {
        writeln!(f, "{s},{v}")?;
    }
    f.flush()?;
    println!(
        "quintile rps {:.5} over {} test rows; corr(q1, q5) {:.3}",
        run.eval.aggregate,
        run.test_rows.len(),
        run.eval.correlation(0, 4)
    );
    Ok(())
}

fn prop1(ctx: &Ctx, cfg: &Prop1Config) -> anyhow::Result<()> {
    let mut outcomes = Vec::with_capacity(cfg.instances);
    for i in 0..cfg.instances {
        let table = random_table(
            cfg.n_omega,
            cfg.n_theta,
            cfg.n_tasks,
            &mut substream_indexed(ctx.seed, "prop1", i as u64),
        );
        outcomes.push(prop1_oracle(&table)?);
    }
    let equal = outcomes.iter().filter(|o| o.equal).count();
    let doc = serde_json::json!({
        "instances": cfg.instances,
        "equal": equal,
        "seed": ctx.seed,
        "outcomes": outcomes,
    });
    std::fs::write(ctx.path("prop1.json"), serde_json::to_string_pretty(&doc)? + "\n")?;
    println!("{equal}/{} equal", cfg.instances);
    Ok(())
}

fn portfolio_scale(ctx: &Ctx, cfg: &ScaleConfig) -> anyhow::Result<()> {
    let study = scaling_study(&cfg.market, cfg.paths, cfg.rounds, &cfg.alphas, ctx.seed)?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(ctx.path("portfolio_scale.csv"))?);
    writeln!(f, "alpha,mean_ir")?;
    for (a, ir) in study.mean_curve.alphas.iter().zip(&study.mean_curve.ir) {
        writeln!(f, "{a},{ir}")?;
    }
    f.flush()?;
    std::fs::write(
        ctx.path("portfolio_scale_summary.json"),
        serde_json::to_string_pretty(&serde_json::json!({ "seed": ctx.seed, "study": study }))? + "\n",
    )?;
    println!(
        "IR(0.25) > IR(1) on {:.1}% of {} paths; mean curve slope {:.4}, R² {:.5}",
        100.0 * study.share_quarter_beats_full,
        study.n_paths,
        study.mean_curve.slope,
        study.mean_curve.r_squared
    );
    Ok(())
}

fn read_numeric_csv(path: &Path) -> anyhow::Result<(Vec<String>, Vec<Vec<f64>>)> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: Vec<String> = lines
        .next()
        .ok_or_else(|| anyhow::anyhow!("{} is empty", path.display()))?
        .split(',')
        .map(|s| s.trim().to_string())
        .collect();
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let row = line
            .split(',')
            .enumerate()
            .map(|(j, s)| {
                s.trim().parse::<f64>().with_context(|| {
                    format!("row {}, column `{}`: `{s}` is not a number", i + 1, header.get(j).map_or("?", |h| h))
                })
            })
            .collect::<anyhow::Result<Vec<f64>>>()?;
        if row.len() != header.len() {
            anyhow::bail!("row {} has {} fields, header has {}", i + 1, row.len(), header.len());
        }
        rows.push(row);
    }
    Ok((header, rows))
}

fn adapt(ctx: &Ctx, cfg: &AdaptConfig, checkpoint: &Path, data: &Path, k: Option<usize>) -> anyhow::Result<()> {
    let model = load_checkpoint(checkpoint)?;
    let (header, rows) = read_numeric_csv(data)?;
    let d_x = model.base_spec.layer_sizes[0];
    let d_y = *model.base_spec.layer_sizes.last().expect("non-empty layer sizes");
    if header.len() != d_x + d_y {
        anyhow::bail!(
            "{} has {} columns; the model needs {d_x} inputs and {d_y} targets",
            data.display(),
            header.len()
        );
    }
    let k = k.unwrap_or(rows.len());
    if k == 0 || k > rows.len() {
        return Err(UsageError(format!("--k {k} outside 1..={}", rows.len())).into());
    }
    let x = Array2::from_rows(&rows.iter().map(|r| r[..d_x].to_vec()).collect::<Vec<_>>())?;
    let y = Array2::from_rows(&rows.iter().map(|r| r[d_x..].to_vec()).collect::<Vec<_>>())?;
    let loss = match model.base_spec.output_transform {
        OutputTransform::Softmax => LossKind::Rps,
        _ => LossKind::Mse,
    };
    let task = Task::new(x, y, k)?;
    let fit = adapt_new_task(&model, &task, loss, cfg, &mut substream(ctx.seed, "adapt"))?;
    let pred = model.predict_theta(&fit.theta, &model.norm_stats.apply(&task.x)?)?;
    let val_loss = (k < rows.len()).then(|| {
        let idx = task.val_rows();
        let p = Array2::from_rows(&idx.iter().map(|&r| pred.row(r).to_vec()).collect::<Vec<_>>())
            .expect("consistent widths");
        loss.evaluate(&p, &task.val_y())
    });
    let doc = serde_json::json!({
        "seed": ctx.seed,
        "k": k,
        "loss": format!("{loss:?}").to_lowercase(),
        "adaptation": fit,
        "val_loss": val_loss,
    });
    std::fs::write(ctx.path("adapt.json"), serde_json::to_string_pretty(&doc)? + "\n")?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(ctx.path("adapt_predictions.csv"))?);
    let cols: Vec<String> = (0..d_y).map(|j| format!("pred{j}")).collect();
    writeln!(f, "row,train,{}", cols.join(","))?;
    for r in 0..pred.rows() {
        let vals: Vec<String> = pred.row(r).iter().map(f64::to_string).collect();
        writeln!(f, "{r},{},{}", u8::from(r < k), vals.join(","))?;
    }
    f.flush()?;
    match val_loss {
        Some(v) => println!("theta {:?}; train loss {:.5}; held-out loss {v:.5}", fit.theta, fit.train_loss),
        None => println!("theta {:?}; train loss {:.5}", fit.theta, fit.train_loss),
    }
    Ok(())
}

fn predict(ctx: &Ctx, checkpoint: &Path, features: &Path) -> anyhow::Result<()> {
    let model = load_checkpoint(checkpoint)?;
    let table = read_feature_csv(features, &feature_names())?;
    let probs = predict_rows(&model, &table.rows)?;
    for (row, p) in table.rows.iter().zip(&probs) {
        let sum: f64 = p.iter().sum();
        if p.iter().any(|v| !(0.0..=1.0).contains(v)) || (sum - 1.0).abs() > 1e-9 {
            anyhow::bail!("asset {}: probabilities {p:?} are not a distribution", row.asset_id);
        }
    }
    write_submission(&ctx.path("submission.csv"), &table.rows, &probs)?;
    println!("{} rows written to {}", probs.len(), ctx.path("submission.csv").display());
    Ok(())
}

fn usage_exit(err: clap::Error) -> ExitCode {
    use clap::error::ErrorKind;
    match err.kind() {
        ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
            let _ = err.print();
            ExitCode::SUCCESS
        }
        _ => {
            let _ = err.print();
            print_help_for(std::env::args().nth(1).as_deref());
            ExitCode::from(1)
        }
    }
}

fn print_help_for(sub: Option<&str>) {
    let mut cmd = Cli::command();
    cmd.build();
    let help = match sub.and_then(|s| cmd.find_subcommand_mut(s)) {
        Some(sc) => sc.render_help(),
        None => cmd.render_help(),
    };
    eprintln!("\n{help}");
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => return usage_exit(e),
    };
    let sub = cli.command.name();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let usage = e.downcast_ref::<UsageError>().is_some()
                || matches!(e.downcast_ref::<mtms_core::Error>(), Some(mtms_core::Error::Usage(_)));
            let mut msg = e.to_string();
            for cause in e.chain().skip(1) {
                let c = cause.to_string();
                if !msg.contains(&c) {
                    msg = format!("{msg}: {c}");
                }
            }
            eprintln!("error: {msg}");
            if usage {
                print_help_for(Some(sub));
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
