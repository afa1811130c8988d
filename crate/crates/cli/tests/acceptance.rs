//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use mtms_core::autodiff::{Array2, Bindings, Mode, NodeId, Tape, Unary};
use mtms_core::benchmarks::{run_quintile, run_sinusoidal, QuintileConfig, SineConfig};
use mtms_core::linear::{als_fit, AlsConfig, LaggedSeries, SeriesSet};
use mtms_core::losses::{rps, Frequency, LossKind, QuintileOutcome, N_QUINTILES};
use mtms_core::mtms::{prop1_oracle, random_table};
use mtms_core::nn::{mlp_on_tape, Activation, MlpSpec, OutputTransform};
use mtms_core::portfolio::{default_alpha_grid, scaling_study, simulate_competition, RoundMarket, SimConfig};
use mtms_core::quintile::MarketConfig;
use mtms_core::rng::{substream, substream_indexed, Rng};

const SEED: u64 = 1;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

type Check = fn() -> Outcome;

fn main() {
    let checks: [(&str, Check); 10] = [
        ("sine few-shot regression", sine),
        ("bilevel vs single-level argmin", prop1),
        ("linear endpoints", linear_endpoints),
        ("ALS monotonicity", als_monotone),
        ("gradient check", gradcheck),
        ("RPS calibration", rps_calibration),
        ("synthetic quintile RPS", quintile),
        ("IR scaling", scaling),
        ("adversarial competition", competition),
        ("determinism", determinism),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    let mut ran = 0;
    for (i, (name, check)) in checks.iter().enumerate() {
        let id = (i + 1).to_string();
        if !filter.is_empty() && !filter.iter().any(|f| f == &id || name.contains(f.as_str())) {
            continue;
        }
        ran += 1;
        let t = Instant::now();
        let o = check();
        let tag = if o.pass { "PASS" } else { "FAIL" };
        println!("{tag} {id:>2} {name}: {} [{:.1}s]", o.detail, t.elapsed().as_secs_f64());
        if !o.pass {
            failed += 1;
        }
    }
    println!("acceptance: {} of {ran} criteria passed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

fn sine() -> Outcome {
    const LIMITS: [(usize, f64); 2] = [(5, 0.05), (10, 0.03)];
    const MAX_SECS: f64 = 1800.0;
    let start = Instant::now();
    let mut pass = true;
    let mut parts = Vec::new();
    for (k, limit) in LIMITS {
        let cfg = SineConfig {
            k,
            ..SineConfig::default()
        };
        match run_sinusoidal(&cfg, SEED) {
            Ok(run) => {
                let r = &run.report;
                pass &= r.mean <= limit && r.per_task.len() == 600 && run.train_tasks.len() == 1000;
                parts.push(format!(
                    "K={k} mse {:.5} ± {:.5} over {} tasks (limit {limit})",
                    r.mean,
                    r.ci_half_width,
                    r.per_task.len()
                ));
            }
            Err(e) => {
                pass = false;
                parts.push(format!("K={k} error {e}"));
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    pass &= secs <= MAX_SECS;
    parts.push(format!("runtime {secs:.0}s (limit {MAX_SECS:.0}s)"));
    outcome(pass, parts.join("; "))
}

fn prop1() -> Outcome {
    const N: usize = 100;
    let mut equal = 0;
    let mut unique = 0;
    for i in 0..N {
        let mut rng = substream_indexed(SEED, "acceptance-prop1", i as u64);
        let (nw, nt, nm) = (rng.random_range(2..6), rng.random_range(2..4), rng.random_range(2..5));
        let table = random_table(nw, nt, nm, &mut rng);
        match prop1_oracle(&table) {
            Ok(o) => {
                equal += usize::from(o.equal);
                unique += usize::from(o.unique_inner_minima());
            }
            Err(e) => return outcome(false, format!("instance {i}: {e}")),
        }
    }
    outcome(
        equal == N && unique == N,
        format!("{equal}/{N} equal, {unique}/{N} with unique inner minima"),
    )
}

fn normal(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Random regression problems sharing one design width, intercept first.
fn random_set(rng: &mut Rng) -> SeriesSet {
    let p = rng.random_range(2..6);
    let m = rng.random_range(3..12);
    let center: Vec<f64> = (0..p).map(|_| normal(rng)).collect();
    let series = (0..m)
        .map(|_| {
            let n = rng.random_range(p + 8..40);
            let x = DMatrix::from_fn(n, p, |_, c| if c == 0 { 1.0 } else { normal(rng) });
            let beta = DVector::from_iterator(p, center.iter().map(|c| c + 0.5 * normal(rng)));
            let noise = DVector::from_fn(n, |_, _| 0.3 * normal(rng));
            let y = &x * beta + noise;
            LaggedSeries::from_design(x, y).expect("matching rows")
        })
        .collect();
    SeriesSet::new(Frequency::Monthly, series).expect("same width")
}

fn lstsq(x: &DMatrix<f64>, y: &DVector<f64>) -> DVector<f64> {
    x.clone().svd(true, true).solve(y, 1e-14).expect("svd solve")
}

fn linear_endpoints() -> Outcome {
    const N: usize = 50;
    const TOL: f64 = 1e-6;
    let mut worst_pooled: f64 = 0.0;
    let mut worst_local: f64 = 0.0;
    for i in 0..N {
        let set = random_set(&mut substream_indexed(SEED, "acceptance-endpoints", i as u64));
        let p = set.n_coef;
        let rows: usize = set.series.iter().map(|s| s.x.nrows()).sum();
        let mut x = DMatrix::zeros(rows, p);
        let mut y = DVector::zeros(rows);
        let mut r = 0;
        for s in &set.series {
            x.rows_mut(r, s.x.nrows()).copy_from(&s.x);
            y.rows_mut(r, s.x.nrows()).copy_from(&s.y);
            r += s.x.nrows();
        }
        let pooled = lstsq(&x, &y);
        let fit0 = match als_fit(&set, 0, &AlsConfig::default()) {
            Ok(f) => f,
            Err(e) => return outcome(false, format!("set {i}, d_theta 0: {e}")),
        };
        for b in fit0.model.betas() {
            worst_pooled = worst_pooled.max((b - &pooled).amax());
        }
        let full = match als_fit(&set, p, &AlsConfig::default()) {
            Ok(f) => f,
            Err(e) => return outcome(false, format!("set {i}, d_theta {p}: {e}")),
        };
        for (m, s) in set.series.iter().enumerate() {
            let local = &s.x * lstsq(&s.x, &s.y);
            let fitted = &s.x * full.model.beta(m);
            worst_local = worst_local.max((fitted - local).amax());
        }
    }
    outcome(
        worst_pooled <= TOL && worst_local <= TOL,
        format!(
            "{N} sets; d_theta=0 coefficient gap {worst_pooled:.2e}, d_theta=d_x+1 fitted-value gap {worst_local:.2e} (limit {TOL:.0e})"
        ),
    )
}

fn als_monotone() -> Outcome {
    const N: usize = 50;
    const TOL: f64 = 1e-12;
    let mut worst = f64::NEG_INFINITY;
    let mut half_steps = 0;
    for i in 0..N {
        let set = random_set(&mut substream_indexed(SEED, "acceptance-als", i as u64));
        for d in 1..set.n_coef {
            let fit = match als_fit(&set, d, &AlsConfig::default()) {
                Ok(f) => f,
                Err(e) => return outcome(false, format!("set {i}, d_theta {d}: {e}")),
            };
            half_steps += fit.history.len() - 1;
            worst = worst.max(fit.worst_increase());
        }
    }
    outcome(
        worst <= TOL,
        format!("{half_steps} half-steps over {N} sets; largest relative increase {worst:.2e} (limit {TOL:.0e})"),
    )
}

/// Randomly composed network: an affine or leaky meta module maps a mesa
/// row to base parameters, the base network mixes smooth and piecewise
/// linear layers, and a random loss closes the graph.
struct Composed {
    tape: Tape,
    bindings: Bindings,
    leaves: Vec<(String, usize)>,
    kinks: Vec<NodeId>,
}

fn compose(rng: &mut Rng) -> Composed {
    let mut tape = Tape::new();
    let n = rng.random_range(2..6);
    let d_in = rng.random_range(1..4);
    let d_theta = rng.random_range(1..3);
    let softmax = rng.random_bool(0.5);
    let d_out = if softmax { N_QUINTILES } else { rng.random_range(1..3) };
    let base_hidden = rng.random_range(2..5);
    let base = MlpSpec::new(
        vec![base_hidden, d_out],
        Activation::None,
        if softmax { OutputTransform::Softmax } else { OutputTransform::None },
        0.0,
    )
    .expect("valid spec");
    let meta = MlpSpec::new(
        vec![d_theta, base.n_params()],
        Activation::None,
        OutputTransform::None,
        0.0,
    )
    .expect("valid spec");

    let mut bindings = Bindings::new();
    let mut leaves = Vec::new();
    let mut bind = |tape: &mut Tape, name: &str, rows: usize, cols: usize, scale: f64, rng: &mut Rng| {
        let v = Array2::new(rows, cols, (0..rows * cols).map(|_| scale * normal(rng)).collect()).expect("shape");
        bindings.insert(name.to_string(), v);
        leaves.push((name.to_string(), rows * cols));
        tape.leaf(name)
    };
    let theta = bind(&mut tape, "theta", 1, d_theta, 1.0, rng);
    let omega = bind(&mut tape, "omega", 1, meta.n_params(), 0.4, rng);
    let w0 = bind(&mut tape, "w0", d_in, base_hidden, 0.7, rng);
    let b0 = bind(&mut tape, "b0", 1, base_hidden, 0.3, rng);
    let x = tape.constant(
        Array2::new(n, d_in, (0..n * d_in).map(|_| normal(rng)).collect()).expect("shape"),
    );

    let mut kinks = Vec::new();
    let mut h = tape.matmul(x, w0);
    h = tape.add_row(h, b0);
    for _ in 0..rng.random_range(1..3) {
        h = match rng.random_range(0..5) {
            0 => tape.unary(h, Unary::Tanh),
            1 => tape.unary(h, Unary::Sin),
            2 => {
                kinks.push(h);
                tape.leaky_relu(h, 0.1)
            }
            3 => {
                let sq = tape.square(h);
                let e = tape.unary(sq, Unary::Scale(-0.5));
                let g = tape.unary(e, Unary::Exp);
                tape.mul(h, g)
            }
            _ => {
                kinks.push(h);
                tape.relu(h)
            }
        };
    }
    if rng.random_bool(0.3) {
        h = tape.dropout(h, 0.25, Mode::Train, rng).expect("valid rate");
    }
    let mut null_rng = substream(0, "unused");
    let beta = mlp_on_tape(&mut tape, &meta, omega, theta, Mode::Eval, &mut null_rng).expect("meta");
    let pred = mlp_on_tape(&mut tape, &base, beta, h, Mode::Eval, &mut null_rng).expect("base");
    let target = if softmax {
        let mut t = Array2::zeros(n, N_QUINTILES);
        for r in 0..n {
            t.set(r, rng.random_range(0..N_QUINTILES), 1.0);
        }
        t
    } else {
        Array2::new(n, d_out, (0..n * d_out).map(|_| normal(rng)).collect()).expect("shape")
    };
    let loss = if softmax {
        if rng.random_bool(0.5) {
            LossKind::Rps
        } else {
            LossKind::Mse
        }
    } else {
        LossKind::Mse
    };
    loss.on_tape(&mut tape, pred, &target);
    Composed {
        tape,
        bindings,
        leaves,
        kinks,
    }
}

fn gradcheck() -> Outcome {
    const N: usize = 100;
    const H: f64 = 1e-6;
    const TOL: f64 = 1e-4;
    /// Denominator floor of the relative error.
    const FLOOR: f64 = 1e-4;
    /// Inputs to piecewise-linear units must clear their kink by this much.
    const KINK_MARGIN: f64 = 1e-3;
    let mut rng = substream(SEED, "acceptance-gradcheck");
    let mut worst: f64 = 0.0;
    let mut redraws = 0;
    let mut checked = 0;
    let mut params = 0;
    while checked < N {
        let mut c = compose(&mut rng);
        if let Err(e) = c.tape.forward(&c.bindings) {
            return outcome(false, format!("forward failed: {e}"));
        }
        let near_kink = c
            .kinks
            .iter()
            .any(|k| c.tape.value(*k).is_some_and(|v| v.data().iter().any(|z| z.abs() < KINK_MARGIN)));
        if near_kink {
            redraws += 1;
            continue;
        }
        let grads = match c.tape.backward(&Array2::scalar(1.0)) {
            Ok(g) => g,
            Err(e) => return outcome(false, format!("backward failed: {e}")),
        };
        for (name, len) in &c.leaves {
            let analytic = grads.by_name(name).map(|g| g.data().to_vec()).unwrap_or(vec![0.0; *len]);
            for j in 0..*len {
                let mut eval = |delta: f64| {
                    let mut b = c.bindings.clone();
                    b.get_mut(name).expect("bound").data_mut()[j] += delta;
                    c.tape.reset();
                    c.tape.forward(&b).expect("finite").data()[0]
                };
                let fd = (eval(H) - eval(-H)) / (2.0 * H);
                let a = analytic[j];
                worst = worst.max((a - fd).abs() / a.abs().max(fd.abs()).max(FLOOR));
                params += 1;
            }
        }
        checked += 1;
    }
    outcome(
        worst <= TOL,
        format!(
            "{N} networks, {params} parameters; max relative error {worst:.2e} (limit {TOL:.0e}, step {H:.0e}, floor {FLOOR:.0e}); {redraws} draws near a kink replaced"
        ),
    )
}

fn rps_calibration() -> Outcome {
    const TOL: f64 = 1e-12;
    const EXPECTED: [f64; N_QUINTILES] = [0.24, 0.12, 0.08, 0.12, 0.24];
    let uniform = [0.2; N_QUINTILES];
    let mut values = [0.0; N_QUINTILES];
    let mut pass = true;
    for q in 0..N_QUINTILES {
        // Independent form: Σ_k (F_k − 1{k ≥ q})² / 5 with F_k = (k + 1) / 5.
        let oracle: f64 = (0..N_QUINTILES)
            .map(|k| {
                let f = (k + 1) as f64 / 5.0;
                let o = if k >= q { 1.0 } else { 0.0 };
                (f - o) * (f - o)
            })
            .sum::<f64>()
            / 5.0;
        values[q] = match rps(&uniform, QuintileOutcome::new(q).expect("in range")) {
            Ok(v) => v,
            Err(e) => return outcome(false, e.to_string()),
        };
        pass &= (values[q] - oracle).abs() <= TOL && (values[q] - EXPECTED[q]).abs() <= TOL;
    }
    let mean = values.iter().sum::<f64>() / N_QUINTILES as f64;
    pass &= (mean - 0.16).abs() <= TOL;
    outcome(
        pass,
        format!("per-outcome {values:?}, mean {mean} (target 0.16, tolerance {TOL:.0e})"),
    )
}

fn quintile() -> Outcome {
    const HET_LIMIT: f64 = 0.155;
    const HOM_RANGE: (f64, f64) = (0.158, 0.162);
    let het = QuintileConfig::default();
    let hom = QuintileConfig {
        market: MarketConfig::homogeneous(),
        ..QuintileConfig::default()
    };
    let (a, b) = match (run_quintile(&het, SEED), run_quintile(&hom, SEED)) {
        (Ok(a), Ok(b)) => (a, b),
        (Err(e), _) | (_, Err(e)) => return outcome(false, e.to_string()),
    };
    let (ra, rb) = (a.eval.aggregate, b.eval.aggregate);
    outcome(
        ra < HET_LIMIT && (HOM_RANGE.0..=HOM_RANGE.1).contains(&rb),
        format!(
            "heterogeneous {ra:.5} (limit < {HET_LIMIT}), homogeneous {rb:.5} (range [{}, {}]); corr(q1, q5) {:.3}",
            HOM_RANGE.0,
            HOM_RANGE.1,
            a.eval.correlation(0, 4)
        ),
    )
}

fn scaling() -> Outcome {
    const PATHS: usize = 1000;
    const MIN_SHARE: f64 = 0.95;
    const MIN_R2: f64 = 0.99;
    let alphas = default_alpha_grid();
    match scaling_study(&RoundMarket::default(), PATHS, 12, &alphas, SEED) {
        Ok(s) => outcome(
            s.share_quarter_beats_full >= MIN_SHARE && s.mean_curve.r_squared >= MIN_R2,
            format!(
                "IR(0.25) > IR(1) on {:.1}% of {PATHS} paths (limit {:.0}%); mean-curve R² {:.5} over [{}, {}] (limit {MIN_R2}); slope {:.4}",
                100.0 * s.share_quarter_beats_full,
                100.0 * MIN_SHARE,
                s.mean_curve.r_squared,
                alphas[0],
                alphas[alphas.len() - 1],
                s.mean_curve.slope
            ),
        ),
        Err(e) => outcome(false, e.to_string()),
    }
}

fn competition() -> Outcome {
    const REPS: usize = 10_000;
    const MAX_SECS: f64 = 600.0;
    let start = Instant::now();
    let cfg = SimConfig {
        replications: REPS,
        ..SimConfig::default()
    };
    let out = match simulate_competition(&cfg, SEED) {
        Ok(o) => o,
        Err(e) => return outcome(false, e.to_string()),
    };
    let secs = start.elapsed().as_secs_f64();
    let s = &out.summary;
    let top20 = |i: usize| s.policies[i].top_k.iter().find(|t| t.k == 20).map_or(f64::NAN, |t| t.p);
    let d = &s.top20_difference;
    let (stat, adapt) = (&s.policies[0], &s.policies[1]);
    let pass = d.ci_low > 0.0 && adapt.mean_return < stat.mean_return && secs <= MAX_SECS && s.replications >= REPS;
    outcome(
        pass,
        format!(
            "P(top-20) {} {:.4} vs {} {:.4}, difference {:.4} CI [{:.4}, {:.4}]; mean return {:.4} vs {:.4}; {REPS} replications in {secs:.0}s (limit {MAX_SECS:.0}s)",
            stat.policy.name(),
            top20(0),
            adapt.policy.name(),
            top20(1),
            d.diff,
            d.ci_low,
            d.ci_high,
            stat.mean_return,
            adapt.mean_return
        ),
    )
}

fn run_cli(args: &[&str]) -> Result<(), String> {
    let o = Command::new(env!("CARGO_BIN_EXE_mtms"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .map_err(|e| e.to_string())?;
    if o.status.success() {
        Ok(())
    } else {
        Err(format!("{args:?}: {}", String::from_utf8_lossy(&o.stderr)))
    }
}

fn same_tree(a: &Path, b: &Path) -> Result<usize, String> {
    let mut names: Vec<_> = std::fs::read_dir(a)
        .map_err(|e| e.to_string())?
        .map(|e| e.expect("dir entry").file_name())
        .collect();
    names.sort();
    let other = std::fs::read_dir(b).map_err(|e| e.to_string())?.count();
    if other != names.len() {
        return Err(format!("{} files vs {other}", names.len()));
    }
    for n in &names {
        let (x, y) = (std::fs::read(a.join(n)), std::fs::read(b.join(n)));
        match (x, y) {
            (Ok(x), Ok(y)) if x == y => {}
            _ => return Err(format!("{} differs", n.to_string_lossy())),
        }
    }
    Ok(names.len())
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().expect("temp dir");
    let runs: Vec<(&str, Vec<&str>)> = vec![
        (
            "sin",
            vec![
                "sin", "--k", "5", "--set", "n_train_tasks=40", "--set", "n_eval_tasks=20", "--set",
                "phase2.train.max_epochs=30", "--set", "adapt.steps=100",
            ],
        ),
        ("m4like", vec!["m4like", "--set", "n_series=40"]),
        (
            "quintile",
            vec![
                "quintile", "--set", "n_assets=200", "--set", "n_weeks=180", "--set", "test_weeks=30", "--set",
                "val_weeks=15", "--set", "phase1.train.max_epochs=5", "--set", "phase2.train.max_epochs=5",
            ],
        ),
        ("prop1", vec!["prop1", "--instances", "20"]),
        ("portfolio-scale", vec!["portfolio-scale", "--paths", "100"]),
        ("portfolio-sim", vec!["portfolio-sim", "--replications", "300"]),
    ];
    let mut files = 0;
    for (name, args) in &runs {
        for rep in ["a", "b"] {
            let out = dir.path().join(rep).join(name);
            let mut full = args.clone();
            let out_s = out.to_string_lossy().into_owned();
            full.extend(["--seed", "11", "--out", &out_s]);
            if let Err(e) = run_cli(&full) {
                return outcome(false, e);
            }
        }
        match same_tree(&dir.path().join("a").join(name), &dir.path().join("b").join(name)) {
            Ok(n) => files += n,
            Err(e) => return outcome(false, format!("{name}: {e}")),
        }
    }
    // Fitting and scoring from saved artifacts.
    let q = dir.path().join("a").join("quintile");
    let model = q.join("quintile_model.json").to_string_lossy().into_owned();
    let feats = q.join("quintile_test_features.csv").to_string_lossy().into_owned();
    let sin_model = dir.path().join("a").join("sin").join("sin_model.json").to_string_lossy().into_owned();
    let task = dir.path().join("task.csv");
    let mut text = String::from("x,y\n");
    for i in 0..15 {
        let x = -4.5 + 0.6 * i as f64;
        text.push_str(&format!("{x},{}\n", 2.0 * (x + 1.0f64).sin()));
    }
    std::fs::write(&task, text).expect("write task");
    let task_s = task.to_string_lossy().into_owned();
    for rep in ["a", "b"] {
        let p = dir.path().join(rep).join("predict").to_string_lossy().into_owned();
        let a = dir.path().join(rep).join("adapt").to_string_lossy().into_owned();
        let r = run_cli(&["predict", "--checkpoint", &model, "--features", &feats, "--out", &p]).and_then(|_| {
            run_cli(&[
                "adapt", "--checkpoint", &sin_model, "--data", &task_s, "--k", "5", "--seed", "3", "--out", &a,
            ])
        });
        if let Err(e) = r {
            return outcome(false, e);
        }
    }
    for name in ["predict", "adapt"] {
        match same_tree(&dir.path().join("a").join(name), &dir.path().join("b").join(name)) {
            Ok(n) => files += n,
            Err(e) => return outcome(false, format!("{name}: {e}")),
        }
    }
    let sub = std::fs::read(q.join("quintile_submission.csv")).ok();
    let pred = std::fs::read(dir.path().join("a").join("predict").join("submission.csv")).ok();
    if sub.is_none() || sub != pred {
        return outcome(false, "saved-model predictions differ from the in-run submission".into());
    }
    outcome(true, format!("8 subcommands run twice with seed 11; {files} output files byte-identical"))
}
