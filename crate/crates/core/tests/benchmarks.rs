use rand_distr::{Distribution, StandardNormal};

use mtms_core::benchmarks::{mean_ci, run_sinusoidal, sweep_mesa, SineConfig};
use mtms_core::portfolio::{default_alpha_grid, sample_sd, scaling_curve, scaling_study, RoundMarket};
use mtms_core::quintile::{realized_vol_dispersion, synth_market, MarketConfig};
use mtms_core::rng::substream;

#[test]
fn confidence_interval_shrinks_with_root_sample_size() {
    let mut rng = substream(2, "ci");
    let draws: Vec<f64> = (0..16_000).map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            3.0 * z + 1.0
        }).collect();
    let (_, small) = mean_ci(&draws[..1000]);
    let (_, large) = mean_ci(&draws[..16_000]);
    let ratio = small / large;
    assert!((ratio - 4.0).abs() <= 0.3 * 4.0, "{ratio}");
    let oracle = 1.96 * 3.0 / 1000f64.sqrt();
    assert!((small - oracle).abs() <= 0.3 * oracle, "{small} vs {oracle}");
}

#[test]
fn mesa_sweep_traces_model_predictions() {
    let cfg = SineConfig {
        n_train_tasks: 30,
        n_eval_tasks: 5,
        phase1: mtms_core::mtms::Phase1Config {
            train: mtms_core::optimize::TrainConfig {
                max_epochs: 10,
                ..SineConfig::default().phase1.train
            },
            ..SineConfig::default().phase1
        },
        phase2: mtms_core::mtms::Phase2Config {
            train: mtms_core::optimize::TrainConfig {
                max_epochs: 40,
                ..SineConfig::default().phase2.train
            },
            ..SineConfig::default().phase2
        },
        ..SineConfig::default()
    };
    let run = run_sinusoidal(&cfg, 4).unwrap();
    let model = &run.model;
    let curves = sweep_mesa(model, 11, 201).unwrap();
    assert_eq!(curves.len(), model.d_theta() * 11);
    for c in &curves {
        assert_eq!(c.x.len(), 201);
        assert_eq!((c.x[0], c.x[200]), (-5.0, 5.0));
        let x = mtms_core::autodiff::Array2::column_vector(c.x.clone());
        let direct = model.predict_theta(&c.theta, &x).unwrap().into_data();
        assert_eq!(direct, c.y);
    }
    for j in 0..model.d_theta() {
        let group: Vec<_> = curves.iter().filter(|c| c.varied == j).collect();
        let (a, b) = (group[0], group[10]);
        // only the varied coordinate moves
        for k in 0..model.d_theta() {
            if k != j {
                assert_eq!(a.theta[k], b.theta[k]);
            }
        }
        let mut col: Vec<f64> = (0..model.n_tasks()).map(|m| model.mesa.get(m, j)).collect();
        col.sort_by(f64::total_cmp);
        assert!(a.theta[j] >= col[0] && b.theta[j] <= col[col.len() - 1]);
        let rms = (a.y.iter().zip(&b.y).map(|(p, q)| (p - q) * (p - q)).sum::<f64>() / 201.0).sqrt();
        assert!(rms > 1e-3, "coordinate {j} barely changes the curve: {rms}");
    }
}

/// Regression fixture: a change here means the market generator changed.
#[test]
fn frozen_vol_dispersion() {
    let het = synth_market(200, 120, 5, &MarketConfig::heterogeneous()).unwrap();
    let hom = synth_market(200, 120, 5, &MarketConfig::homogeneous()).unwrap();
    assert!((realized_vol_dispersion(&het) - 0.06665988206433583).abs() < 1e-12);
    assert!((realized_vol_dispersion(&hom) - 0.0026443638899385324).abs() < 1e-12);
}

#[test]
fn ir_slope_on_a_balanced_path() {
    // Σx = 0, so the small-scale slope is −Σx² / (2 sd(x))
    let x = [0.03, -0.01, 0.02, -0.04, 0.05, -0.05];
    let w = vec![vec![1.0]; x.len()];
    let r: Vec<Vec<f64>> = x.iter().map(|v| vec![*v]).collect();
    let c = scaling_curve(&w, &r, &[1e-3, 2e-3]).unwrap();
    let slope = (c.ir[1] - c.ir[0]) / 1e-3;
    let oracle = -x.iter().map(|v| v * v).sum::<f64>() / (2.0 * sample_sd(&x));
    assert!(slope < 0.0);
    assert!((slope - oracle).abs() <= 0.1 * oracle.abs(), "{slope} vs {oracle}");
}

#[test]
fn smaller_exposure_usually_raises_ir() {
    let s = scaling_study(&RoundMarket::default(), 300, 12, &default_alpha_grid(), 6).unwrap();
    assert_eq!(s.n_paths, 300);
    assert!(s.share_quarter_beats_full >= 0.9, "{}", s.share_quarter_beats_full);
    assert!(s.share_decreasing >= 0.9, "{}", s.share_decreasing);
    assert!(s.mean_curve.slope < 0.0);
    assert!(s.mean_curve.r_squared >= 0.99);
}
