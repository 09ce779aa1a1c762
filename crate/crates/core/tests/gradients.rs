//! Reverse-mode gradients against central finite differences of the same
//! objective with the flow coefficients held at their forward values.

use flowcast::data::{make_windows, Window};
use flowcast::flow::FlowConfig;
use flowcast::forecast::{predict, PointStatistic, PredictConfig};
use flowcast::metrics::ql_avg;
use flowcast::rng;
use flowcast::ssm::{Hyper, ModelTheta};
use flowcast::train::{mae_loss, window_gradient, window_loss, LossKind, LossSettings, WindowSample};

const H: f64 = 1e-5;

fn tiny_window(seed: u64) -> Window {
    let mut r = rng::stream(seed, 77);
    let x = rng::standard_normal_matrix(&mut r, 4, 1);
    make_windows(&x, None, 2, 2).unwrap().remove(0)
}

/// Largest relative error; coordinates where both sides are below `floor`
/// are compared on that absolute scale instead.
fn fd_check(kind: LossKind, seed: u64) -> f64 {
    let model = ModelTheta::init(Hyper::gru(1, 2, 1, 0), 0.8, 0.3, seed).unwrap();
    let window = tiny_window(seed);
    let flow = FlowConfig::default();
    let settings = LossSettings {
        kind,
        point: kind.default_point(),
        flow: &flow,
        scale: 1.0,
    };
    let sample = WindowSample::new(&window, &model, 1, rng::mix(seed, 5));
    let (loss, grad, traces) = window_gradient(&model, None, &sample, &settings).unwrap();
    let replay = window_loss(&model, None, &sample, &settings, Some(&traces)).unwrap();
    assert!((loss - replay).abs() <= 1e-12 * (1.0 + loss.abs()));

    let base = model.to_flat();
    let mut worst: f64 = 0.0;
    for k in 0..base.len() {
        let at = |delta: f64| {
            let mut m = model.clone();
            let mut p = base.clone();
            p[k] += delta;
            m.set_flat(&p).unwrap();
            window_loss(&m, None, &sample, &settings, Some(&traces)).unwrap()
        };
        let fd = (at(H) - at(-H)) / (2.0 * H);
        let denom = fd.abs().max(grad[k].abs()).max(1e-6);
        let rel = (fd - grad[k]).abs() / denom;
        worst = worst.max(rel);
    }
    worst
}

#[test]
fn gradients_match_finite_differences() {
    for kind in [LossKind::Mae, LossKind::Nll] {
        for seed in 0..5 {
            let worst = fd_check(kind, seed);
            assert!(worst <= 1e-4, "{kind:?} seed {seed}: relative error {worst:e}");
        }
    }
}

#[test]
fn mae_loss_equals_half_normalized_p50_numerator() {
    // P50QL = Σ|y − ŷ| / Σ|y| at α = 0.5, so MAE · NQ = P50QL · Σ|y|
    let model = ModelTheta::init(Hyper::gru(2, 2, 1, 0), 1.0, 0.2, 3).unwrap();
    let mut r = rng::stream(1, 2);
    let x = rng::standard_normal_matrix(&mut r, 8, 2).add_scalar(3.0);
    let w = make_windows(&x, None, 4, 4).unwrap().remove(0);
    let cfg = PredictConfig {
        n_particles: 9,
        point: PointStatistic::Median,
        ..PredictConfig::default()
    };
    let (d, _) = predict(&model, None, &w.history, &w.covariates, 4, &cfg, 11).unwrap();
    let mae = mae_loss(&d, &w.target).unwrap();
    let median = d.median();
    let mut numerator = 0.0;
    for t in 0..4 {
        let ql = ql_avg(std::slice::from_ref(&median), std::slice::from_ref(&w.target), t, 0.5).unwrap().unwrap();
        let norm: f64 = w.target.row(t).iter().map(|v| v.abs()).sum();
        numerator += ql * norm;
    }
    assert!((mae * w.target.len() as f64 - numerator).abs() < 1e-10);
}
