//! Statistical checks against closed-form Kalman answers.

use flowcast::filters::{
    kalman_predict, kalman_update, psd_sqrt, run_bpf, run_kalman, systematic_resample, LinearGaussianSSM,
};
use flowcast::flow::{ensemble_moments, flow_update, FlowConfig, GaussianBelief, LinearMeasurement};
use flowcast::forecast::{empirical_quantile, filter_window, predict, rollout, PredictConfig};
use flowcast::rng;
use flowcast::ssm::{Hyper, ModelTheta, StateEnsemble};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use std::f64::consts::LN_2;

/// Zero GRU weights halve the state and `C_γ = 0` fixes the emission std at
/// ln 2, so the model is linear-Gaussian: F = ½I, Q = σ²I, H = W_φ,
/// R = (ln 2)² I and x₁ ~ N(0, ρ²I).
fn linear_model(n: usize, d_x: usize, rho: f64, sigma: f64, seed: u64) -> ModelTheta {
    let mut m = ModelTheta::zeros(Hyper::gru(n, d_x, 1, 0), rho, sigma).unwrap();
    let mut r = rng::stream(seed, 1);
    m.w_phi = rng::standard_normal_matrix(&mut r, n, m.state_dim());
    m
}

fn as_ssm(m: &ModelTheta) -> LinearGaussianSSM {
    let d = m.state_dim();
    let n = m.n_series();
    LinearGaussianSSM {
        f: DMatrix::identity(d, d) * 0.5,
        q_cov: DMatrix::identity(d, d) * m.sigma.powi(2),
        h: m.w_phi.clone(),
        r: DMatrix::identity(n, n) * LN_2.powi(2),
        init_mean: DVector::zeros(d),
        init_cov: DMatrix::identity(d, d),
    }
}

fn kalman_window(m: &ModelTheta, history: &DMatrix<f64>) -> GaussianBelief {
    let ssm = as_ssm(m);
    let d = m.state_dim();
    let mut b = GaussianBelief::new(DVector::zeros(d), DMatrix::identity(d, d) * m.rho.powi(2)).unwrap();
    for t in 0..history.nrows() {
        if t > 0 {
            b = kalman_predict(&b, &ssm);
        }
        b = kalman_update(&b, &ssm.h, &ssm.r, &history.row(t).transpose()).unwrap();
    }
    b
}

fn history(m: &ModelTheta, p: usize, seed: u64) -> DMatrix<f64> {
    let ssm = as_ssm(m);
    let mut r = rng::stream(seed, 9);
    ssm.simulate(p, &mut r).1
}

#[test]
fn fine_flow_matches_kalman_on_ensemble_moments() {
    // with a fine uniform schedule the Euler error vanishes and the flow
    // reproduces the Kalman update of the ensemble's own moments
    let m = linear_model(3, 2, 1.0, 0.5, 4);
    let y = history(&m, 1, 2);
    let flow = FlowConfig {
        n_lambda: 2000,
        ratio: 1.0,
        jitter: 0.0,
        ..FlowConfig::default()
    };
    let prior = flowcast::ssm::init_ensemble(2000, &m, 8).unwrap();
    let ens = filter_window(&m, None, &y, &DMatrix::zeros(1, 0), 2000, &flow, 8).unwrap();
    let moments = ensemble_moments(&prior.particles, &flow);
    let ssm = as_ssm(&m);
    let kf = kalman_update(&moments, &ssm.h, &ssm.r, &y.row(0).transpose()).unwrap();
    let out = ensemble_moments(&ens.particles, &flow);
    assert!((&out.mean - &kf.mean).norm() / kf.mean.norm() < 2e-3);
    for i in 0..m.state_dim() {
        assert!((out.cov[(i, i)] / kf.cov[(i, i)] - 1.0).abs() < 1e-2, "coord {i}");
    }
}

#[test]
fn default_flow_is_close_to_kalman_in_four_dimensions() {
    let d = 4;
    let (mut err, mut norm) = (0.0, 0.0);
    for seed in 0..10 {
        let mut r = rng::stream(seed, 1000 + d as u64);
        let a = rng::standard_normal_matrix(&mut r, d, d);
        let p = &a * a.transpose() / d as f64 + DMatrix::identity(d, d) * 0.1;
        let mean = rng::standard_normal_matrix(&mut r, d, 1).column(0).into_owned();
        let h = rng::standard_normal_matrix(&mut r, d, d) / (d as f64).sqrt();
        let rd = DVector::from_fn(d, |_, _| r.random_range(0.25..1.0));
        let rr = DMatrix::from_diagonal(&rd);
        let x: DVector<f64> = &mean + psd_sqrt(&p) * rng::standard_normal_matrix(&mut r, d, 1).column(0);
        let y = &h * x + psd_sqrt(&rr) * rng::standard_normal_matrix(&mut r, d, 1).column(0);
        let kf = kalman_update(&GaussianBelief::new(mean.clone(), p.clone()).unwrap(), &h, &rr, &y).unwrap();
        let mut parts = rng::standard_normal_matrix(&mut r, 2000, d) * psd_sqrt(&p);
        for mut row in parts.row_iter_mut() {
            row += mean.transpose();
        }
        let ens = StateEnsemble::new(parts, 0).unwrap();
        let out = flow_update(&ens, &y, &LinearMeasurement { h, r: rr }, &FlowConfig::default()).unwrap();
        err += (out.mean() - &kf.mean).norm_squared();
        norm += kf.mean.norm_squared();
    }
    let rel = (err / norm).sqrt();
    assert!(rel <= 0.05, "stacked relative error {rel}");
}

#[test]
fn rollout_mean_matches_kalman_predictive() {
    let m = linear_model(3, 2, 1.0, 0.5, 5);
    let (p, q, np) = (6, 4, 2000);
    let y = history(&m, p, 3);
    let kf = kalman_window(&m, &y);
    let cfg = PredictConfig {
        n_particles: np,
        ..PredictConfig::default()
    };
    let (dist, _) = predict(&m, None, &y, &DMatrix::zeros(p + q, 0), q, &cfg, 21).unwrap();
    let ssm = as_ssm(&m);
    let mut pred = kf.clone();
    for k in 0..q {
        pred = kalman_predict(&pred, &ssm);
        let f_k = DMatrix::identity(m.state_dim(), m.state_dim()) * 0.5f64.powi(k as i32 + 1);
        let y_mean = &m.w_phi * &pred.mean;
        let y_var = &m.w_phi * &pred.cov * m.w_phi.transpose() + &ssm.r;
        // the ensemble mean carries its own filtering error forward
        let inherited = &m.w_phi * &f_k * &kf.cov * f_k.transpose() * m.w_phi.transpose();
        let mc = dist.samples[k].row_mean();
        for i in 0..m.n_series() {
            let se = ((y_var[(i, i)] + inherited[(i, i)]) / np as f64).sqrt();
            assert!(
                (mc[i] - y_mean[i]).abs() < 3.0 * se,
                "h{} series {i}: {} vs {} (se {se})",
                k + 1,
                mc[i],
                y_mean[i]
            );
        }
    }
}

#[test]
fn single_particle_predict_is_the_flowed_path() {
    let m = ModelTheta::init(Hyper::gru(2, 3, 1, 0), 1.0, 0.3, 7).unwrap();
    let y = history(&linear_model(2, 3, 1.0, 0.3, 1), 5, 4);
    let z = DMatrix::zeros(8, 0);
    let flow = FlowConfig::default();
    let cfg = PredictConfig {
        n_particles: 1,
        flow,
        ..PredictConfig::default()
    };
    let (dist, ens) = predict(&m, None, &y, &z, 3, &cfg, 5).unwrap();
    let alone = filter_window(&m, None, &y, &z, 1, &flow, 5).unwrap();
    assert_eq!(ens, alone);
    let rolled = rollout(&m, None, &alone, &y.row(4).transpose(), &DMatrix::zeros(3, 0), 3, 5, false).unwrap();
    assert_eq!(dist.samples, rolled.samples);
    let path = DMatrix::from_fn(3, 2, |t, i| dist.samples[t][(0, i)]);
    assert_eq!(dist.mean(), path);
    assert_eq!(dist.median(), path);
    for a in [0.1, 0.5, 0.9] {
        assert_eq!(empirical_quantile(&dist, a), path);
    }
}

#[test]
fn independent_runs_agree_in_distribution() {
    let m = ModelTheta::init(Hyper::gru(2, 2, 1, 0), 1.0, 0.4, 3).unwrap();
    let y = history(&linear_model(2, 2, 1.0, 0.4, 2), 6, 6);
    let z = DMatrix::zeros(10, 0);
    let np = 500;
    let cfg = PredictConfig {
        n_particles: np,
        ..PredictConfig::default()
    };
    let (a, _) = predict(&m, None, &y, &z, 4, &cfg, 100).unwrap();
    let (b, _) = predict(&m, None, &y, &z, 4, &cfg, 200).unwrap();
    let stats = |s: &DMatrix<f64>, i: usize| {
        let c = s.column(i);
        let mean = c.mean();
        let var = c.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (np - 1) as f64;
        (mean, var)
    };
    for t in 0..4 {
        for i in 0..2 {
            let (ma, va) = stats(&a.samples[t], i);
            let (mb, vb) = stats(&b.samples[t], i);
            let pooled = ((va + vb) / np as f64).sqrt();
            assert!((ma - mb).abs() < 4.0 * pooled, "h{} series {i}", t + 1);
        }
    }
}

#[test]
fn systematic_resampling_is_unbiased() {
    let mut r = rng::stream(42, 0);
    let np = 10;
    let raw: Vec<f64> = (0..np).map(|_| r.random_range(0.5..1.5)).collect();
    let total: f64 = raw.iter().sum();
    let w: Vec<f64> = raw.iter().map(|v| v / total).collect();
    let trials = 100_000;
    let mut counts = vec![0usize; np];
    for _ in 0..trials {
        let u: f64 = r.random_range(0.0..1.0);
        for i in systematic_resample(&w, u).unwrap() {
            counts[i] += 1;
        }
    }
    for i in 0..np {
        let expected = np as f64 * w[i];
        let got = counts[i] as f64 / trials as f64;
        assert!((got / expected - 1.0).abs() < 0.01, "index {i}: {got} vs {expected}");
    }
}

#[test]
fn huge_measurement_noise_leaves_belief_unchanged() {
    let mut r = rng::stream(3, 3);
    for d in [1, 3, 6] {
        let a = rng::standard_normal_matrix(&mut r, d, d);
        let cov = &a * a.transpose() + DMatrix::identity(d, d);
        let mean = DVector::from_fn(d, |i, _| i as f64 - 1.0);
        let b = GaussianBelief::new(mean.clone(), cov).unwrap();
        let h = rng::standard_normal_matrix(&mut r, 2, d);
        let y = DVector::from_vec(vec![10.0, -10.0]);
        let post = kalman_update(&b, &h, &(DMatrix::identity(2, 2) * 1e12), &y).unwrap();
        assert!((post.mean - mean).amax() <= 1e-6);
    }
}

#[test]
fn bpf_tracks_kalman_in_two_dimensions() {
    let mut r = rng::stream(12, 0);
    let ssm = LinearGaussianSSM {
        f: DMatrix::from_row_slice(2, 2, &[0.8, 0.1, -0.2, 0.7]),
        q_cov: DMatrix::identity(2, 2) * 0.25,
        h: DMatrix::identity(2, 2),
        r: DMatrix::identity(2, 2) * 0.25,
        init_mean: DVector::from_vec(vec![2.0, -1.0]),
        init_cov: DMatrix::identity(2, 2),
    };
    let (_, ys) = ssm.simulate(10, &mut r);
    let kf = run_kalman(&ssm, &ys).unwrap();
    let bpf = run_bpf(&ssm, &ys, 5000, 0.5, 3).unwrap();
    let rel = (&bpf.means - &kf.means).norm() / kf.means.norm();
    assert!(rel <= 0.05, "relative error {rel}");
    assert!(bpf.ess.iter().all(|e| *e >= 1.0 && *e <= 5000.0 + 1e-9));
}
