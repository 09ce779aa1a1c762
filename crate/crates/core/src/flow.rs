//! Exact Daum-Huang particle flow.
//!
//! Within one time step the predictive ensemble is transported to the
//! posterior by Euler integration of `dη/dλ = A(λ)η + b(λ)` over pseudo-time
//! `λ ∈ [0, 1]`, with
//!
//! ```text
//! A(λ) = -½ P̄ Hᵀ (λ H P̄ Hᵀ + R)⁻¹ H
//! b(λ) = (I + 2λA) [ (I + λA) P̄ Hᵀ R⁻¹ y + A η̄₀ ]
//! ```
//!
//! `P̄` and `η̄₀` are estimated once from the input ensemble. The measurement
//! model is relinearized at the running particle mean `η̄_λ` before every
//! step. `A` is kept in factored form `K G` with `K = -½ P̄ Hᵀ` (D×N) and
//! `G = S⁻¹ H` (N×D), so applying it costs O(D·N) per particle.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::spd_cholesky;
use crate::ssm::{emission_std, ModelTheta, StateEnsemble};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowConfig {
    pub n_lambda: usize,
    /// Geometric ratio between consecutive pseudo-time steps.
    pub ratio: f64,
    /// Added to the diagonal of the ensemble covariance.
    pub jitter: f64,
    /// Prior covariance scale used when the ensemble has a single particle.
    pub single_particle_prior_scale: f64,
    pub relinearize_every_step: bool,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            n_lambda: 29,
            ratio: 1.2,
            jitter: 1e-2,
            single_particle_prior_scale: 1.0,
            relinearize_every_step: true,
        }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_lambda == 0 {
            return Err(Error::invalid("flow.n_lambda", "must be at least 1"));
        }
        if !(self.ratio > 0.0) || !self.ratio.is_finite() {
            return Err(Error::invalid("flow.ratio", "must be positive"));
        }
        if !(self.jitter >= 0.0) {
            return Err(Error::invalid("flow.jitter", "must be >= 0"));
        }
        if !(self.single_particle_prior_scale > 0.0) {
            return Err(Error::invalid("flow.single_particle_prior_scale", "must be positive"));
        }
        Ok(())
    }
}

/// Mean/covariance pair.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianBelief {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianBelief {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        if cov.nrows() != mean.len() || cov.ncols() != mean.len() {
            return Err(Error::shape(
                "gaussian belief",
                format!("{0}x{0}", mean.len()),
                format!("{}x{}", cov.nrows(), cov.ncols()),
            ));
        }
        Ok(Self { mean, cov })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Pseudo-time steps `ε_m = ε₁ q^{m-1}`, normalized to sum to one.
pub fn step_schedule(config: &FlowConfig) -> Vec<f64> {
    let n = config.n_lambda.max(1);
    let q = config.ratio;
    let raw: Vec<f64> = (0..n).map(|m| q.powi(m as i32)).collect();
    let total: f64 = raw.iter().sum();
    let mut steps: Vec<f64> = raw.iter().map(|r| r / total).collect();
    // push the rounding residue into the largest step
    let big = if q >= 1.0 { n - 1 } else { 0 };
    let rest: f64 = steps
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != big)
        .map(|(_, e)| e)
        .sum();
    steps[big] = 1.0 - rest;
    steps
}

/// Sample mean and population covariance plus jitter; a single particle
/// falls back to `c·I`.
pub fn ensemble_moments(particles: &DMatrix<f64>, config: &FlowConfig) -> GaussianBelief {
    let (np, d) = particles.shape();
    let mean = particles.row_mean().transpose();
    let cov = if np >= 2 {
        let mut centered = particles.clone();
        for mut row in centered.row_iter_mut() {
            row -= mean.transpose();
        }
        let mut cov = centered.transpose() * &centered / np as f64;
        cov = (&cov + cov.transpose()) * 0.5;
        for i in 0..d {
            cov[(i, i)] += config.jitter;
        }
        cov
    } else {
        DMatrix::identity(d, d) * config.single_particle_prior_scale
    };
    GaussianBelief { mean, cov }
}

/// Local linear-Gaussian approximation of the measurement model:
/// `y ≈ H η + e + w`, `w ~ N(0, R)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linearized {
    pub h: DMatrix<f64>,
    pub e: DVector<f64>,
    pub r: DMatrix<f64>,
}

pub trait MeasurementLinearization {
    fn linearize(&self, at: &DVector<f64>) -> Result<Linearized>;
}

/// Linearization of the model's emission: `H = W_φ`, `e = 0` (the mean map
/// is linear), `R = diag(emission_std(C_γ η̄))²`.
#[derive(Debug, Clone, Copy)]
pub struct ModelMeasurement<'a>(pub &'a ModelTheta);

impl MeasurementLinearization for ModelMeasurement<'_> {
    fn linearize(&self, at: &DVector<f64>) -> Result<Linearized> {
        let m = self.0;
        let std = (&m.c_gamma * at).map(emission_std);
        Ok(Linearized {
            h: m.w_phi.clone(),
            e: DVector::zeros(m.n_series()),
            r: DMatrix::from_diagonal(&std.map(|s| s * s)),
        })
    }
}

/// Flow coefficients at one pseudo-time, with `A = k · g`.
#[derive(Debug, Clone, PartialEq)]
pub struct EdhCoefficients {
    pub k: DMatrix<f64>,
    pub g: DMatrix<f64>,
    pub b: DVector<f64>,
}

impl EdhCoefficients {
    pub fn a_matrix(&self) -> DMatrix<f64> {
        &self.k * &self.g
    }

    fn apply_a(&self, v: &DVector<f64>) -> DVector<f64> {
        &self.k * (&self.g * v)
    }
}

/// Factored coefficients; `p_ht = P̄ Hᵀ` is supplied so it can be reused
/// across steps while `H` is unchanged.
fn edh_factored(
    belief: &GaussianBelief,
    h: &DMatrix<f64>,
    p_ht: &DMatrix<f64>,
    r: &DMatrix<f64>,
    y_eff: &DVector<f64>,
    lambda: f64,
) -> Result<EdhCoefficients> {
    let s = h * p_ht * lambda + r;
    let s = (&s + s.transpose()) * 0.5;
    let chol = spd_cholesky(&s).ok_or(Error::FlowSolve { lambda })?;
    let g = chol.solve(h);
    let k = p_ht * -0.5;
    let coeffs = EdhCoefficients {
        k,
        g,
        b: DVector::zeros(0),
    };
    let r_chol = spd_cholesky(r).ok_or(Error::FlowSolve { lambda })?;
    let v = p_ht * r_chol.solve(y_eff);
    let inner = &v + coeffs.apply_a(&v) * lambda + coeffs.apply_a(&belief.mean);
    let b = &inner + coeffs.apply_a(&inner) * (2.0 * lambda);
    Ok(EdhCoefficients { b, ..coeffs })
}

/// `A(λ)` and `b(λ)` as dense quantities.
pub fn edh_coefficients(
    belief: &GaussianBelief,
    h: &DMatrix<f64>,
    r: &DMatrix<f64>,
    y_eff: &DVector<f64>,
    lambda: f64,
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let d = belief.dim();
    let n = h.nrows();
    if h.ncols() != d || r.shape() != (n, n) || y_eff.len() != n {
        return Err(Error::shape(
            "edh coefficients",
            format!("H {n}x{d}, R {n}x{n}, y {n}"),
            format!(
                "H {}x{}, R {}x{}, y {}",
                h.nrows(),
                h.ncols(),
                r.nrows(),
                r.ncols(),
                y_eff.len()
            ),
        ));
    }
    let p_ht = &belief.cov * h.transpose();
    let c = edh_factored(belief, h, &p_ht, r, y_eff, lambda)?;
    Ok((c.a_matrix(), c.b))
}

/// One Euler step `η ← η + ε (A η + b)` with its coefficients frozen.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowStep {
    pub lambda: f64,
    pub epsilon: f64,
    pub coeffs: EdhCoefficients,
}

/// The sequence of frozen steps taken by one flow update. Replaying it on
/// any point set applies the same affine map the flow applied.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FlowTrace {
    pub steps: Vec<FlowStep>,
}

impl FlowTrace {
    /// Applies every step to the rows of `points`.
    pub fn apply(&self, points: &DMatrix<f64>) -> DMatrix<f64> {
        let mut eta = points.clone();
        for step in &self.steps {
            eta = apply_step(&eta, step);
        }
        eta
    }
}

fn apply_step(eta: &DMatrix<f64>, step: &FlowStep) -> DMatrix<f64> {
    let c = &step.coeffs;
    // rows are particles: η Aᵀ = (η gᵀ) kᵀ
    let drift = (eta * c.g.transpose()) * c.k.transpose();
    let mut out = eta + drift * step.epsilon;
    let shift = c.b.transpose() * step.epsilon;
    for mut row in out.row_iter_mut() {
        row += &shift;
    }
    out
}

/// Migrates the predictive ensemble to the posterior for observation `y`.
pub fn flow_update<M: MeasurementLinearization + ?Sized>(
    ensemble: &StateEnsemble,
    y: &DVector<f64>,
    measurement: &M,
    config: &FlowConfig,
) -> Result<StateEnsemble> {
    flow_update_traced(ensemble, y, measurement, config).map(|(e, _)| e)
}

/// [`flow_update`] that also returns the frozen coefficient sequence.
pub fn flow_update_traced<M: MeasurementLinearization + ?Sized>(
    ensemble: &StateEnsemble,
    y: &DVector<f64>,
    measurement: &M,
    config: &FlowConfig,
) -> Result<(StateEnsemble, FlowTrace)> {
    config.validate()?;
    let belief = ensemble_moments(&ensemble.particles, config);
    let schedule = step_schedule(config);
    let mut eta = ensemble.particles.clone();
    let mut lambda = 0.0;
    let mut lin = measurement.linearize(&belief.mean)?;
    check_linearization(&lin, belief.dim(), y.len())?;
    let mut p_ht = &belief.cov * lin.h.transpose();
    let mut trace = FlowTrace {
        steps: Vec::with_capacity(schedule.len()),
    };

    for (m, &epsilon) in schedule.iter().enumerate() {
        if m > 0 && config.relinearize_every_step {
            let mean = eta.row_mean().transpose();
            let next = measurement.linearize(&mean)?;
            if next.h != lin.h {
                p_ht = &belief.cov * next.h.transpose();
            }
            lin = next;
        }
        let y_eff = y - &lin.e;
        let coeffs = edh_factored(&belief, &lin.h, &p_ht, &lin.r, &y_eff, lambda)?;
        let step = FlowStep {
            lambda,
            epsilon,
            coeffs,
        };
        eta = apply_step(&eta, &step);
        if let Some(bad) = (0..eta.nrows()).find(|&j| eta.row(j).iter().any(|v| !v.is_finite())) {
            return Err(Error::FlowDiverged {
                step: m,
                particle: bad,
            });
        }
        trace.steps.push(step);
        lambda += epsilon;
    }
    Ok((
        StateEnsemble {
            particles: eta,
            time_index: ensemble.time_index,
        },
        trace,
    ))
}

fn check_linearization(lin: &Linearized, d: usize, n: usize) -> Result<()> {
    if lin.h.shape() != (n, d) || lin.e.len() != n || lin.r.shape() != (n, n) {
        return Err(Error::shape(
            "measurement linearization",
            format!("H {n}x{d}"),
            format!("H {}x{}", lin.h.nrows(), lin.h.ncols()),
        ));
    }
    Ok(())
}

/// Linear-Gaussian measurement `y = H x + w`, `w ~ N(0, R)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearMeasurement {
    pub h: DMatrix<f64>,
    pub r: DMatrix<f64>,
}

impl MeasurementLinearization for LinearMeasurement {
    fn linearize(&self, _at: &DVector<f64>) -> Result<Linearized> {
        Ok(Linearized {
            h: self.h.clone(),
            e: DVector::zeros(self.h.nrows()),
            r: self.r.clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::softplus;
    use crate::rng;
    use proptest::prelude::*;

    fn scalar(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    #[test]
    fn uniform_schedule() {
        let cfg = FlowConfig {
            n_lambda: 4,
            ratio: 1.0,
            ..Default::default()
        };
        assert_eq!(step_schedule(&cfg), vec![0.25; 4]);
    }

    #[test]
    fn default_schedule_ratio() {
        let s = step_schedule(&FlowConfig::default());
        assert_eq!(s.len(), 29);
        let expected = 1.2f64.powi(28);
        assert!((s[28] / s[0] - expected).abs() / expected < 1e-9);
        assert!((expected - 164.845).abs() < 1e-3);
    }

    proptest! {
        #[test]
        fn schedule_sums_to_one(n in 1usize..200, q in 0.3f64..3.0) {
            let s = step_schedule(&FlowConfig { n_lambda: n, ratio: q, ..Default::default() });
            prop_assert_eq!(s.len(), n);
            prop_assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(s.iter().all(|e| *e > 0.0));
        }
    }

    #[test]
    fn two_particle_moments() {
        let cfg = FlowConfig {
            jitter: 0.0,
            ..Default::default()
        };
        let b = ensemble_moments(&DMatrix::from_column_slice(2, 1, &[0.0, 2.0]), &cfg);
        assert_eq!(b.mean[0], 1.0);
        assert_eq!(b.cov[(0, 0)], 1.0);

        let single = ensemble_moments(&DMatrix::from_row_slice(1, 3, &[1.0, 2.0, 3.0]), &FlowConfig::default());
        assert_eq!(single.cov, DMatrix::identity(3, 3));
    }

    #[test]
    fn moments_symmetric_with_jitter_floor() {
        let mut r = rng::stream(3, 0);
        let p = rng::standard_normal_matrix(&mut r, 7, 4);
        let cfg = FlowConfig::default();
        let b = ensemble_moments(&p, &cfg);
        assert_eq!(b.cov, b.cov.transpose());
        for i in 0..4 {
            assert!(b.cov[(i, i)] >= cfg.jitter);
        }
    }

    #[test]
    fn edh_zero_h_is_identity_flow() {
        let belief = GaussianBelief::new(DVector::from_vec(vec![1.0, 2.0]), DMatrix::identity(2, 2)).unwrap();
        let (a, b) = edh_coefficients(&belief, &DMatrix::zeros(1, 2), &scalar(1.0), &DVector::from_vec(vec![3.0]), 0.3).unwrap();
        assert_eq!(a, DMatrix::zeros(2, 2));
        assert_eq!(b, DVector::zeros(2));
    }

    #[test]
    fn edh_scalar_hand_values() {
        let belief = GaussianBelief::new(DVector::from_vec(vec![0.0]), scalar(1.0)).unwrap();
        let y = DVector::from_vec(vec![1.0]);
        let (a, b) = edh_coefficients(&belief, &scalar(1.0), &scalar(1.0), &y, 0.0).unwrap();
        assert!((a[(0, 0)] + 0.5).abs() < 1e-15);
        assert!((b[0] - 1.0).abs() < 1e-15);
        let (a, b) = edh_coefficients(&belief, &scalar(1.0), &scalar(1.0), &y, 1.0).unwrap();
        assert!((a[(0, 0)] + 0.25).abs() < 1e-15);
        assert!((b[0] - 0.375).abs() < 1e-15);
    }

    #[test]
    fn edh_reports_lambda_on_solve_failure() {
        let belief = GaussianBelief::new(DVector::zeros(1), scalar(1.0)).unwrap();
        let err = edh_coefficients(&belief, &scalar(1.0), &scalar(-5.0), &DVector::zeros(1), 0.5).unwrap_err();
        assert!(matches!(err, Error::FlowSolve { lambda } if lambda == 0.5));
    }

    #[test]
    fn conjugate_scalar_flow() {
        let mut r = rng::stream(42, 0);
        let prior = rng::standard_normal_matrix(&mut r, 1000, 1);
        let e = StateEnsemble::new(prior, 0).unwrap();
        let meas = LinearMeasurement {
            h: scalar(1.0),
            r: scalar(1.0),
        };
        let cfg = FlowConfig {
            jitter: 0.0,
            ..Default::default()
        };
        let out = flow_update(&e, &DVector::from_vec(vec![1.0]), &meas, &cfg).unwrap();
        let col = out.particles.column(0);
        let mean = col.mean();
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / col.len() as f64;
        assert!((mean - 0.5).abs() < 0.05, "mean {mean}");
        assert!((var - 0.5).abs() < 0.1, "var {var}");
    }

    #[test]
    fn zero_emission_leaves_ensemble_unchanged() {
        let mut r = rng::stream(1, 0);
        let e = StateEnsemble::new(rng::standard_normal_matrix(&mut r, 20, 3), 4).unwrap();
        let meas = LinearMeasurement {
            h: DMatrix::zeros(2, 3),
            r: DMatrix::identity(2, 2),
        };
        let out = flow_update(&e, &DVector::from_vec(vec![5.0, -1.0]), &meas, &FlowConfig::default()).unwrap();
        assert_eq!(out, e);
    }

    #[test]
    fn model_measurement_uses_softplus_noise() {
        use crate::ssm::Hyper;
        let m = ModelTheta::init(Hyper::gru(2, 2, 1, 0), 1.0, 0.0, 3).unwrap();
        let at = DVector::from_vec(vec![0.1, -0.2, 0.3, 0.4]);
        let lin = ModelMeasurement(&m).linearize(&at).unwrap();
        assert_eq!(lin.h, m.w_phi);
        let std = (&m.c_gamma * &at).map(softplus);
        assert!((lin.r[(1, 1)] - std[1] * std[1]).abs() < 1e-15);
        assert_eq!(lin.r[(0, 1)], 0.0);
    }

    #[test]
    fn trace_replay_matches_flow() {
        let mut r = rng::stream(5, 0);
        let e = StateEnsemble::new(rng::standard_normal_matrix(&mut r, 30, 3), 0).unwrap();
        let meas = LinearMeasurement {
            h: DMatrix::from_row_slice(2, 3, &[1.0, 0.5, 0.0, 0.0, -1.0, 2.0]),
            r: DMatrix::identity(2, 2) * 0.3,
        };
        let (out, trace) = flow_update_traced(&e, &DVector::from_vec(vec![0.4, 1.0]), &meas, &FlowConfig::default()).unwrap();
        assert_eq!(trace.steps.len(), 29);
        assert_eq!(trace.apply(&e.particles), out.particles);
    }
}
