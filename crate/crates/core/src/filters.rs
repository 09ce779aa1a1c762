//! Reference filters: the Kalman filter for linear-Gaussian models and the
//! bootstrap particle filter. Both serve as oracles and baselines for the
//! particle flow.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{flow_update, FlowConfig, GaussianBelief, LinearMeasurement};
use crate::linalg::{spd_cholesky, symmetrize};
use crate::rng;
use crate::ssm::{self, emission_std, Graph, ModelTheta, NoiseDraws, StateEnsemble};

/// `x_t = F x_{t-1} + v`, `v ~ N(0, Q)`; `y_t = H x_t + w`, `w ~ N(0, R)`.
/// `init_*` describe `x_0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearGaussianSSM {
    pub f: DMatrix<f64>,
    pub q_cov: DMatrix<f64>,
    pub h: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub init_mean: DVector<f64>,
    pub init_cov: DMatrix<f64>,
}

/// Symmetric PSD square root via eigendecomposition; negative eigenvalues
/// are clipped to zero.
pub fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(symmetrize(m));
    let s = DMatrix::from_diagonal(&eig.eigenvalues.map(|v| v.max(0.0).sqrt()));
    &eig.eigenvectors * s * eig.eigenvectors.transpose()
}

impl LinearGaussianSSM {
    pub fn state_dim(&self) -> usize {
        self.f.nrows()
    }

    pub fn obs_dim(&self) -> usize {
        self.h.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.state_dim();
        let n = self.obs_dim();
        let ok = self.f.shape() == (d, d)
            && self.q_cov.shape() == (d, d)
            && self.h.shape() == (n, d)
            && self.r.shape() == (n, n)
            && self.init_mean.len() == d
            && self.init_cov.shape() == (d, d);
        if !ok {
            return Err(Error::shape("linear gaussian ssm", format!("D={d}, N={n}"), "inconsistent blocks"));
        }
        Ok(())
    }

    pub fn measurement(&self) -> LinearMeasurement {
        LinearMeasurement {
            h: self.h.clone(),
            r: self.r.clone(),
        }
    }

    pub fn init_belief(&self) -> GaussianBelief {
        GaussianBelief {
            mean: self.init_mean.clone(),
            cov: self.init_cov.clone(),
        }
    }

    /// Simulates `T` steps, returning `(states, observations)` as T×D and T×N.
    pub fn simulate<R: Rng + ?Sized>(&self, steps: usize, rng: &mut R) -> (DMatrix<f64>, DMatrix<f64>) {
        let d = self.state_dim();
        let n = self.obs_dim();
        let q_half = psd_sqrt(&self.q_cov);
        let r_half = psd_sqrt(&self.r);
        let p_half = psd_sqrt(&self.init_cov);
        let mut x = &self.init_mean + &p_half * rng::standard_normal_matrix(rng, d, 1).column(0);
        let mut xs = DMatrix::zeros(steps, d);
        let mut ys = DMatrix::zeros(steps, n);
        for t in 0..steps {
            x = &self.f * &x + &q_half * rng::standard_normal_matrix(rng, d, 1).column(0);
            let y = &self.h * &x + &r_half * rng::standard_normal_matrix(rng, n, 1).column(0);
            xs.row_mut(t).copy_from(&x.transpose());
            ys.row_mut(t).copy_from(&y.transpose());
        }
        (xs, ys)
    }
}

pub fn kalman_predict(belief: &GaussianBelief, ssm: &LinearGaussianSSM) -> GaussianBelief {
    GaussianBelief {
        mean: &ssm.f * &belief.mean,
        cov: symmetrize(&(&ssm.f * &belief.cov * ssm.f.transpose() + &ssm.q_cov)),
    }
}

pub fn kalman_update(
    belief: &GaussianBelief,
    h: &DMatrix<f64>,
    r: &DMatrix<f64>,
    y: &DVector<f64>,
) -> Result<GaussianBelief> {
    let p = &belief.cov;
    let s = symmetrize(&(h * p * h.transpose() + r));
    let chol = spd_cholesky(&s).ok_or(Error::SingularInnovation)?;
    // K = P Hᵀ S⁻¹  ⇔  Kᵀ = S⁻¹ H P
    let k = chol.solve(&(h * p)).transpose();
    let innovation = y - h * &belief.mean;
    let mean = &belief.mean + &k * innovation;
    let d = p.nrows();
    let cov = symmetrize(&((DMatrix::identity(d, d) - &k * h) * p));
    Ok(GaussianBelief { mean, cov })
}

/// Filtered beliefs for `t = 1..T` (one per observation row).
pub fn kalman_filter(ssm: &LinearGaussianSSM, ys: &DMatrix<f64>) -> Result<Vec<GaussianBelief>> {
    let mut belief = ssm.init_belief();
    let mut out = Vec::with_capacity(ys.nrows());
    for t in 0..ys.nrows() {
        let y = ys.row(t).transpose();
        belief = kalman_update(&kalman_predict(&belief, ssm), &ssm.h, &ssm.r, &y)?;
        out.push(belief.clone());
    }
    Ok(out)
}

/// Particles with log-domain weights.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedEnsemble {
    pub particles: DMatrix<f64>,
    pub log_weights: DVector<f64>,
}

impl WeightedEnsemble {
    pub fn uniform(particles: DMatrix<f64>) -> Self {
        let n = particles.nrows();
        Self {
            particles,
            log_weights: DVector::from_element(n, -(n as f64).ln()),
        }
    }

    pub fn n_particles(&self) -> usize {
        self.particles.nrows()
    }

    /// Normalized linear-domain weights.
    pub fn weights(&self) -> DVector<f64> {
        normalized_weights(&self.log_weights).unwrap_or_else(|| {
            DVector::from_element(self.n_particles(), 1.0 / self.n_particles() as f64)
        })
    }

    pub fn ess(&self) -> f64 {
        effective_sample_size(&self.weights())
    }

    pub fn mean(&self) -> DVector<f64> {
        let w = self.weights();
        self.particles.transpose() * w
    }
}

/// Max-subtracted softmax of log-weights; `None` if every entry is −∞ or NaN.
fn normalized_weights(log_w: &DVector<f64>) -> Option<DVector<f64>> {
    let m = log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return None;
    }
    let e = log_w.map(|v| (v - m).exp());
    let s = e.sum();
    Some(e / s)
}

pub fn effective_sample_size(weights: &DVector<f64>) -> f64 {
    1.0 / weights.iter().map(|w| w * w).sum::<f64>()
}

/// Systematic resampling: positions `(u + k)/N_p` mapped through the
/// cumulative weights.
pub fn systematic_resample(weights: &[f64], u: f64) -> Result<Vec<usize>> {
    let n = weights.len();
    let sum: f64 = weights.iter().sum();
    if n == 0 || (sum - 1.0).abs() > 1e-8 || weights.iter().any(|w| *w < 0.0) {
        return Err(Error::UnnormalizedWeights { sum });
    }
    if !(0.0..1.0).contains(&u) {
        return Err(Error::invalid("u", "must lie in [0, 1)"));
    }
    let mut out = Vec::with_capacity(n);
    let mut cum = weights[0];
    let mut i = 0;
    for k in 0..n {
        let pos = (u + k as f64) / n as f64;
        while pos >= cum && i < n - 1 {
            i += 1;
            cum += weights[i];
        }
        out.push(i);
    }
    Ok(out)
}

/// Dynamics plus likelihood, as seen by the bootstrap filter.
pub trait ParticleModel {
    fn propagate(&self, particles: &DMatrix<f64>, rng: &mut dyn RngCore) -> Result<DMatrix<f64>>;
    fn log_likelihood(&self, particles: &DMatrix<f64>, y: &DVector<f64>) -> Result<DVector<f64>>;
}

impl ParticleModel for LinearGaussianSSM {
    fn propagate(&self, particles: &DMatrix<f64>, rng: &mut dyn RngCore) -> Result<DMatrix<f64>> {
        let q_half = psd_sqrt(&self.q_cov);
        let xi = rng::standard_normal_matrix(rng, particles.nrows(), self.state_dim());
        Ok(particles * self.f.transpose() + xi * q_half.transpose())
    }

    fn log_likelihood(&self, particles: &DMatrix<f64>, y: &DVector<f64>) -> Result<DVector<f64>> {
        let chol = spd_cholesky(&self.r).ok_or(Error::SingularInnovation)?;
        let n = self.obs_dim() as f64;
        let log_det: f64 = chol.l().diagonal().iter().map(|v| 2.0 * v.ln()).sum();
        let pred = particles * self.h.transpose();
        let mut out = DVector::zeros(particles.nrows());
        for j in 0..particles.nrows() {
            let resid = y - pred.row(j).transpose();
            let maha = resid.dot(&chol.solve(&resid));
            out[j] = -0.5 * (n * (2.0 * std::f64::consts::PI).ln() + log_det + maha);
        }
        Ok(out)
    }
}

/// The forecasting model driven as a particle filter for one time step:
/// transition conditioned on the shared previous observation, then the
/// heteroscedastic Gaussian emission likelihood.
pub struct ModelStep<'a> {
    pub model: &'a ModelTheta,
    pub graph: Option<&'a Graph>,
    pub y_prev: DVector<f64>,
    pub z_t: DVector<f64>,
}

impl ParticleModel for ModelStep<'_> {
    fn propagate(&self, particles: &DMatrix<f64>, rng: &mut dyn RngCore) -> Result<DMatrix<f64>> {
        let np = particles.nrows();
        let d = self.model.state_dim();
        let noise = NoiseDraws {
            dyn_noise: rng::standard_normal_matrix(rng, np, d),
            meas_noise: DMatrix::zeros(np, self.model.n_series()),
            seed: 0,
            stream: 0,
        };
        let e = StateEnsemble::new(particles.clone(), 0)?;
        let y = DMatrix::from_fn(np, self.y_prev.len(), |_, i| self.y_prev[i]);
        Ok(ssm::transition(self.model, self.graph, &e, &y, &self.z_t, Some(&noise))?.particles)
    }

    fn log_likelihood(&self, particles: &DMatrix<f64>, y: &DVector<f64>) -> Result<DVector<f64>> {
        let m = self.model;
        let mean = particles * m.w_phi.transpose();
        let pre = particles * m.c_gamma.transpose();
        let half_log_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
        Ok(DVector::from_fn(particles.nrows(), |j, _| {
            (0..y.len())
                .map(|i| {
                    let s = emission_std(pre[(j, i)]);
                    let z = (y[i] - mean[(j, i)]) / s;
                    -half_log_2pi - s.ln() - 0.5 * z * z
                })
                .sum()
        }))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BpfStepInfo {
    /// ESS of the updated weights, before any resampling.
    pub ess: f64,
    pub resampled: bool,
    /// Weighted mean before resampling.
    pub mean: DVector<f64>,
}

/// One bootstrap step: propagate, weight by the likelihood, normalize, and
/// resample systematically when `ESS < ess_threshold · N_p`.
pub fn bpf_step<M: ParticleModel + ?Sized, R: Rng + ?Sized>(
    ensemble: &WeightedEnsemble,
    y: &DVector<f64>,
    model: &M,
    ess_threshold: f64,
    time_index: usize,
    rng: &mut R,
) -> Result<(WeightedEnsemble, BpfStepInfo)> {
    let mut dyn_rng = rng::stream(rng.next_u64(), 0);
    let particles = model.propagate(&ensemble.particles, &mut dyn_rng)?;
    let ll = model.log_likelihood(&particles, y)?;
    let log_w = &ensemble.log_weights + ll;
    let w = normalized_weights(&log_w).ok_or(Error::WeightUnderflow { time: time_index })?;
    let ess = effective_sample_size(&w);
    let mean = particles.transpose() * &w;
    let np = w.len();
    if ess < ess_threshold * np as f64 {
        let u: f64 = rng.random_range(0.0..1.0);
        let idx = systematic_resample(w.as_slice(), u)?;
        let resampled = DMatrix::from_fn(np, particles.ncols(), |j, c| particles[(idx[j], c)]);
        let info = BpfStepInfo {
            ess,
            resampled: true,
            mean,
        };
        Ok((WeightedEnsemble::uniform(resampled), info))
    } else {
        let info = BpfStepInfo {
            ess,
            resampled: false,
            mean,
        };
        let log_weights = w.map(f64::ln);
        Ok((WeightedEnsemble { particles, log_weights }, info))
    }
}

/// Per-step posterior means and ESS values of a filter run.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterRun {
    pub means: DMatrix<f64>,
    pub ess: Vec<f64>,
}

pub fn run_kalman(ssm: &LinearGaussianSSM, ys: &DMatrix<f64>) -> Result<FilterRun> {
    let beliefs = kalman_filter(ssm, ys)?;
    let mut means = DMatrix::zeros(ys.nrows(), ssm.state_dim());
    for (t, b) in beliefs.iter().enumerate() {
        means.row_mut(t).copy_from(&b.mean.transpose());
    }
    Ok(FilterRun {
        means,
        ess: Vec::new(),
    })
}

pub fn run_bpf(
    ssm: &LinearGaussianSSM,
    ys: &DMatrix<f64>,
    n_particles: usize,
    ess_threshold: f64,
    seed: u64,
) -> Result<FilterRun> {
    let mut r = rng::stream(seed, 0xb9f);
    let p_half = psd_sqrt(&ssm.init_cov);
    let mut init = rng::standard_normal_matrix(&mut r, n_particles, ssm.state_dim()) * p_half.transpose();
    for mut row in init.row_iter_mut() {
        row += ssm.init_mean.transpose();
    }
    let mut ens = WeightedEnsemble::uniform(init);
    let mut means = DMatrix::zeros(ys.nrows(), ssm.state_dim());
    let mut ess = Vec::with_capacity(ys.nrows());
    for t in 0..ys.nrows() {
        let mut step_rng = rng::stream(seed, 0x1000 + t as u64);
        let (next, info) = bpf_step(&ens, &ys.row(t).transpose(), ssm, ess_threshold, t, &mut step_rng)?;
        means.row_mut(t).copy_from(&info.mean.transpose());
        ess.push(info.ess);
        ens = next;
    }
    Ok(FilterRun { means, ess })
}

/// Particle-flow filter: propagate the equally weighted ensemble through the
/// linear dynamics, then flow it to the posterior at every observation.
pub fn run_flow_filter(
    ssm: &LinearGaussianSSM,
    ys: &DMatrix<f64>,
    n_particles: usize,
    config: &FlowConfig,
    seed: u64,
) -> Result<FilterRun> {
    let mut r = rng::stream(seed, 0xf10);
    let p_half = psd_sqrt(&ssm.init_cov);
    let mut init = rng::standard_normal_matrix(&mut r, n_particles, ssm.state_dim()) * p_half.transpose();
    for mut row in init.row_iter_mut() {
        row += ssm.init_mean.transpose();
    }
    let mut ens = StateEnsemble::new(init, 0)?;
    let meas = ssm.measurement();
    let mut means = DMatrix::zeros(ys.nrows(), ssm.state_dim());
    for t in 0..ys.nrows() {
        let mut step_rng = rng::stream(seed, 0x2000 + t as u64);
        let predicted = StateEnsemble::new(ssm.propagate(&ens.particles, &mut step_rng)?, t + 1)?;
        ens = flow_update(&predicted, &ys.row(t).transpose(), &meas, config)?;
        means.row_mut(t).copy_from(&ens.particles.row_mean());
    }
    Ok(FilterRun {
        means,
        ess: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::min_eigenvalue;
    use proptest::prelude::*;

    fn m(r: usize, c: usize, v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(r, c, v)
    }

    fn ssm_2d() -> LinearGaussianSSM {
        LinearGaussianSSM {
            f: m(2, 2, &[0.9, 0.1, -0.2, 0.7]),
            q_cov: m(2, 2, &[0.3, 0.05, 0.05, 0.2]),
            h: m(1, 2, &[1.0, 0.5]),
            r: m(1, 1, &[0.4]),
            init_mean: DVector::from_vec(vec![1.0, -1.0]),
            init_cov: DMatrix::identity(2, 2),
        }
    }

    #[test]
    fn predict_identity_and_zero() {
        let mut s = ssm_2d();
        let b = GaussianBelief::new(DVector::from_vec(vec![1.0, 2.0]), m(2, 2, &[2.0, 0.3, 0.3, 1.0])).unwrap();
        s.f = DMatrix::identity(2, 2);
        s.q_cov = DMatrix::zeros(2, 2);
        assert_eq!(kalman_predict(&b, &s), b);
        s.f = DMatrix::zeros(2, 2);
        s.q_cov = m(2, 2, &[0.5, 0.1, 0.1, 0.4]);
        let p = kalman_predict(&b, &s);
        assert_eq!(p.mean, DVector::zeros(2));
        assert_eq!(p.cov, s.q_cov);
    }

    #[test]
    fn predict_matches_hand_arithmetic() {
        let s = ssm_2d();
        let b = GaussianBelief::new(DVector::from_vec(vec![1.0, 2.0]), m(2, 2, &[2.0, 0.3, 0.3, 1.0])).unwrap();
        let p = kalman_predict(&b, &s);
        // F m = [0.9 + 0.2, -0.2 + 1.4]
        assert!((p.mean[0] - 1.1).abs() < 1e-12);
        assert!((p.mean[1] - 1.2).abs() < 1e-12);
        // (F P Fᵀ)_00 = 0.9²·2 + 2·0.9·0.1·0.3 + 0.1²·1 = 1.684, + Q_00
        assert!((p.cov[(0, 0)] - (1.684 + 0.3)).abs() < 1e-12);
        // (F P Fᵀ)_01 = 0.9(-0.2·2 + 0.7·0.3) + 0.1(-0.2·0.3 + 0.7·1) = -0.107
        assert!((p.cov[(0, 1)] - (-0.107 + 0.05)).abs() < 1e-12);
        // (F P Fᵀ)_11 = 0.04·2 + 2·(-0.2)(0.7)(0.3) + 0.49 = 0.486
        assert!((p.cov[(1, 1)] - (0.486 + 0.2)).abs() < 1e-12);
    }

    #[test]
    fn conjugate_update() {
        let b = GaussianBelief::new(DVector::zeros(1), m(1, 1, &[1.0])).unwrap();
        let post = kalman_update(&b, &m(1, 1, &[1.0]), &m(1, 1, &[1.0]), &DVector::from_vec(vec![1.0])).unwrap();
        assert!((post.mean[0] - 0.5).abs() < 1e-15);
        assert!((post.cov[(0, 0)] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn uninformative_updates() {
        let b = GaussianBelief::new(DVector::from_vec(vec![0.3, -0.2]), m(2, 2, &[1.0, 0.2, 0.2, 0.5])).unwrap();
        let y = DVector::from_vec(vec![4.0]);
        let same = kalman_update(&b, &DMatrix::zeros(1, 2), &m(1, 1, &[1.0]), &y).unwrap();
        assert!((same.mean - &b.mean).norm() == 0.0);
        assert!((same.cov - &b.cov).norm() < 1e-15);
        let weak = kalman_update(&b, &m(1, 2, &[1.0, 1.0]), &m(1, 1, &[1e12]), &y).unwrap();
        assert!((weak.mean - &b.mean).amax() <= 1e-6);
    }

    #[test]
    fn singular_innovation_errors() {
        let b = GaussianBelief::new(DVector::zeros(1), DMatrix::zeros(1, 1)).unwrap();
        assert!(matches!(
            kalman_update(&b, &m(1, 1, &[1.0]), &m(1, 1, &[0.0]), &DVector::zeros(1)),
            Err(Error::SingularInnovation)
        ));
    }

    proptest! {
        #[test]
        fn update_never_increases_covariance(seed in any::<u64>()) {
            let mut r = rng::stream(seed, 0);
            let a = rng::standard_normal_matrix(&mut r, 3, 3);
            let p = &a * a.transpose() + DMatrix::identity(3, 3) * 0.1;
            let h = rng::standard_normal_matrix(&mut r, 2, 3);
            let rr = DMatrix::from_diagonal(&DVector::from_vec(vec![0.5, 1.5]));
            let b = GaussianBelief::new(DVector::zeros(3), p.clone()).unwrap();
            let post = kalman_update(&b, &h, &rr, &DVector::from_vec(vec![1.0, -1.0])).unwrap();
            prop_assert!(min_eigenvalue(&(p - post.cov)) >= -1e-8);
        }
    }

    #[test]
    fn resample_cases() {
        let uniform = [0.25; 4];
        for u in [0.0, 0.3, 0.99] {
            assert_eq!(systematic_resample(&uniform, u).unwrap(), vec![0, 1, 2, 3]);
        }
        assert_eq!(systematic_resample(&[1.0, 0.0, 0.0], 0.7).unwrap(), vec![0, 0, 0]);
        assert_eq!(systematic_resample(&[0.5, 0.5], 0.1).unwrap(), vec![0, 1]);
        assert!(systematic_resample(&[0.5, 0.6], 0.1).is_err());
        assert!(systematic_resample(&[0.5, 0.5], 1.0).is_err());
    }

    #[test]
    fn resample_preserves_count_with_trailing_zero() {
        let idx = systematic_resample(&[0.3, 0.7, 0.0], 0.999).unwrap();
        assert_eq!(idx.len(), 3);
        assert!(idx.iter().all(|&i| i < 2));
    }

    #[test]
    fn identical_particles_keep_uniform_weights() {
        let s = LinearGaussianSSM {
            q_cov: DMatrix::zeros(2, 2),
            ..ssm_2d()
        };
        let ens = WeightedEnsemble::uniform(DMatrix::from_fn(6, 2, |_, c| c as f64));
        assert!((ens.ess() - 6.0).abs() < 1e-12);
        let mut r = rng::stream(1, 0);
        let (out, info) = bpf_step(&ens, &DVector::from_vec(vec![0.7]), &s, 0.5, 1, &mut r).unwrap();
        assert!(!info.resampled);
        let w = out.weights();
        assert!(w.iter().all(|v| (v - 1.0 / 6.0).abs() < 1e-12));
        assert!((w.sum() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn underflow_is_reported() {
        let s = LinearGaussianSSM {
            r: m(1, 1, &[1e-300]),
            q_cov: DMatrix::zeros(2, 2),
            ..ssm_2d()
        };
        let ens = WeightedEnsemble {
            particles: DMatrix::zeros(3, 2),
            log_weights: DVector::from_element(3, f64::NEG_INFINITY),
        };
        let mut r = rng::stream(1, 0);
        let err = bpf_step(&ens, &DVector::from_vec(vec![1.0]), &s, 0.5, 7, &mut r).unwrap_err();
        assert!(matches!(err, Error::WeightUnderflow { time: 7 }));
    }

    #[test]
    fn bpf_weights_stay_normalized() {
        let s = ssm_2d();
        let mut r = rng::stream(9, 0);
        let (_, ys) = s.simulate(15, &mut r);
        let mut ens = WeightedEnsemble::uniform(rng::standard_normal_matrix(&mut r, 200, 2));
        for t in 0..15 {
            let (next, info) = bpf_step(&ens, &ys.row(t).transpose(), &s, 0.5, t, &mut r).unwrap();
            assert!(info.ess >= 1.0 - 1e-9 && info.ess <= 200.0 + 1e-9);
            assert!((next.weights().sum() - 1.0).abs() < 1e-10);
            let e = next.ess();
            assert!((1.0 - 1e-9..=200.0 + 1e-9).contains(&e));
            ens = next;
        }
    }

    #[test]
    fn model_step_drives_bpf() {
        use crate::ssm::Hyper;
        let model = ModelTheta::init(Hyper::gru(2, 2, 1, 0), 1.0, 0.1, 4).unwrap();
        let step = ModelStep {
            model: &model,
            graph: None,
            y_prev: DVector::from_vec(vec![0.1, 0.2]),
            z_t: DVector::zeros(0),
        };
        let ens = WeightedEnsemble::uniform(rng::standard_normal_matrix(&mut rng::stream(1, 0), 50, 4));
        let mut r = rng::stream(2, 0);
        let (out, info) = bpf_step(&ens, &DVector::from_vec(vec![0.0, 0.5]), &step, 0.5, 1, &mut r).unwrap();
        assert_eq!(out.particles.shape(), (50, 4));
        assert!(info.ess > 1.0);
    }
}
