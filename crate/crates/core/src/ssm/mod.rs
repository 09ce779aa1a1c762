//! Nonlinear state-space model: isotropic Gaussian initial law, recurrent
//! (optionally graph-convolutional) transition with additive Gaussian noise,
//! and a linear emission with state-dependent softplus noise.

pub mod cell;
pub mod checkpoint;
mod graph;
mod model;

use nalgebra::{DMatrix, DVector};

pub use graph::Graph;
pub use model::{AdjacencyMode, CellParams, GateParams, Hyper, ModelTheta, TensorRef, TransitionKind};

use crate::autodiff::{softplus, Tape};
use crate::error::{Error, Result};
use crate::linalg::all_finite;
use crate::rng;
use cell::ParamVars;

/// Equally weighted particle approximation of the state distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct StateEnsemble {
    /// One particle per row, `N_p × D`.
    pub particles: DMatrix<f64>,
    pub time_index: usize,
}

impl StateEnsemble {
    pub fn new(particles: DMatrix<f64>, time_index: usize) -> Result<Self> {
        if particles.nrows() == 0 {
            return Err(Error::invalid("particles", "ensemble needs at least one particle"));
        }
        if !all_finite(&particles) {
            return Err(Error::NonFinite {
                context: "state ensemble".into(),
            });
        }
        Ok(Self {
            particles,
            time_index,
        })
    }

    pub fn n_particles(&self) -> usize {
        self.particles.nrows()
    }

    pub fn dim(&self) -> usize {
        self.particles.ncols()
    }

    pub fn mean(&self) -> DVector<f64> {
        self.particles.row_mean().transpose()
    }
}

/// Standard-normal draws backing one reparameterized transition and
/// measurement step.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseDraws {
    pub dyn_noise: DMatrix<f64>,
    pub meas_noise: DMatrix<f64>,
    pub seed: u64,
    pub stream: u64,
}

impl NoiseDraws {
    pub fn sample(n_particles: usize, state_dim: usize, n_series: usize, seed: u64, stream: u64) -> Self {
        let mut r = rng::stream(seed, stream);
        let dyn_noise = rng::standard_normal_matrix(&mut r, n_particles, state_dim);
        let meas_noise = rng::standard_normal_matrix(&mut r, n_particles, n_series);
        Self {
            dyn_noise,
            meas_noise,
            seed,
            stream,
        }
    }

    pub fn zeros(n_particles: usize, state_dim: usize, n_series: usize) -> Self {
        Self {
            dyn_noise: DMatrix::zeros(n_particles, state_dim),
            meas_noise: DMatrix::zeros(n_particles, n_series),
            seed: 0,
            stream: 0,
        }
    }
}

/// Particles i.i.d. `N(0, ρ² I_D)`.
pub fn init_ensemble(n_particles: usize, model: &ModelTheta, seed: u64) -> Result<StateEnsemble> {
    if n_particles == 0 {
        return Err(Error::invalid("n_particles", "must be at least 1"));
    }
    if !model.rho.is_finite() {
        return Err(Error::invalid("rho", "must be finite"));
    }
    let mut r = rng::stream(seed, 0x1417);
    let xi = rng::standard_normal_matrix(&mut r, n_particles, model.state_dim());
    StateEnsemble::new(xi * model.rho, 0)
}

fn check_transition_inputs(
    model: &ModelTheta,
    ensemble: &StateEnsemble,
    y_prev: &DMatrix<f64>,
    z_t: &DVector<f64>,
    noise: Option<&NoiseDraws>,
) -> Result<()> {
    let h = &model.hyper;
    let np = ensemble.n_particles();
    if ensemble.dim() != h.state_dim() {
        return Err(Error::shape("transition state", h.state_dim(), ensemble.dim()));
    }
    if y_prev.shape() != (np, h.n_series) {
        return Err(Error::shape(
            "transition y_prev",
            format!("{np}x{}", h.n_series),
            format!("{}x{}", y_prev.nrows(), y_prev.ncols()),
        ));
    }
    if z_t.len() != h.d_z {
        return Err(Error::shape("transition covariates", h.d_z, z_t.len()));
    }
    if let Some(nd) = noise {
        if nd.dyn_noise.shape() != (np, h.state_dim()) {
            return Err(Error::shape(
                "transition noise",
                format!("{np}x{}", h.state_dim()),
                format!("{}x{}", nd.dyn_noise.nrows(), nd.dyn_noise.ncols()),
            ));
        }
    }
    if !all_finite(y_prev) || z_t.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: "transition inputs".into(),
        });
    }
    Ok(())
}

/// Transition with a per-particle previous observation (`N_p × N`). The
/// cell type follows `model.hyper.kind`; graph cells need `graph` unless the
/// adjacency is purely adaptive.
pub fn transition(
    model: &ModelTheta,
    graph: Option<&Graph>,
    ensemble: &StateEnsemble,
    y_prev: &DMatrix<f64>,
    z_t: &DVector<f64>,
    noise: Option<&NoiseDraws>,
) -> Result<StateEnsemble> {
    check_transition_inputs(model, ensemble, y_prev, z_t, noise)?;
    let mut tape = Tape::new();
    let vars = ParamVars::register(&mut tape, model, graph, false)?;
    let state = tape.constant(ensemble.particles.clone());
    let y = tape.constant(y_prev.clone());
    let dyn_noise = noise.filter(|_| model.sigma != 0.0).map(|n| &n.dyn_noise);
    let out = cell::transition_tape(&mut tape, model, &vars, state, y, z_t, dyn_noise);
    StateEnsemble::new(tape.value(out).clone(), ensemble.time_index + 1)
}

fn broadcast_obs(y_prev: &DVector<f64>, n_particles: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n_particles, y_prev.len(), |_, i| y_prev[i])
}

/// Plain GRU transition with a shared previous observation.
pub fn gru_transition(
    model: &ModelTheta,
    ensemble: &StateEnsemble,
    y_prev: &DVector<f64>,
    z_t: &DVector<f64>,
    noise: Option<&NoiseDraws>,
) -> Result<StateEnsemble> {
    if model.hyper.kind != TransitionKind::Gru {
        return Err(Error::invalid("transition kind", "gru_transition needs a GRU model"));
    }
    let y = broadcast_obs(y_prev, ensemble.n_particles());
    transition(model, None, ensemble, &y, z_t, noise)
}

/// Graph-convolutional GRU transition with a shared previous observation.
pub fn graph_gru_transition(
    model: &ModelTheta,
    graph: &Graph,
    ensemble: &StateEnsemble,
    y_prev: &DVector<f64>,
    z_t: &DVector<f64>,
    noise: Option<&NoiseDraws>,
) -> Result<StateEnsemble> {
    if model.hyper.kind != TransitionKind::GraphGru {
        return Err(Error::invalid(
            "transition kind",
            "graph_gru_transition needs a graph GRU model",
        ));
    }
    let y = broadcast_obs(y_prev, ensemble.n_particles());
    transition(model, Some(graph), ensemble, &y, z_t, noise)
}

/// Effective propagation matrix used by graph cells.
pub fn effective_adjacency(model: &ModelTheta, graph: Option<&Graph>) -> Result<DMatrix<f64>> {
    let mut tape = Tape::new();
    let vars = ParamVars::register(&mut tape, model, graph, false)?;
    vars.adjacency
        .map(|a| tape.value(a).clone())
        .ok_or_else(|| Error::invalid("transition kind", "model has no graph cell"))
}

/// Lower bound on the emission std. Minimizing MAE drives the noise scale
/// toward zero, which makes `R⁻¹` and the early flow steps explode.
pub const MIN_EMISSION_STD: f64 = 1e-2;

/// `max(softplus(u), MIN_EMISSION_STD)`.
pub fn emission_std(u: f64) -> f64 {
    softplus(u).max(MIN_EMISSION_STD)
}

/// `(W_φ x, softplus(C_γ x))` for a single state. Covariates do not enter
/// the emission.
pub fn measurement_moments(
    model: &ModelTheta,
    state: &DVector<f64>,
    _z_t: &DVector<f64>,
) -> Result<(DVector<f64>, DVector<f64>)> {
    if state.len() != model.state_dim() {
        return Err(Error::shape("measurement state", model.state_dim(), state.len()));
    }
    if state.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: "measurement state".into(),
        });
    }
    let mean = &model.w_phi * state;
    let std = (&model.c_gamma * state).map(emission_std);
    Ok((mean, std))
}

/// Row-wise emission moments for a particle matrix.
pub fn measurement_moments_batch(model: &ModelTheta, particles: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let mean = particles * model.w_phi.transpose();
    let std = (particles * model.c_gamma.transpose()).map(emission_std);
    (mean, std)
}

/// `y^j = mean(x^j) + std(x^j) ⊙ ξ^j`.
pub fn sample_measurement(
    model: &ModelTheta,
    ensemble: &StateEnsemble,
    _z_t: &DVector<f64>,
    noise: &NoiseDraws,
) -> Result<DMatrix<f64>> {
    let np = ensemble.n_particles();
    let n = model.n_series();
    if ensemble.dim() != model.state_dim() {
        return Err(Error::shape("measurement state", model.state_dim(), ensemble.dim()));
    }
    if noise.meas_noise.shape() != (np, n) {
        return Err(Error::shape(
            "measurement noise",
            format!("{np}x{n}"),
            format!("{}x{}", noise.meas_noise.nrows(), noise.meas_noise.ncols()),
        ));
    }
    let (mean, std) = measurement_moments_batch(model, &ensemble.particles);
    Ok(mean + std.component_mul(&noise.meas_noise))
}
