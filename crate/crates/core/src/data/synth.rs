//! Synthetic linear-Gaussian datasets with a known generating model.

use chrono::{Duration, NaiveDate};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::SeriesSet;
use crate::error::{Error, Result};
use crate::filters::LinearGaussianSSM;
use crate::linalg::{spectral_radius, symmetrize};
use crate::rng;
use crate::ssm::Graph;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthKind {
    /// Dense random `F` and `H` with `state_dim` latent coordinates.
    LinearGaussian,
    /// One latent coordinate per node, observed directly; `F` is supported
    /// on a random graph (ring plus random chords, with self-loops).
    VarGraph,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub kind: SynthKind,
    pub n_series: usize,
    /// Latent dimension for `linear_gaussian`; ignored by `var_graph`.
    pub state_dim: usize,
    pub steps: usize,
    pub seed: u64,
    pub max_spectral_radius: f64,
    pub process_std: f64,
    pub obs_std: f64,
    /// Probability of each extra directed chord in `var_graph`.
    pub edge_prob: f64,
    pub step_minutes: i64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            kind: SynthKind::VarGraph,
            n_series: 5,
            state_dim: 4,
            steps: 2000,
            seed: 0,
            max_spectral_radius: 0.95,
            process_std: 0.5,
            obs_std: 0.2,
            edge_prob: 0.3,
            step_minutes: 5,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub series: SeriesSet,
    pub graph: Option<Graph>,
    /// The exact generating model; `init_*` is the stationary law of `x_0`.
    pub ssm: LinearGaussianSSM,
    pub states: DMatrix<f64>,
}

/// Scales `f` down so its spectral radius does not exceed `max_radius`.
fn stabilize(f: DMatrix<f64>, max_radius: f64) -> DMatrix<f64> {
    let r = spectral_radius(&f);
    if r > max_radius {
        f * (max_radius / r)
    } else {
        f
    }
}

/// Fixed point of `P = F P Fᵀ + Q` by iteration (converges for stable `F`).
fn stationary_cov(f: &DMatrix<f64>, q: &DMatrix<f64>) -> DMatrix<f64> {
    let mut p = q.clone();
    for _ in 0..10_000 {
        let next = symmetrize(&(f * &p * f.transpose() + q));
        let delta = (&next - &p).amax();
        p = next;
        if delta < 1e-14 {
            break;
        }
    }
    p
}

pub fn synth_generate(config: &SynthConfig) -> Result<SynthOutput> {
    if config.n_series == 0 || config.steps == 0 {
        return Err(Error::invalid("synth", "n_series and steps must be positive"));
    }
    if !(config.max_spectral_radius > 0.0 && config.max_spectral_radius < 1.0) {
        return Err(Error::invalid("max_spectral_radius", "must lie in (0, 1)"));
    }
    if !(config.process_std > 0.0 && config.obs_std > 0.0) {
        return Err(Error::invalid("noise std", "must be positive"));
    }
    let n = config.n_series;
    let mut r = rng::stream(config.seed, 0x5e7);
    let (f, h, graph) = match config.kind {
        SynthKind::LinearGaussian => {
            let d = config.state_dim;
            if d == 0 {
                return Err(Error::invalid("state_dim", "must be positive"));
            }
            let s = 1.0 / (d as f64).sqrt();
            let f = rng::standard_normal_matrix(&mut r, d, d) * s;
            let h = rng::standard_normal_matrix(&mut r, n, d) * s;
            (f, h, None)
        }
        SynthKind::VarGraph => {
            let mut edges: Vec<(usize, usize, f64)> = Vec::new();
            for i in 0..n {
                edges.push((i, i, 1.0));
                if n > 1 {
                    edges.push((i, (i + 1) % n, 1.0));
                }
                for j in 0..n {
                    if j != i && j != (i + 1) % n && r.random::<f64>() < config.edge_prob {
                        edges.push((i, j, 1.0));
                    }
                }
            }
            let mut f = DMatrix::zeros(n, n);
            for &(i, j, _) in &edges {
                f[(i, j)] = if i == j {
                    r.random_range(0.8..0.95)
                } else {
                    r.random_range(-0.3..0.3)
                };
            }
            let graph = Graph::new(n, edges)?;
            (f, DMatrix::identity(n, n), Some(graph))
        }
    };
    let f = stabilize(f, config.max_spectral_radius);
    let d = f.nrows();
    let q_cov = DMatrix::identity(d, d) * config.process_std.powi(2);
    let ssm = LinearGaussianSSM {
        init_mean: DVector::zeros(d),
        init_cov: stationary_cov(&f, &q_cov),
        f,
        q_cov,
        h,
        r: DMatrix::identity(n, n) * config.obs_std.powi(2),
    };
    let (states, values) = ssm.simulate(config.steps, &mut r);
    let start = NaiveDate::from_ymd_opt(2024, 1, 1)
        .and_then(|d| d.and_hms_opt(0, 0, 0))
        .expect("valid start date");
    let timestamps = (0..config.steps)
        .map(|t| start + Duration::minutes(config.step_minutes * t as i64))
        .collect();
    let names = (0..n).map(|i| format!("node{i}")).collect();
    Ok(SynthOutput {
        series: SeriesSet::new(names, Some(timestamps), values)?,
        graph,
        ssm,
        states,
    })
}
