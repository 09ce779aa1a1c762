use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransitionKind {
    Gru,
    GraphGru,
}

/// Which adjacency the graph convolution propagates over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdjacencyMode {
    Fixed,
    Adaptive,
    Mixed,
}

impl AdjacencyMode {
    /// Weight on the provided normalized adjacency; the rest goes to the
    /// learned one.
    pub fn fixed_weight(self) -> f64 {
        match self {
            AdjacencyMode::Fixed => 1.0,
            AdjacencyMode::Adaptive => 0.0,
            AdjacencyMode::Mixed => 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Hyper {
    pub n_series: usize,
    pub d_x: usize,
    pub layers: usize,
    pub d_z: usize,
    pub d_e: usize,
    pub kind: TransitionKind,
    pub adjacency: AdjacencyMode,
}

impl Hyper {
    pub fn gru(n_series: usize, d_x: usize, layers: usize, d_z: usize) -> Self {
        Self {
            n_series,
            d_x,
            layers,
            d_z,
            d_e: 0,
            kind: TransitionKind::Gru,
            adjacency: AdjacencyMode::Fixed,
        }
    }

    pub fn graph_gru(
        n_series: usize,
        d_x: usize,
        layers: usize,
        d_z: usize,
        d_e: usize,
        adjacency: AdjacencyMode,
    ) -> Self {
        Self {
            n_series,
            d_x,
            layers,
            d_z,
            d_e,
            kind: TransitionKind::GraphGru,
            adjacency,
        }
    }

    /// Width of the per-layer block of the state vector, `N·d_x`.
    pub fn layer_width(&self) -> usize {
        self.n_series * self.d_x
    }

    /// Dimension of the full Markov state: every layer's hidden state.
    pub fn state_dim(&self) -> usize {
        self.layers * self.layer_width()
    }

    pub fn input_width(&self, layer: usize) -> usize {
        if layer == 0 {
            1 + self.d_z
        } else {
            self.d_x
        }
    }

    pub fn has_embedding(&self) -> bool {
        self.kind == TransitionKind::GraphGru && self.adjacency != AdjacencyMode::Fixed
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_series == 0 || self.d_x == 0 || self.layers == 0 {
            return Err(Error::invalid("hyper", "n_series, d_x and layers must be positive"));
        }
        if self.has_embedding() && self.d_e == 0 {
            return Err(Error::invalid("d_e", "adaptive adjacency needs d_e > 0"));
        }
        Ok(())
    }
}

/// One gate's affine map. The `_nb` weights act on graph-propagated
/// features and exist only for the graph-convolutional cell.
#[derive(Debug, Clone, PartialEq)]
pub struct GateParams {
    pub w_in: DMatrix<f64>,
    pub w_hid: DMatrix<f64>,
    pub bias: DMatrix<f64>,
    pub w_in_nb: Option<DMatrix<f64>>,
    pub w_hid_nb: Option<DMatrix<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellParams {
    pub reset: GateParams,
    pub update: GateParams,
    pub candidate: GateParams,
}

impl CellParams {
    pub fn gates(&self) -> [(&'static str, &GateParams); 3] {
        [
            ("reset", &self.reset),
            ("update", &self.update),
            ("candidate", &self.candidate),
        ]
    }

    fn gates_mut(&mut self) -> [(&'static str, &mut GateParams); 3] {
        [
            ("reset", &mut self.reset),
            ("update", &mut self.update),
            ("candidate", &mut self.candidate),
        ]
    }
}

/// All parameters of the state-space model: initial-state scale `rho`,
/// process-noise scale `sigma`, transition weights, emission matrix and
/// the heteroscedastic noise matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelTheta {
    pub hyper: Hyper,
    pub rho: f64,
    pub sigma: f64,
    pub cells: Vec<CellParams>,
    pub embedding: Option<DMatrix<f64>>,
    pub w_phi: DMatrix<f64>,
    pub c_gamma: DMatrix<f64>,
}

/// Read-only view of one named tensor.
#[derive(Debug, Clone)]
pub struct TensorRef<'a> {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: &'a [f64],
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, bound: f64) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(rows, cols);
    for r in 0..rows {
        for c in 0..cols {
            m[(r, c)] = rng.random_range(-bound..=bound);
        }
    }
    m
}

impl ModelTheta {
    /// All-zero model with the right shapes.
    pub fn zeros(hyper: Hyper, rho: f64, sigma: f64) -> Result<Self> {
        hyper.validate()?;
        let dx = hyper.d_x;
        let graph = hyper.kind == TransitionKind::GraphGru;
        let gate = |input: usize| GateParams {
            w_in: DMatrix::zeros(input, dx),
            w_hid: DMatrix::zeros(dx, dx),
            bias: DMatrix::zeros(1, dx),
            w_in_nb: graph.then(|| DMatrix::zeros(input, dx)),
            w_hid_nb: graph.then(|| DMatrix::zeros(dx, dx)),
        };
        let cells = (0..hyper.layers)
            .map(|l| {
                let input = hyper.input_width(l);
                CellParams {
                    reset: gate(input),
                    update: gate(input),
                    candidate: gate(input),
                }
            })
            .collect();
        let d = hyper.state_dim();
        Ok(Self {
            hyper,
            rho,
            sigma,
            cells,
            embedding: hyper
                .has_embedding()
                .then(|| DMatrix::zeros(hyper.n_series, hyper.d_e)),
            w_phi: DMatrix::zeros(hyper.n_series, d),
            c_gamma: DMatrix::zeros(hyper.n_series, d),
        })
    }

    /// Random initialization: GRU weights uniform in ±1/√d_x, zero biases,
    /// emission uniform in ±1/√(L·d_x), small noise-shape weights and a
    /// standard-normal node embedding.
    pub fn init(hyper: Hyper, rho: f64, sigma: f64, seed: u64) -> Result<Self> {
        let mut model = Self::zeros(hyper, rho, sigma)?;
        let mut rng = rng::stream(seed, 0x7e7a);
        let bound = 1.0 / (hyper.d_x as f64).sqrt();
        for cell in &mut model.cells {
            for (_, gate) in cell.gates_mut() {
                let (ri, ci) = gate.w_in.shape();
                gate.w_in = uniform(&mut rng, ri, ci, bound);
                gate.w_hid = uniform(&mut rng, hyper.d_x, hyper.d_x, bound);
                if let Some(w) = gate.w_in_nb.as_mut() {
                    *w = uniform(&mut rng, ri, ci, bound);
                }
                if let Some(w) = gate.w_hid_nb.as_mut() {
                    *w = uniform(&mut rng, hyper.d_x, hyper.d_x, bound);
                }
            }
        }
        if let Some(e) = model.embedding.as_mut() {
            let (r, c) = e.shape();
            *e = DMatrix::from_fn(r, c, |_, _| rng.sample::<f64, _>(StandardNormal));
        }
        let n = hyper.n_series;
        let d = hyper.state_dim();
        let emit = 1.0 / ((hyper.layers * hyper.d_x) as f64).sqrt();
        model.w_phi = uniform(&mut rng, n, d, emit);
        model.c_gamma = uniform(&mut rng, n, d, 0.1 * emit);
        Ok(model)
    }

    pub fn n_series(&self) -> usize {
        self.hyper.n_series
    }

    pub fn state_dim(&self) -> usize {
        self.hyper.state_dim()
    }

    pub fn validate(&self) -> Result<()> {
        self.hyper.validate()?;
        if !(self.rho >= 0.0) || !self.rho.is_finite() {
            return Err(Error::invalid("rho", "must be finite and >= 0"));
        }
        if !(self.sigma >= 0.0) || !self.sigma.is_finite() {
            return Err(Error::invalid("sigma", "must be finite and >= 0"));
        }
        let (n, d) = (self.hyper.n_series, self.hyper.state_dim());
        for (name, m) in [("w_phi", &self.w_phi), ("c_gamma", &self.c_gamma)] {
            if m.shape() != (n, d) {
                return Err(Error::shape(
                    "model emission",
                    format!("{name} {n}x{d}"),
                    format!("{}x{}", m.nrows(), m.ncols()),
                ));
            }
        }
        Ok(())
    }

    /// Named tensors in canonical order. Scalars appear as 1×1 tensors and
    /// matrix data is column-major.
    pub fn tensors(&self) -> Vec<TensorRef<'_>> {
        let mut out = vec![
            TensorRef { name: "rho".into(), rows: 1, cols: 1, data: std::slice::from_ref(&self.rho) },
            TensorRef { name: "sigma".into(), rows: 1, cols: 1, data: std::slice::from_ref(&self.sigma) },
        ];
        fn mat(name: String, m: &DMatrix<f64>) -> TensorRef<'_> {
            TensorRef {
                name,
                rows: m.nrows(),
                cols: m.ncols(),
                data: m.as_slice(),
            }
        }
        for (l, cell) in self.cells.iter().enumerate() {
            for (g, gate) in cell.gates() {
                out.push(mat(format!("cell{l}.{g}.w_in"), &gate.w_in));
                out.push(mat(format!("cell{l}.{g}.w_hid"), &gate.w_hid));
                out.push(mat(format!("cell{l}.{g}.bias"), &gate.bias));
                if let Some(w) = &gate.w_in_nb {
                    out.push(mat(format!("cell{l}.{g}.w_in_nb"), w));
                }
                if let Some(w) = &gate.w_hid_nb {
                    out.push(mat(format!("cell{l}.{g}.w_hid_nb"), w));
                }
            }
        }
        if let Some(e) = &self.embedding {
            out.push(mat("embedding".into(), e));
        }
        out.push(mat("w_phi".into(), &self.w_phi));
        out.push(mat("c_gamma".into(), &self.c_gamma));
        out
    }

    /// Mutable views aligned with [`ModelTheta::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let ModelTheta {
            rho,
            sigma,
            cells,
            embedding,
            w_phi,
            c_gamma,
            ..
        } = self;
        let mut out: Vec<(String, &mut [f64])> = vec![
            ("rho".into(), std::slice::from_mut(rho)),
            ("sigma".into(), std::slice::from_mut(sigma)),
        ];
        for (l, cell) in cells.iter_mut().enumerate() {
            for (g, gate) in cell.gates_mut() {
                let GateParams {
                    w_in,
                    w_hid,
                    bias,
                    w_in_nb,
                    w_hid_nb,
                } = gate;
                out.push((format!("cell{l}.{g}.w_in"), w_in.as_mut_slice()));
                out.push((format!("cell{l}.{g}.w_hid"), w_hid.as_mut_slice()));
                out.push((format!("cell{l}.{g}.bias"), bias.as_mut_slice()));
                if let Some(w) = w_in_nb {
                    out.push((format!("cell{l}.{g}.w_in_nb"), w.as_mut_slice()));
                }
                if let Some(w) = w_hid_nb {
                    out.push((format!("cell{l}.{g}.w_hid_nb"), w.as_mut_slice()));
                }
            }
        }
        if let Some(e) = embedding {
            out.push(("embedding".into(), e.as_mut_slice()));
        }
        out.push(("w_phi".into(), w_phi.as_mut_slice()));
        out.push(("c_gamma".into(), c_gamma.as_mut_slice()));
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    /// Flattened copy of every parameter in canonical order.
    pub fn to_flat(&self) -> Vec<f64> {
        self.tensors().iter().flat_map(|t| t.data.iter().copied()).collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        let total = self.parameter_count();
        if flat.len() != total {
            return Err(Error::shape("set_flat", total, flat.len()));
        }
        let mut offset = 0;
        for (_, data) in self.tensors_mut() {
            let len = data.len();
            data.copy_from_slice(&flat[offset..offset + len]);
            offset += len;
        }
        Ok(())
    }
}
