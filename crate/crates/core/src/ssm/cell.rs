//! Transition and emission maps expressed on the autodiff tape. The plain
//! (non-differentiated) entry points in [`crate::ssm`] run these same
//! functions on a throwaway tape, so inference and training share one
//! implementation.

use nalgebra::{DMatrix, DVector};

use super::graph::Graph;
use super::model::{GateParams, ModelTheta, TransitionKind};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct GateVars {
    pub w_in: Var,
    pub w_hid: Var,
    pub bias: Var,
    pub w_in_nb: Option<Var>,
    pub w_hid_nb: Option<Var>,
}

#[derive(Debug, Clone)]
pub struct CellVars {
    pub reset: GateVars,
    pub update: GateVars,
    pub candidate: GateVars,
}

/// Tape handles for every parameter, in the canonical tensor order.
#[derive(Debug, Clone)]
pub struct ParamVars {
    pub rho: Var,
    pub sigma: Var,
    pub cells: Vec<CellVars>,
    pub embedding: Option<Var>,
    pub w_phi: Var,
    pub c_gamma: Var,
    /// Effective propagation matrix for graph cells, built once per tape.
    pub adjacency: Option<Var>,
}

impl ParamVars {
    /// Registers the model on `tape`. With `differentiable = false` every
    /// parameter is a constant and nothing is tracked for the reverse pass.
    pub fn register(
        tape: &mut Tape,
        model: &ModelTheta,
        graph: Option<&Graph>,
        differentiable: bool,
    ) -> Result<Self> {
        let mut leaf = |m: DMatrix<f64>| {
            if differentiable {
                tape.param(m)
            } else {
                tape.constant(m)
            }
        };
        let scalar = |v: f64| DMatrix::from_element(1, 1, v);
        let rho = leaf(scalar(model.rho));
        let sigma = leaf(scalar(model.sigma));
        let mut gate = |g: &GateParams| GateVars {
            w_in: leaf(g.w_in.clone()),
            w_hid: leaf(g.w_hid.clone()),
            bias: leaf(g.bias.clone()),
            w_in_nb: g.w_in_nb.clone().map(&mut leaf),
            w_hid_nb: g.w_hid_nb.clone().map(&mut leaf),
        };
        let mut cells = Vec::with_capacity(model.cells.len());
        for c in &model.cells {
            let reset = gate(&c.reset);
            let update = gate(&c.update);
            let candidate = gate(&c.candidate);
            cells.push(CellVars {
                reset,
                update,
                candidate,
            });
        }
        let embedding = model.embedding.clone().map(&mut leaf);
        let w_phi = leaf(model.w_phi.clone());
        let c_gamma = leaf(model.c_gamma.clone());

        let adjacency = if model.hyper.kind == TransitionKind::GraphGru {
            Some(build_adjacency(tape, model, graph, embedding)?)
        } else {
            None
        };
        Ok(Self {
            rho,
            sigma,
            cells,
            embedding,
            w_phi,
            c_gamma,
            adjacency,
        })
    }

    /// Handles in the same order as [`ModelTheta::tensors`].
    pub fn ordered(&self) -> Vec<Var> {
        let mut out = vec![self.rho, self.sigma];
        for c in &self.cells {
            for g in [&c.reset, &c.update, &c.candidate] {
                out.extend([g.w_in, g.w_hid, g.bias]);
                out.extend(g.w_in_nb);
                out.extend(g.w_hid_nb);
            }
        }
        out.extend(self.embedding);
        out.push(self.w_phi);
        out.push(self.c_gamma);
        out
    }
}

/// `Â = w·normalized_adj + (1 − w)·row_softmax(relu(E Eᵀ))`.
fn build_adjacency(
    tape: &mut Tape,
    model: &ModelTheta,
    graph: Option<&Graph>,
    embedding: Option<Var>,
) -> Result<Var> {
    let n = model.hyper.n_series;
    let w = model.hyper.adjacency.fixed_weight();
    let fixed = if w > 0.0 {
        let g = graph.ok_or_else(|| {
            Error::invalid("graph", "graph-based transition requires a graph")
        })?;
        if g.n_nodes() != n {
            return Err(Error::shape("graph nodes", n, g.n_nodes()));
        }
        Some(tape.constant(g.normalized_adj() * w))
    } else {
        None
    };
    let adaptive = match embedding {
        Some(e) if w < 1.0 => {
            let et = tape.transpose(e);
            let gram = tape.matmul(e, et);
            let pos = tape.relu(gram);
            let soft = tape.row_softmax(pos);
            Some(tape.scale(soft, 1.0 - w))
        }
        _ => None,
    };
    Ok(match (fixed, adaptive) {
        (Some(f), Some(a)) => tape.add(f, a),
        (Some(f), None) => f,
        (None, Some(a)) => a,
        (None, None) => unreachable!("adjacency weight covers at least one source"),
    })
}

fn gate_preact(tape: &mut Tape, g: &GateVars, adj: Option<Var>, input: Var, hidden: Var) -> Var {
    let a = tape.matmul(input, g.w_in);
    let b = tape.matmul(hidden, g.w_hid);
    let mut s = tape.add(a, b);
    if let (Some(adj), Some(w_in_nb), Some(w_hid_nb)) = (adj, g.w_in_nb, g.w_hid_nb) {
        let pu = tape.graph_prop(adj, input);
        let ph = tape.graph_prop(adj, hidden);
        let a = tape.matmul(pu, w_in_nb);
        let b = tape.matmul(ph, w_hid_nb);
        s = tape.add(s, a);
        s = tape.add(s, b);
    }
    tape.add_row(s, g.bias)
}

/// One GRU cell over node-feature matrices (rows = particle·node).
fn cell_step(tape: &mut Tape, c: &CellVars, adj: Option<Var>, input: Var, hidden: Var) -> Var {
    let r_pre = gate_preact(tape, &c.reset, adj, input, hidden);
    let r = tape.sigmoid(r_pre);
    let z_pre = gate_preact(tape, &c.update, adj, input, hidden);
    let z = tape.sigmoid(z_pre);
    let rh = tape.mul(r, hidden);
    let c_pre = gate_preact(tape, &c.candidate, adj, input, rh);
    let cand = tape.tanh(c_pre);
    let keep = tape.one_minus(z);
    let old = tape.mul(keep, hidden);
    let new = tape.mul(z, cand);
    tape.add(old, new)
}

/// Layer-0 input: each node's own previous observation followed by the
/// shared covariates.
fn node_inputs(tape: &mut Tape, y_prev: Var, z_t: &DVector<f64>) -> Var {
    let col = tape.rows_to_column(y_prev);
    if z_t.is_empty() {
        return col;
    }
    let rows = tape.value(col).nrows();
    let cov = DMatrix::from_fn(rows, z_t.len(), |_, k| z_t[k]);
    let cov = tape.constant(cov);
    tape.hconcat(col, cov)
}

/// `x_t = GRU_L(x_{t-1}, [y_{t-1}; z_t]) + σ ξ` for a B×D particle matrix.
pub fn transition_tape(
    tape: &mut Tape,
    model: &ModelTheta,
    vars: &ParamVars,
    state: Var,
    y_prev: Var,
    z_t: &DVector<f64>,
    noise: Option<&DMatrix<f64>>,
) -> Var {
    let h = &model.hyper;
    let (n, dx) = (h.n_series, h.d_x);
    let mut input = node_inputs(tape, y_prev, z_t);
    let mut layers = Vec::with_capacity(h.layers);
    for (l, cell) in vars.cells.iter().enumerate() {
        let hidden = tape.state_to_nodes(state, l * n * dx, n, dx);
        let out = cell_step(tape, cell, vars.adjacency, input, hidden);
        layers.push(out);
        input = out;
    }
    let next = tape.nodes_to_state(&layers, n, dx);
    match noise {
        Some(xi) => {
            let xi = tape.constant(xi.clone());
            let scaled = tape.scale_by(xi, vars.sigma);
            tape.add(next, scaled)
        }
        None => next,
    }
}

/// Measurement mean `W_φ x` and std `softplus(C_γ x)` for every particle row.
pub fn emission_tape(tape: &mut Tape, vars: &ParamVars, state: Var) -> (Var, Var) {
    let wt = tape.transpose(vars.w_phi);
    let mean = tape.matmul(state, wt);
    let ct = tape.transpose(vars.c_gamma);
    let pre = tape.matmul(state, ct);
    let sp = tape.softplus(pre);
    let std = tape.clamp_min(sp, super::MIN_EMISSION_STD);
    (mean, std)
}

/// Initial ensemble `ρ ξ₀`.
pub fn initial_state_tape(tape: &mut Tape, vars: &ParamVars, xi0: &DMatrix<f64>) -> Var {
    let xi = tape.constant(xi0.clone());
    tape.scale_by(xi, vars.rho)
}
