use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Directed weighted graph over the series, with a cached row-normalized
/// adjacency. Rows without outgoing edges receive a self-loop before
/// normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    n_nodes: usize,
    edges: Vec<(usize, usize, f64)>,
    normalized_adj: DMatrix<f64>,
}

impl Graph {
    pub fn new(n_nodes: usize, edges: Vec<(usize, usize, f64)>) -> Result<Self> {
        if n_nodes == 0 {
            return Err(Error::invalid("n_nodes", "graph needs at least one node"));
        }
        let mut adj = DMatrix::zeros(n_nodes, n_nodes);
        for &(src, dst, w) in &edges {
            if src >= n_nodes || dst >= n_nodes {
                return Err(Error::Data(format!(
                    "edge ({src}, {dst}) out of range for {n_nodes} nodes"
                )));
            }
            if !(w >= 0.0) || !w.is_finite() {
                return Err(Error::Data(format!("edge ({src}, {dst}) has invalid weight {w}")));
            }
            adj[(src, dst)] += w;
        }
        for i in 0..n_nodes {
            let s: f64 = adj.row(i).sum();
            if s > 0.0 {
                adj.row_mut(i).scale_mut(1.0 / s);
            } else {
                adj.row_mut(i).fill(0.0);
                adj[(i, i)] = 1.0;
            }
        }
        Ok(Self {
            n_nodes,
            edges,
            normalized_adj: adj,
        })
    }

    pub fn identity(n_nodes: usize) -> Self {
        Self::new(n_nodes, Vec::new()).expect("identity graph is always valid")
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn edges(&self) -> &[(usize, usize, f64)] {
        &self.edges
    }

    pub fn normalized_adj(&self) -> &DMatrix<f64> {
        &self.normalized_adj
    }
}
