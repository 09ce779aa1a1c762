//! Minimal reverse-mode automatic differentiation over dense matrices.
//!
//! Every value is a `DMatrix<f64>`. Operations append nodes to a [`Tape`];
//! [`Tape::backward`] walks the tape in reverse and accumulates adjoints.
//! Nodes created with [`Tape::constant`] never receive gradients, and any
//! node whose parents are all constant is skipped during the reverse pass.

use nalgebra::DMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MatMul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    ScaleBy(Var, Var),
    AddRow(Var, Var),
    Sigmoid(Var),
    Tanh(Var),
    Softplus(Var),
    ClampMin(Var, f64),
    Relu(Var),
    Log(Var),
    Recip(Var),
    Square(Var),
    Abs(Var),
    Transpose(Var),
    HConcat(Var, Var),
    RowSoftmax(Var),
    GraphProp { adj: Var, x: Var },
    StateToNodes { state: Var, offset: usize, nodes: usize, units: usize },
    NodesToState { parts: Vec<Var>, nodes: usize, units: usize },
    RowsToColumn(Var),
    MeanRows(Var),
    MedianRows { x: Var, picks: Vec<Vec<usize>> },
    SumCols(Var),
    LogMeanExpRows(Var),
    SumAll(Var),
}

#[derive(Debug, Clone)]
struct Node {
    value: DMatrix<f64>,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Grads {
    grads: Vec<Option<DMatrix<f64>>>,
    shapes: Vec<(usize, usize)>,
}

impl Grads {
    /// Gradient of the output with respect to `v`; zeros if `v` did not
    /// influence the output.
    pub fn wrt(&self, v: Var) -> DMatrix<f64> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                DMatrix::zeros(r, c)
            }
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable `ln(1 + eˣ)`.
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp()
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

pub fn logistic(x: f64) -> f64 {
    sigmoid(x)
}

fn median_picks(col: &[f64]) -> (f64, Vec<usize>) {
    let mut order: Vec<usize> = (0..col.len()).collect();
    order.sort_by(|&a, &b| col[a].total_cmp(&col[b]).then(a.cmp(&b)));
    let n = col.len();
    if n % 2 == 1 {
        let i = order[n / 2];
        (col[i], vec![i])
    } else {
        let a = order[n / 2 - 1];
        let b = order[n / 2];
        (0.5 * (col[a] + col[b]), vec![a, b])
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: DMatrix<f64>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn derived(&mut self, value: DMatrix<f64>, op: Op, parents: &[Var]) -> Var {
        let needs = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.push(value, op, needs)
    }

    /// A differentiable leaf (a parameter).
    pub fn param(&mut self, value: DMatrix<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: DMatrix<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &DMatrix<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[(0, 0)]
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.derived(v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        self.derived(v, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).component_mul(self.value(b));
        self.derived(v, Op::Mul(a, b), &[a, b])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        self.derived(v, Op::MatMul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) * c;
        self.derived(v, Op::Scale(a, c), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).add_scalar(c);
        self.derived(v, Op::AddScalar(a), &[a])
    }

    /// `1 - a`, elementwise.
    pub fn one_minus(&mut self, a: Var) -> Var {
        let n = self.scale(a, -1.0);
        self.add_scalar(n, 1.0)
    }

    /// Multiplies `a` by the 1×1 node `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Var {
        let v = self.value(a) * self.scalar(s);
        self.derived(v, Op::ScaleBy(a, s), &[a, s])
    }

    /// Adds the 1×k row `row` to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row);
        let mut v = self.value(a).clone();
        assert_eq!(r.nrows(), 1, "add_row expects a single row");
        assert_eq!(r.ncols(), v.ncols(), "add_row column mismatch");
        for mut vr in v.row_iter_mut() {
            vr += r;
        }
        self.derived(v, Op::AddRow(a, row), &[a, row])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.derived(v, Op::Sigmoid(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        self.derived(v, Op::Tanh(a), &[a])
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.value(a).map(softplus);
        self.derived(v, Op::Softplus(a), &[a])
    }

    /// Elementwise `max(a, floor)`; no gradient where the floor binds.
    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Var {
        let v = self.value(a).map(|x| x.max(floor));
        self.derived(v, Op::ClampMin(a, floor), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        self.derived(v, Op::Relu(a), &[a])
    }

    pub fn log(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::ln);
        self.derived(v, Op::Log(a), &[a])
    }

    pub fn recip(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| 1.0 / x);
        self.derived(v, Op::Recip(a), &[a])
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        self.derived(v, Op::Square(a), &[a])
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::abs);
        self.derived(v, Op::Abs(a), &[a])
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        self.derived(v, Op::Transpose(a), &[a])
    }

    pub fn hconcat(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.nrows(), vb.nrows(), "hconcat row mismatch");
        let mut v = DMatrix::zeros(va.nrows(), va.ncols() + vb.ncols());
        v.columns_mut(0, va.ncols()).copy_from(va);
        v.columns_mut(va.ncols(), vb.ncols()).copy_from(vb);
        self.derived(v, Op::HConcat(a, b), &[a, b])
    }

    pub fn row_softmax(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for mut row in v.row_iter_mut() {
            let m = row.max();
            row.apply(|x| *x = (*x - m).exp());
            let s = row.sum();
            row /= s;
        }
        self.derived(v, Op::RowSoftmax(a), &[a])
    }

    /// Applies the N×N matrix `adj` to every N-row block of `x`.
    pub fn graph_prop(&mut self, adj: Var, x: Var) -> Var {
        let (va, vx) = (self.value(adj), self.value(x));
        let n = va.nrows();
        assert_eq!(vx.nrows() % n, 0, "graph_prop block mismatch");
        let blocks = vx.nrows() / n;
        let mut v = DMatrix::zeros(vx.nrows(), vx.ncols());
        for b in 0..blocks {
            let out = va * vx.rows(b * n, n);
            v.rows_mut(b * n, n).copy_from(&out);
        }
        self.derived(v, Op::GraphProp { adj, x }, &[adj, x])
    }

    /// Rows of the particle matrix `state` (B×D) are unpacked into a
    /// (B·nodes)×units node-feature matrix, reading columns
    /// `offset .. offset + nodes·units`.
    pub fn state_to_nodes(&mut self, state: Var, offset: usize, nodes: usize, units: usize) -> Var {
        let vs = self.value(state);
        let b = vs.nrows();
        let mut v = DMatrix::zeros(b * nodes, units);
        for j in 0..b {
            for i in 0..nodes {
                for k in 0..units {
                    v[(j * nodes + i, k)] = vs[(j, offset + i * units + k)];
                }
            }
        }
        self.derived(
            v,
            Op::StateToNodes {
                state,
                offset,
                nodes,
                units,
            },
            &[state],
        )
    }

    /// Inverse of [`Tape::state_to_nodes`] applied to consecutive parts.
    pub fn nodes_to_state(&mut self, parts: &[Var], nodes: usize, units: usize) -> Var {
        let rows = self.value(parts[0]).nrows();
        let b = rows / nodes;
        let width = nodes * units;
        let mut v = DMatrix::zeros(b, width * parts.len());
        for (p, part) in parts.iter().enumerate() {
            let vp = self.value(*part);
            for j in 0..b {
                for i in 0..nodes {
                    for k in 0..units {
                        v[(j, p * width + i * units + k)] = vp[(j * nodes + i, k)];
                    }
                }
            }
        }
        let parts = parts.to_vec();
        let ps = parts.clone();
        self.derived(v, Op::NodesToState { parts, nodes, units }, &ps)
    }

    /// B×N → (B·N)×1 in row-major order.
    pub fn rows_to_column(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let (b, n) = va.shape();
        let v = DMatrix::from_fn(b * n, 1, |r, _| va[(r / n, r % n)]);
        self.derived(v, Op::RowsToColumn(a), &[a])
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let v = va.row_mean();
        let v = DMatrix::from_row_slice(1, va.ncols(), v.as_slice());
        self.derived(v, Op::MeanRows(a), &[a])
    }

    /// Columnwise median over rows; even counts average the two middle values.
    pub fn median_rows(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let mut v = DMatrix::zeros(1, va.ncols());
        let mut picks = Vec::with_capacity(va.ncols());
        for c in 0..va.ncols() {
            let col: Vec<f64> = va.column(c).iter().cloned().collect();
            let (m, p) = median_picks(&col);
            v[(0, c)] = m;
            picks.push(p);
        }
        self.derived(v, Op::MedianRows { x: a, picks }, &[a])
    }

    /// Row sums: B×k → B×1.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let v = DMatrix::from_fn(va.nrows(), 1, |r, _| va.row(r).sum());
        self.derived(v, Op::SumCols(a), &[a])
    }

    /// `log((1/B) Σ_j exp(a_j))` over a B×1 column.
    pub fn log_mean_exp_rows(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let m = va.max();
        let s: f64 = va.iter().map(|x| (x - m).exp()).sum();
        let v = m + (s / va.len() as f64).ln();
        self.derived(DMatrix::from_element(1, 1, v), Op::LogMeanExpRows(a), &[a])
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = self.value(a).sum();
        self.derived(DMatrix::from_element(1, 1, v), Op::SumAll(a), &[a])
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Reverse pass from the 1×1 node `out`.
    pub fn backward(&self, out: Var) -> Grads {
        let n = self.nodes.len();
        let mut grads: Vec<Option<DMatrix<f64>>> = vec![None; n];
        let shapes = self.nodes.iter().map(|nd| nd.value.shape()).collect();
        grads[out.0] = Some(DMatrix::from_element(1, 1, 1.0));

        for idx in (0..=out.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let y = &node.value;
            let acc = |v: Var, d: DMatrix<f64>, grads: &mut Vec<Option<DMatrix<f64>>>| {
                if !self.nodes[v.0].needs_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(e) => *e += d,
                    slot @ None => *slot = Some(d),
                }
            };
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone(), &mut grads);
                    acc(*b, g, &mut grads);
                }
                Op::Sub(a, b) => {
                    acc(*a, g.clone(), &mut grads);
                    acc(*b, -g, &mut grads);
                }
                Op::Mul(a, b) => {
                    let da = g.component_mul(self.value(*b));
                    let db = g.component_mul(self.value(*a));
                    acc(*a, da, &mut grads);
                    acc(*b, db, &mut grads);
                }
                Op::MatMul(a, b) => {
                    if self.nodes[a.0].needs_grad {
                        acc(*a, &g * self.value(*b).transpose(), &mut grads);
                    }
                    if self.nodes[b.0].needs_grad {
                        acc(*b, self.value(*a).transpose() * &g, &mut grads);
                    }
                }
                Op::Scale(a, c) => acc(*a, g * *c, &mut grads),
                Op::AddScalar(a) => acc(*a, g, &mut grads),
                Op::ScaleBy(a, s) => {
                    let sv = self.scalar(*s);
                    let ds = g.component_mul(self.value(*a)).sum();
                    acc(*s, DMatrix::from_element(1, 1, ds), &mut grads);
                    acc(*a, g * sv, &mut grads);
                }
                Op::AddRow(a, row) => {
                    let cs = g.row_sum();
                    acc(*row, DMatrix::from_row_slice(1, cs.len(), cs.as_slice()), &mut grads);
                    acc(*a, g, &mut grads);
                }
                Op::Sigmoid(a) => {
                    let d = g.zip_map(y, |gi, yi| gi * yi * (1.0 - yi));
                    acc(*a, d, &mut grads);
                }
                Op::Tanh(a) => {
                    let d = g.zip_map(y, |gi, yi| gi * (1.0 - yi * yi));
                    acc(*a, d, &mut grads);
                }
                Op::Softplus(a) => {
                    let d = g.zip_map(self.value(*a), |gi, xi| gi * sigmoid(xi));
                    acc(*a, d, &mut grads);
                }
                Op::ClampMin(a, floor) => {
                    let d = g.zip_map(self.value(*a), |gi, xi| if xi > *floor { gi } else { 0.0 });
                    acc(*a, d, &mut grads);
                }
                Op::Relu(a) => {
                    let d = g.zip_map(self.value(*a), |gi, xi| if xi > 0.0 { gi } else { 0.0 });
                    acc(*a, d, &mut grads);
                }
                Op::Log(a) => {
                    let d = g.zip_map(self.value(*a), |gi, xi| gi / xi);
                    acc(*a, d, &mut grads);
                }
                Op::Recip(a) => {
                    let d = g.zip_map(y, |gi, yi| -gi * yi * yi);
                    acc(*a, d, &mut grads);
                }
                Op::Square(a) => {
                    let d = g.zip_map(self.value(*a), |gi, xi| 2.0 * gi * xi);
                    acc(*a, d, &mut grads);
                }
                Op::Abs(a) => {
                    let d = g.zip_map(self.value(*a), |gi, xi| gi * xi.signum() * (xi != 0.0) as u8 as f64);
                    acc(*a, d, &mut grads);
                }
                Op::Transpose(a) => acc(*a, g.transpose(), &mut grads),
                Op::HConcat(a, b) => {
                    let ca = self.value(*a).ncols();
                    let cb = self.value(*b).ncols();
                    acc(*a, g.columns(0, ca).into_owned(), &mut grads);
                    acc(*b, g.columns(ca, cb).into_owned(), &mut grads);
                }
                Op::RowSoftmax(a) => {
                    let mut d = g.clone();
                    for r in 0..y.nrows() {
                        let dot = g.row(r).dot(&y.row(r));
                        for c in 0..y.ncols() {
                            d[(r, c)] = y[(r, c)] * (g[(r, c)] - dot);
                        }
                    }
                    acc(*a, d, &mut grads);
                }
                Op::GraphProp { adj, x } => {
                    let va = self.value(*adj);
                    let vx = self.value(*x);
                    let nn = va.nrows();
                    let blocks = vx.nrows() / nn;
                    if self.nodes[x.0].needs_grad {
                        let at = va.transpose();
                        let mut dx = DMatrix::zeros(vx.nrows(), vx.ncols());
                        for b in 0..blocks {
                            let blk = &at * g.rows(b * nn, nn);
                            dx.rows_mut(b * nn, nn).copy_from(&blk);
                        }
                        acc(*x, dx, &mut grads);
                    }
                    if self.nodes[adj.0].needs_grad {
                        let mut da = DMatrix::zeros(nn, nn);
                        for b in 0..blocks {
                            da += g.rows(b * nn, nn) * vx.rows(b * nn, nn).transpose();
                        }
                        acc(*adj, da, &mut grads);
                    }
                }
                Op::StateToNodes {
                    state,
                    offset,
                    nodes,
                    units,
                } => {
                    let (b, d) = self.value(*state).shape();
                    let mut ds = DMatrix::zeros(b, d);
                    for j in 0..b {
                        for i in 0..*nodes {
                            for k in 0..*units {
                                ds[(j, offset + i * units + k)] = g[(j * nodes + i, k)];
                            }
                        }
                    }
                    acc(*state, ds, &mut grads);
                }
                Op::NodesToState { parts, nodes, units } => {
                    let width = nodes * units;
                    let b = g.nrows();
                    for (p, part) in parts.iter().enumerate() {
                        let mut dp = DMatrix::zeros(b * nodes, *units);
                        for j in 0..b {
                            for i in 0..*nodes {
                                for k in 0..*units {
                                    dp[(j * nodes + i, k)] = g[(j, p * width + i * units + k)];
                                }
                            }
                        }
                        acc(*part, dp, &mut grads);
                    }
                }
                Op::RowsToColumn(a) => {
                    let (b, nn) = self.value(*a).shape();
                    let d = DMatrix::from_fn(b, nn, |r, c| g[(r * nn + c, 0)]);
                    acc(*a, d, &mut grads);
                }
                Op::MeanRows(a) => {
                    let (b, k) = self.value(*a).shape();
                    let d = DMatrix::from_fn(b, k, |_, c| g[(0, c)] / b as f64);
                    acc(*a, d, &mut grads);
                }
                Op::MedianRows { x, picks } => {
                    let (b, k) = self.value(*x).shape();
                    let mut d = DMatrix::zeros(b, k);
                    for (c, p) in picks.iter().enumerate() {
                        let w = 1.0 / p.len() as f64;
                        for &r in p {
                            d[(r, c)] += g[(0, c)] * w;
                        }
                    }
                    acc(*x, d, &mut grads);
                }
                Op::SumCols(a) => {
                    let (b, k) = self.value(*a).shape();
                    let d = DMatrix::from_fn(b, k, |r, _| g[(r, 0)]);
                    acc(*a, d, &mut grads);
                }
                Op::LogMeanExpRows(a) => {
                    let va = self.value(*a);
                    let m = va.max();
                    let e = va.map(|x| (x - m).exp());
                    let s = e.sum();
                    acc(*a, e * (g[(0, 0)] / s), &mut grads);
                }
                Op::SumAll(a) => {
                    let (r, c) = self.value(*a).shape();
                    acc(*a, DMatrix::from_element(r, c, g[(0, 0)]), &mut grads);
                }
            }
        }
        Grads { grads, shapes }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    /// Central finite-difference check of `f` at every coordinate of every input.
    fn check(inputs: Vec<DMatrix<f64>>, f: impl Fn(&mut Tape, &[Var]) -> Var) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|m| tape.param(m.clone())).collect();
        let out = f(&mut tape, &vars);
        let grads = tape.backward(out);
        let h = 1e-6;
        for (k, input) in inputs.iter().enumerate() {
            let analytic = grads.wrt(vars[k]);
            for idx in 0..input.len() {
                let eval = |delta: f64| {
                    let mut t = Tape::new();
                    let vs: Vec<Var> = inputs
                        .iter()
                        .enumerate()
                        .map(|(q, m)| {
                            let mut m = m.clone();
                            if q == k {
                                m[idx] += delta;
                            }
                            t.param(m)
                        })
                        .collect();
                    let o = f(&mut t, &vs);
                    t.scalar(o)
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let an = analytic[idx];
                assert!(
                    (fd - an).abs() <= 1e-6 * (1.0 + fd.abs()),
                    "input {k} coord {idx}: fd {fd} vs analytic {an}"
                );
            }
        }
    }

    #[test]
    fn elementwise_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random(&mut rng, 3, 2);
        let b = random(&mut rng, 3, 2);
        check(vec![a, b], |t, v| {
            let s = t.sigmoid(v[0]);
            let th = t.tanh(v[1]);
            let m = t.mul(s, th);
            let sp = t.softplus(m);
            let sq = t.square(sp);
            let d = t.sub(sq, v[0]);
            let l = t.add_scalar(sp, 2.0);
            let l = t.log(l);
            let r = t.recip(l);
            let l = t.add(l, r);
            let e = t.add(d, l);
            let e = t.scale(e, 0.7);
            t.sum_all(e)
        });
    }

    #[test]
    fn matrix_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random(&mut rng, 4, 3);
        let w = random(&mut rng, 3, 2);
        let row = random(&mut rng, 1, 2);
        let s = random(&mut rng, 1, 1);
        check(vec![a, w, row, s], |t, v| {
            let m = t.matmul(v[0], v[1]);
            let m = t.add_row(m, v[2]);
            let m = t.scale_by(m, v[3]);
            let tr = t.transpose(m);
            let c = t.hconcat(m, m);
            let sm = t.row_softmax(c);
            let a = t.sum_all(tr);
            let b = t.sum_all(sm);
            let col = t.rows_to_column(m);
            let col = t.tanh(col);
            let cs = t.sum_all(col);
            let ab = t.add(a, b);
            t.add(ab, cs)
        });
    }

    #[test]
    fn graph_and_layout_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let state = random(&mut rng, 2, 12);
        let adj = random(&mut rng, 3, 3);
        check(vec![state, adj], |t, v| {
            let n0 = t.state_to_nodes(v[0], 0, 3, 2);
            let n1 = t.state_to_nodes(v[0], 6, 3, 2);
            let g = t.graph_prop(v[1], n0);
            let g = t.tanh(g);
            let h = t.mul(g, n1);
            let st = t.nodes_to_state(&[h, g], 3, 2);
            let sq = t.square(st);
            t.sum_all(sq)
        });
    }

    #[test]
    fn reduction_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random(&mut rng, 5, 3);
        check(vec![a], |t, v| {
            let mean = t.mean_rows(v[0]);
            let med = t.median_rows(v[0]);
            let rs = t.sum_cols(v[0]);
            let lme = t.log_mean_exp_rows(rs);
            let ab = t.abs(med);
            let m1 = t.sum_all(mean);
            let m2 = t.sum_all(ab);
            let s = t.add(m1, m2);
            let relu = t.relu(v[0]);
            let r = t.sum_all(relu);
            let s = t.add(s, r);
            t.add(s, lme)
        });
    }

    #[test]
    fn even_median_averages_middle_pair() {
        let mut t = Tape::new();
        let a = t.param(DMatrix::from_column_slice(4, 1, &[4.0, 1.0, 3.0, 2.0]));
        let m = t.median_rows(a);
        assert_eq!(t.scalar(m), 2.5);
        let g = t.backward(m).wrt(a);
        assert_eq!(g.as_slice(), &[0.0, 0.0, 0.5, 0.5]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut t = Tape::new();
        let c = t.constant(DMatrix::from_element(1, 1, 3.0));
        let p = t.param(DMatrix::from_element(1, 1, 2.0));
        let m = t.mul(c, p);
        let g = t.backward(m);
        assert_eq!(g.wrt(p)[(0, 0)], 3.0);
        assert_eq!(g.wrt(c)[(0, 0)], 0.0);
    }

    #[test]
    fn clamp_min_passes_gradient_above_the_floor() {
        let mut t = Tape::new();
        let x = t.param(DMatrix::from_row_slice(1, 3, &[-2.0, 0.5, 3.0]));
        let c = t.clamp_min(x, 0.0);
        let sq = t.square(c);
        let out = t.sum_all(sq);
        assert_eq!(t.scalar(out), 9.25);
        let g = t.backward(out).wrt(x);
        assert_eq!(g.as_slice(), &[0.0, 1.0, 6.0]);
    }

    #[test]
    fn softplus_is_stable() {
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
        assert!((softplus(100.0) - 100.0).abs() < 1e-12);
        assert!(softplus(-100.0) > 0.0);
    }
}
