//! Sequence-to-sequence probabilistic prediction: filter the history with
//! the particle flow, then roll the ensemble forward through the decoder.
//!
//! Inference and training share [`forward_tape`]. All noise for a window is
//! drawn up front by [`WindowNoise::sample`], so a forward pass is a
//! deterministic function of the parameters for a fixed seed.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::data::Window;
use crate::error::{Error, Result};
use crate::flow::{flow_update_traced, FlowConfig, FlowTrace, ModelMeasurement};
use crate::metrics::sorted_quantile;
use crate::rng;
use crate::ssm::cell::{self, ParamVars};
use crate::ssm::{Graph, ModelTheta, StateEnsemble};

/// Every random draw used by one window: the initial ensemble, dynamics
/// noise for filter steps `t = 2..P`, and dynamics plus measurement noise
/// for each decoder step.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowNoise {
    pub init: DMatrix<f64>,
    pub filter_dyn: Vec<DMatrix<f64>>,
    pub decoder_dyn: Vec<DMatrix<f64>>,
    pub decoder_meas: Vec<DMatrix<f64>>,
}

impl WindowNoise {
    pub fn sample(n_particles: usize, state_dim: usize, n_series: usize, p: usize, q: usize, seed: u64) -> Self {
        // the init stream matches ssm::init_ensemble
        let init = rng::standard_normal_matrix(&mut rng::stream(seed, 0x1417), n_particles, state_dim);
        let mut f = rng::stream(seed, 0x2001);
        let filter_dyn = (1..p.max(1))
            .map(|_| rng::standard_normal_matrix(&mut f, n_particles, state_dim))
            .collect();
        let mut dd = rng::stream(seed, 0x2002);
        let decoder_dyn = (0..q)
            .map(|_| rng::standard_normal_matrix(&mut dd, n_particles, state_dim))
            .collect();
        let mut dm = rng::stream(seed, 0x2003);
        let decoder_meas = (0..q)
            .map(|_| rng::standard_normal_matrix(&mut dm, n_particles, n_series))
            .collect();
        Self {
            init,
            filter_dyn,
            decoder_dyn,
            decoder_meas,
        }
    }

    pub fn n_particles(&self) -> usize {
        self.init.nrows()
    }
}

/// Previous-observation source for each decoder step after the first.
#[derive(Debug, Clone, PartialEq)]
pub enum DecoderInput {
    /// The particle's own sample from the previous step.
    Own,
    /// A ground-truth observation shared by all particles (scheduled
    /// sampling during training).
    Truth(DVector<f64>),
}

/// Tape handles produced by [`forward_tape`].
#[derive(Debug, Clone)]
pub struct ForwardPass {
    /// Posterior ensemble for `x_P`.
    pub filtered: Var,
    /// Per decoder step, `N_p × D`.
    pub states: Vec<Var>,
    /// Per decoder step, `N_p × N` emission means and stds.
    pub means: Vec<Var>,
    pub stds: Vec<Var>,
    /// Per decoder step, `N_p × N` forecast draws (the means when noiseless).
    pub samples: Vec<Var>,
    pub traces: Vec<FlowTrace>,
}

/// Options for [`forward_tape`].
#[derive(Debug, Clone, Copy)]
pub struct ForwardOptions<'a> {
    pub flow: &'a FlowConfig,
    pub noiseless: bool,
    /// Inputs for decoder steps `2..Q` (`None` means [`DecoderInput::Own`]
    /// everywhere).
    pub decoder_inputs: Option<&'a [DecoderInput]>,
    /// Flow coefficients to reuse instead of recomputing them from the
    /// current ensemble (one trace per history step).
    pub frozen_flow: Option<&'a [FlowTrace]>,
}

impl<'a> ForwardOptions<'a> {
    /// Stochastic decoder fed with its own samples, flow recomputed.
    pub fn new(flow: &'a FlowConfig) -> Self {
        Self {
            flow,
            noiseless: false,
            decoder_inputs: None,
            frozen_flow: None,
        }
    }
}

fn broadcast(tape: &mut Tape, y: &DVector<f64>, rows: usize) -> Var {
    tape.constant(DMatrix::from_fn(rows, y.len(), |_, i| y[i]))
}

/// Replays frozen flow steps on the tape: `η ← η + ε (η gᵀ) kᵀ + ε bᵀ`.
fn replay_flow(tape: &mut Tape, eta: Var, trace: &FlowTrace) -> Var {
    let mut eta = eta;
    for step in &trace.steps {
        let c = &step.coeffs;
        let gt = tape.constant(c.g.transpose());
        let kt = tape.constant(c.k.transpose());
        let lifted = tape.matmul(eta, gt);
        let drift = tape.matmul(lifted, kt);
        let drift = tape.scale(drift, step.epsilon);
        let moved = tape.add(eta, drift);
        let shift = tape.constant(DMatrix::from_row_slice(1, c.b.len(), c.b.as_slice()) * step.epsilon);
        eta = tape.add_row(moved, shift);
    }
    eta
}

fn row(m: &DMatrix<f64>, t: usize) -> DVector<f64> {
    m.row(t).transpose()
}

fn check_window(model: &ModelTheta, history: &DMatrix<f64>, covariates: &DMatrix<f64>, q: usize) -> Result<()> {
    let h = &model.hyper;
    let p = history.nrows();
    if p == 0 {
        return Err(Error::invalid("P", "history needs at least one step"));
    }
    if history.ncols() != h.n_series {
        return Err(Error::shape("history series", h.n_series, history.ncols()));
    }
    if covariates.shape() != (p + q, h.d_z) {
        return Err(Error::shape(
            "window covariates",
            format!("{}x{}", p + q, h.d_z),
            format!("{}x{}", covariates.nrows(), covariates.ncols()),
        ));
    }
    if history.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: "window history".into(),
        });
    }
    Ok(())
}

/// Full window pass on `tape`. Flow coefficients are computed from the
/// current values and enter as constants; with differentiable parameters
/// the affine flow steps are replayed so gradients pass through them.
pub fn forward_tape(
    tape: &mut Tape,
    model: &ModelTheta,
    vars: &ParamVars,
    history: &DMatrix<f64>,
    covariates: &DMatrix<f64>,
    noise: &WindowNoise,
    options: ForwardOptions<'_>,
) -> Result<ForwardPass> {
    let p = history.nrows();
    let q = noise.decoder_dyn.len();
    check_window(model, history, covariates, q)?;
    let np = noise.n_particles();
    if noise.init.ncols() != model.state_dim() || noise.filter_dyn.len() + 1 != p || noise.decoder_meas.len() != q {
        return Err(Error::shape("window noise", format!("P={p}, Q={q}"), "mismatched draws"));
    }
    if options.frozen_flow.is_some_and(|f| f.len() != p) {
        return Err(Error::shape("frozen flow traces", p, options.frozen_flow.map_or(0, <[_]>::len)));
    }
    if let Some(inputs) = options.decoder_inputs {
        if inputs.len() + 1 < q {
            return Err(Error::shape("decoder inputs", q.saturating_sub(1), inputs.len()));
        }
    }
    let measurement = ModelMeasurement(model);
    let mut state = cell::initial_state_tape(tape, vars, &noise.init);
    let mut traces = Vec::with_capacity(p);
    for t in 0..p {
        if t > 0 {
            let y_prev = broadcast(tape, &row(history, t - 1), np);
            state = cell::transition_tape(
                tape,
                model,
                vars,
                state,
                y_prev,
                &row(covariates, t),
                Some(&noise.filter_dyn[t - 1]),
            );
        }
        if let Some(frozen) = options.frozen_flow {
            state = replay_flow(tape, state, &frozen[t]);
            traces.push(frozen[t].clone());
            continue;
        }
        let ens = StateEnsemble::new(tape.value(state).clone(), t + 1)?;
        let (posterior, trace) = flow_update_traced(&ens, &row(history, t), &measurement, options.flow)?;
        state = if tape.needs_grad(state) {
            replay_flow(tape, state, &trace)
        } else {
            tape.constant(posterior.particles)
        };
        traces.push(trace);
    }
    let filtered = state;

    let mut pass = ForwardPass {
        filtered,
        states: Vec::with_capacity(q),
        means: Vec::with_capacity(q),
        stds: Vec::with_capacity(q),
        samples: Vec::with_capacity(q),
        traces,
    };
    for k in 0..q {
        let y_prev = if k == 0 {
            broadcast(tape, &row(history, p - 1), np)
        } else {
            match options.decoder_inputs.map(|d| &d[k - 1]) {
                Some(DecoderInput::Truth(y)) => broadcast(tape, y, np),
                _ => pass.samples[k - 1],
            }
        };
        state = cell::transition_tape(
            tape,
            model,
            vars,
            state,
            y_prev,
            &row(covariates, p + k),
            Some(&noise.decoder_dyn[k]),
        );
        let (mean, std) = cell::emission_tape(tape, vars, state);
        let sample = if options.noiseless {
            mean
        } else {
            let xi = tape.constant(noise.decoder_meas[k].clone());
            let spread = tape.mul(std, xi);
            tape.add(mean, spread)
        };
        pass.states.push(state);
        pass.means.push(mean);
        pass.stds.push(std);
        pass.samples.push(sample);
    }
    Ok(pass)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PointStatistic {
    #[default]
    Mean,
    Median,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastMeta {
    pub p: usize,
    pub q: usize,
    pub seed: u64,
    pub model_id: String,
}

/// Sample paths for one window, stored per horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct ForecastDistribution {
    /// `Q` entries of `N_p × N`.
    pub samples: Vec<DMatrix<f64>>,
    /// `Q` entries of `N_p × D`.
    pub state_particles: Vec<DMatrix<f64>>,
    /// `Q × N`.
    pub point: Option<DMatrix<f64>>,
    pub meta: ForecastMeta,
}

impl ForecastDistribution {
    pub fn horizons(&self) -> usize {
        self.samples.len()
    }

    pub fn n_particles(&self) -> usize {
        self.samples.first().map_or(0, |s| s.nrows())
    }

    pub fn n_series(&self) -> usize {
        self.samples.first().map_or(0, |s| s.ncols())
    }

    /// Sample path `j` as `Q × N`.
    pub fn path(&self, j: usize) -> DMatrix<f64> {
        DMatrix::from_fn(self.horizons(), self.n_series(), |t, i| self.samples[t][(j, i)])
    }

    pub fn mean(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.horizons(), self.n_series(), |t, i| self.samples[t].column(i).mean())
    }

    pub fn median(&self) -> DMatrix<f64> {
        empirical_quantile(self, 0.5)
    }

    pub fn summarize(&self, statistic: PointStatistic) -> DMatrix<f64> {
        match statistic {
            PointStatistic::Mean => self.mean(),
            PointStatistic::Median => self.median(),
        }
    }
}

/// Type-7 α-quantile per `(t, i)` cell.
pub fn empirical_quantile(dist: &ForecastDistribution, alpha: f64) -> DMatrix<f64> {
    DMatrix::from_fn(dist.horizons(), dist.n_series(), |t, i| {
        let mut col: Vec<f64> = dist.samples[t].column(i).iter().copied().collect();
        col.sort_by(f64::total_cmp);
        sorted_quantile(&col, alpha)
    })
}

/// Short stable identifier of a parameter set (FNV-1a over the bits).
pub fn model_id(model: &ModelTheta) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for v in model.to_flat() {
        for b in v.to_bits().to_le_bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    }
    format!("{h:016x}")
}

/// Posterior ensemble for `x_P` given `P` observations.
pub fn filter_window(
    model: &ModelTheta,
    graph: Option<&Graph>,
    y_hist: &DMatrix<f64>,
    z: &DMatrix<f64>,
    n_particles: usize,
    flow: &FlowConfig,
    seed: u64,
) -> Result<StateEnsemble> {
    let p = y_hist.nrows();
    if n_particles == 0 {
        return Err(Error::invalid("n_particles", "must be at least 1"));
    }
    // z may carry the decoder rows too; only the first P are used here
    if z.nrows() < p {
        return Err(Error::shape("window covariates", p, z.nrows()));
    }
    let noise = WindowNoise::sample(n_particles, model.state_dim(), model.n_series(), p, 0, seed);
    let mut tape = Tape::new();
    let vars = ParamVars::register(&mut tape, model, graph, false)?;
    let opts = ForwardOptions::new(flow);
    let pass = forward_tape(&mut tape, model, &vars, y_hist, &z.rows(0, p).into_owned(), &noise, opts)?;
    StateEnsemble::new(tape.value(pass.filtered).clone(), p)
}

/// Decoder roll-out from the ensemble at time `P`. `z` holds the `Q`
/// decoder covariate rows. The first step conditions on `y_p`, later steps
/// on each particle's own previous sample.
pub fn rollout(
    model: &ModelTheta,
    graph: Option<&Graph>,
    ensemble: &StateEnsemble,
    y_p: &DVector<f64>,
    z: &DMatrix<f64>,
    q: usize,
    seed: u64,
    noiseless: bool,
) -> Result<ForecastDistribution> {
    let h = &model.hyper;
    if ensemble.dim() != model.state_dim() {
        return Err(Error::shape("rollout state", model.state_dim(), ensemble.dim()));
    }
    if y_p.len() != h.n_series {
        return Err(Error::shape("rollout y_P", h.n_series, y_p.len()));
    }
    if z.shape() != (q, h.d_z) {
        return Err(Error::shape("rollout covariates", format!("{q}x{}", h.d_z), format!("{}x{}", z.nrows(), z.ncols())));
    }
    let np = ensemble.n_particles();
    // decoder draws come from their own streams, so they match predict()
    let draws = WindowNoise::sample(np, model.state_dim(), h.n_series, 1, q, seed);
    let mut tape = Tape::new();
    let vars = ParamVars::register(&mut tape, model, graph, false)?;
    let mut state = tape.constant(ensemble.particles.clone());
    let mut samples = Vec::with_capacity(q);
    let mut states = Vec::with_capacity(q);
    let mut prev: Option<Var> = None;
    for k in 0..q {
        let y_prev = match prev {
            None => broadcast(&mut tape, y_p, np),
            Some(s) => s,
        };
        state = cell::transition_tape(&mut tape, model, &vars, state, y_prev, &row(z, k), Some(&draws.decoder_dyn[k]));
        let (mean, std) = cell::emission_tape(&mut tape, &vars, state);
        let sample = if noiseless {
            mean
        } else {
            let xi = tape.constant(draws.decoder_meas[k].clone());
            let spread = tape.mul(std, xi);
            tape.add(mean, spread)
        };
        samples.push(tape.value(sample).clone());
        states.push(tape.value(state).clone());
        prev = Some(sample);
    }
    Ok(ForecastDistribution {
        samples,
        state_particles: states,
        point: None,
        meta: ForecastMeta {
            p: ensemble.time_index,
            q,
            seed,
            model_id: model_id(model),
        },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictConfig {
    pub n_particles: usize,
    pub flow: FlowConfig,
    pub point: PointStatistic,
    pub noiseless: bool,
}

impl Default for PredictConfig {
    fn default() -> Self {
        Self {
            n_particles: 10,
            flow: FlowConfig::default(),
            point: PointStatistic::Mean,
            noiseless: false,
        }
    }
}

/// [`filter_window`] followed by [`rollout`], with the point summary filled
/// in. `covariates` has `P + Q` rows.
pub fn predict(
    model: &ModelTheta,
    graph: Option<&Graph>,
    history: &DMatrix<f64>,
    covariates: &DMatrix<f64>,
    q: usize,
    config: &PredictConfig,
    seed: u64,
) -> Result<(ForecastDistribution, StateEnsemble)> {
    let p = history.nrows();
    check_window(model, history, covariates, q)?;
    let ensemble = filter_window(model, graph, history, covariates, config.n_particles, &config.flow, seed)?;
    let z_dec = covariates.rows(p, q).into_owned();
    let mut dist = rollout(model, graph, &ensemble, &row(history, p - 1), &z_dec, q, seed, config.noiseless)?;
    dist.point = Some(dist.summarize(config.point));
    Ok((dist, ensemble))
}

/// [`predict`] over many windows in parallel; window `k` uses seed
/// `mix(seed, k)`, so results do not depend on the thread count.
pub fn predict_windows(
    model: &ModelTheta,
    graph: Option<&Graph>,
    windows: &[Window],
    config: &PredictConfig,
    seed: u64,
) -> Result<Vec<ForecastDistribution>> {
    windows
        .par_iter()
        .enumerate()
        .map(|(k, w)| {
            predict(model, graph, &w.history, &w.covariates, w.q(), config, rng::mix(seed, k as u64)).map(|(d, _)| d)
        })
        .collect()
}

fn write_num(v: f64) -> String {
    format!("{v}")
}

/// `window_id,horizon,series,sample_id,value`, horizons 1-based.
pub fn write_samples<W: Write>(forecasts: &[ForecastDistribution], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["window_id", "horizon", "series", "sample_id", "value"])?;
    for (wid, f) in forecasts.iter().enumerate() {
        for (t, s) in f.samples.iter().enumerate() {
            for i in 0..s.ncols() {
                for j in 0..s.nrows() {
                    w.write_record([
                        wid.to_string(),
                        (t + 1).to_string(),
                        i.to_string(),
                        j.to_string(),
                        write_num(s[(j, i)]),
                    ])?;
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// `window_id,horizon,series,point,q10,q50,q90`.
pub fn write_summary<W: Write>(forecasts: &[ForecastDistribution], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["window_id", "horizon", "series", "point", "q10", "q50", "q90"])?;
    for (wid, f) in forecasts.iter().enumerate() {
        let point = f.point.clone().unwrap_or_else(|| f.mean());
        let qs = [0.1, 0.5, 0.9].map(|a| empirical_quantile(f, a));
        for t in 0..f.horizons() {
            for i in 0..f.n_series() {
                w.write_record([
                    wid.to_string(),
                    (t + 1).to_string(),
                    i.to_string(),
                    write_num(point[(t, i)]),
                    write_num(qs[0][(t, i)]),
                    write_num(qs[1][(t, i)]),
                    write_num(qs[2][(t, i)]),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// `window_id,horizon,series,value` for the ground truth of each window.
pub fn write_truth<W: Write>(targets: &[DMatrix<f64>], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["window_id", "horizon", "series", "value"])?;
    for (wid, m) in targets.iter().enumerate() {
        for t in 0..m.nrows() {
            for i in 0..m.ncols() {
                w.write_record([wid.to_string(), (t + 1).to_string(), i.to_string(), write_num(m[(t, i)])])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Parsed rows of a long-format table: integer keys followed by values.
fn read_long<R: Read>(reader: R, header: &[&str], keys: usize) -> Result<Vec<(Vec<usize>, Vec<f64>)>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let found: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if found != header {
        return Err(Error::Data(format!(
            "expected header `{}`, found `{}`",
            header.join(","),
            found.join(",")
        )));
    }
    let mut rows = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let bad = |column: usize, reason: String| Error::Parse {
            row: k + 2,
            column: column + 1,
            reason,
        };
        if rec.len() != header.len() {
            return Err(bad(rec.len(), format!("expected {} fields", header.len())));
        }
        let mut ks = Vec::with_capacity(keys);
        for c in 0..keys {
            ks.push(rec[c].parse().map_err(|_| bad(c, format!("`{}` is not an index", &rec[c])))?);
        }
        let mut vs = Vec::with_capacity(header.len() - keys);
        for c in keys..header.len() {
            vs.push(rec[c].parse().map_err(|_| bad(c, format!("`{}` is not a number", &rec[c])))?);
        }
        rows.push((ks, vs));
    }
    Ok(rows)
}

fn extent(rows: &[(Vec<usize>, Vec<f64>)], k: usize) -> usize {
    rows.iter().map(|(ks, _)| ks[k] + 1).max().unwrap_or(0)
}

fn check_complete(filled: usize, expected: usize, what: &str) -> Result<()> {
    if filled != expected {
        return Err(Error::Data(format!("{what} table is incomplete: {filled} of {expected} cells")));
    }
    Ok(())
}

/// Inverse of [`write_samples`]: window → horizon → `N_p × N`.
pub fn read_samples<R: Read>(reader: R) -> Result<Vec<Vec<DMatrix<f64>>>> {
    let rows = read_long(reader, &["window_id", "horizon", "series", "sample_id", "value"], 4)?;
    if rows.iter().any(|(k, _)| k[1] == 0) {
        return Err(Error::Data("horizons are 1-based".into()));
    }
    let (nw, nq, nn, np) = (extent(&rows, 0), extent(&rows, 1) - 1, extent(&rows, 2), extent(&rows, 3));
    let mut out = vec![vec![DMatrix::from_element(np, nn, f64::NAN); nq]; nw];
    for (k, v) in &rows {
        out[k[0]][k[1] - 1][(k[3], k[2])] = v[0];
    }
    let filled = out.iter().flatten().flat_map(|m| m.iter()).filter(|v| !v.is_nan()).count();
    check_complete(filled, nw * nq * nn * np, "samples")?;
    Ok(out)
}

fn read_cells<R: Read>(reader: R, header: &[&str], what: &str) -> Result<Vec<DMatrix<f64>>> {
    let rows = read_long(reader, header, 3)?;
    if rows.iter().any(|(k, _)| k[1] == 0) {
        return Err(Error::Data("horizons are 1-based".into()));
    }
    let (nw, nq, nn) = (extent(&rows, 0), extent(&rows, 1) - 1, extent(&rows, 2));
    let mut out = vec![DMatrix::from_element(nq, nn, f64::NAN); nw];
    for (k, v) in &rows {
        out[k[0]][(k[1] - 1, k[2])] = v[0];
    }
    let filled = out.iter().flat_map(|m| m.iter()).filter(|v| !v.is_nan()).count();
    check_complete(filled, nw * nq * nn, what)?;
    Ok(out)
}

/// Point forecasts from a summary file: window → `Q × N`.
pub fn read_summary_points<R: Read>(reader: R) -> Result<Vec<DMatrix<f64>>> {
    read_cells(reader, &["window_id", "horizon", "series", "point", "q10", "q50", "q90"], "summary")
}

pub fn read_truth<R: Read>(reader: R) -> Result<Vec<DMatrix<f64>>> {
    read_cells(reader, &["window_id", "horizon", "series", "value"], "truth")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ssm::{AdjacencyMode, Hyper};
    use proptest::prelude::*;

    fn gru(n: usize, dx: usize, dz: usize, sigma: f64, seed: u64) -> ModelTheta {
        ModelTheta::init(Hyper::gru(n, dx, 1, dz), 1.0, sigma, seed).unwrap()
    }

    fn dist_from(columns: &[f64]) -> ForecastDistribution {
        ForecastDistribution {
            samples: vec![DMatrix::from_column_slice(columns.len(), 1, columns)],
            state_particles: vec![],
            point: None,
            meta: ForecastMeta {
                p: 1,
                q: 1,
                seed: 0,
                model_id: String::new(),
            },
        }
    }

    #[test]
    fn quantile_cases() {
        assert_eq!(empirical_quantile(&dist_from(&[5.0, 3.0, 1.0, 2.0, 4.0]), 0.5)[(0, 0)], 3.0);
        assert_eq!(empirical_quantile(&dist_from(&[0.0, 10.0]), 0.5)[(0, 0)], 5.0);
        for a in [0.1, 0.9] {
            assert_eq!(empirical_quantile(&dist_from(&[2.5]), a)[(0, 0)], 2.5);
        }
    }

    #[test]
    fn zero_emission_filter_returns_initial_ensemble() {
        let mut m = gru(2, 2, 0, 0.3, 1);
        m.w_phi.fill(0.0);
        let hist = DMatrix::from_row_slice(1, 2, &[0.4, -0.3]);
        let ens = filter_window(&m, None, &hist, &DMatrix::zeros(1, 0), 5, &FlowConfig::default(), 9).unwrap();
        let init = crate::ssm::init_ensemble(5, &m, 9).unwrap();
        assert!((ens.particles - init.particles).amax() < 1e-15);
    }

    #[test]
    fn filter_is_deterministic() {
        let m = gru(2, 3, 2, 0.2, 4);
        let hist = DMatrix::from_fn(6, 2, |t, i| (t as f64 * 0.3 + i as f64).sin());
        let z = DMatrix::from_fn(6, 2, |t, c| (t + c) as f64 * 0.1);
        let a = filter_window(&m, None, &hist, &z, 8, &FlowConfig::default(), 3).unwrap();
        let b = filter_window(&m, None, &hist, &z, 8, &FlowConfig::default(), 3).unwrap();
        assert_eq!(a, b);
        let c = filter_window(&m, None, &hist, &z, 8, &FlowConfig::default(), 4).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn rollout_shapes() {
        let m = gru(3, 2, 0, 0.1, 2);
        let ens = crate::ssm::init_ensemble(7, &m, 1).unwrap();
        let d = rollout(&m, None, &ens, &DVector::zeros(3), &DMatrix::zeros(12, 0), 12, 5, false).unwrap();
        assert_eq!((d.n_particles(), d.horizons(), d.n_series()), (7, 12, 3));
        assert_eq!(d.state_particles.len(), 12);
        assert_eq!(d.state_particles[0].shape(), (7, 6));
    }

    #[test]
    fn noiseless_rollout_of_identical_particles_is_degenerate() {
        let m = gru(2, 2, 0, 0.0, 3);
        let ens = StateEnsemble::new(DMatrix::from_fn(4, 4, |_, c| c as f64 * 0.2), 1).unwrap();
        let d = rollout(&m, None, &ens, &DVector::from_vec(vec![0.1, 0.2]), &DMatrix::zeros(5, 0), 5, 1, true).unwrap();
        for j in 1..4 {
            assert_eq!(d.path(j), d.path(0));
        }
    }

    #[test]
    fn predict_composes_filter_and_rollout() {
        let m = ModelTheta::init(Hyper::graph_gru(3, 2, 2, 0, 2, AdjacencyMode::Mixed), 1.0, 0.2, 8).unwrap();
        let g = Graph::new(3, vec![(0, 1, 1.0), (1, 2, 1.0)]).unwrap();
        let hist = DMatrix::from_fn(4, 3, |t, i| 0.1 * (t + i) as f64);
        let cfg = PredictConfig {
            n_particles: 6,
            ..PredictConfig::default()
        };
        let (d, ens) = predict(&m, Some(&g), &hist, &DMatrix::zeros(7, 0), 3, &cfg, 11).unwrap();
        let direct = filter_window(&m, Some(&g), &hist, &DMatrix::zeros(4, 0), 6, &cfg.flow, 11).unwrap();
        assert_eq!(ens, direct);
        let r = rollout(&m, Some(&g), &direct, &row(&hist, 3), &DMatrix::zeros(3, 0), 3, 11, false).unwrap();
        assert_eq!(r.samples, d.samples);
        assert_eq!(d.point.as_ref(), Some(&d.mean()));
        let (again, _) = predict(&m, Some(&g), &hist, &DMatrix::zeros(7, 0), 3, &cfg, 11).unwrap();
        assert_eq!(again.samples, d.samples);
    }

    #[test]
    fn empty_horizon_keeps_ensemble() {
        let m = gru(2, 2, 0, 0.1, 1);
        let hist = DMatrix::from_element(3, 2, 0.5);
        let (d, ens) = predict(&m, None, &hist, &DMatrix::zeros(3, 0), 0, &PredictConfig::default(), 1).unwrap();
        assert_eq!(d.horizons(), 0);
        assert_eq!(ens.n_particles(), 10);
    }

    #[test]
    fn tape_replay_matches_flow_output() {
        let m = gru(2, 2, 0, 0.2, 5);
        let hist = DMatrix::from_fn(3, 2, |t, i| (t as f64 - i as f64) * 0.4);
        let noise = WindowNoise::sample(4, 4, 2, 3, 2, 6);
        let cfg = FlowConfig::default();
        let opts = ForwardOptions::new(&cfg);
        let z = DMatrix::zeros(5, 0);
        let mut plain = Tape::new();
        let pv = ParamVars::register(&mut plain, &m, None, false).unwrap();
        let a = forward_tape(&mut plain, &m, &pv, &hist, &z, &noise, opts).unwrap();
        let mut diff = Tape::new();
        let dv = ParamVars::register(&mut diff, &m, None, true).unwrap();
        let b = forward_tape(&mut diff, &m, &dv, &hist, &z, &noise, opts).unwrap();
        assert!((plain.value(a.filtered) - diff.value(b.filtered)).amax() < 1e-12);
        for k in 0..2 {
            assert!((plain.value(a.samples[k]) - diff.value(b.samples[k])).amax() < 1e-12);
        }
    }

    #[test]
    fn export_round_trip() {
        let m = gru(2, 2, 0, 0.1, 1);
        let cfg = PredictConfig {
            n_particles: 3,
            ..PredictConfig::default()
        };
        let hist = DMatrix::from_element(2, 2, 0.3);
        let dists: Vec<ForecastDistribution> = (0..2)
            .map(|w| predict(&m, None, &hist, &DMatrix::zeros(4, 0), 2, &cfg, w).unwrap().0)
            .collect();
        let mut buf = Vec::new();
        write_samples(&dists, &mut buf).unwrap();
        let back = read_samples(buf.as_slice()).unwrap();
        for (d, b) in dists.iter().zip(&back) {
            assert_eq!(&d.samples, b);
        }
        let mut buf = Vec::new();
        write_summary(&dists, &mut buf).unwrap();
        let points = read_summary_points(buf.as_slice()).unwrap();
        assert_eq!(points[1], dists[1].mean());
        let truth = vec![DMatrix::from_element(2, 2, 1.5); 2];
        let mut buf = Vec::new();
        write_truth(&truth, &mut buf).unwrap();
        assert_eq!(read_truth(buf.as_slice()).unwrap(), truth);
        assert!(read_truth("window_id,horizon,series,value\n0,1,0,1\n0,2,1,1\n".as_bytes()).is_err());
    }

    proptest! {
        #[test]
        fn quantiles_monotone_in_alpha(xs in prop::collection::vec(-5.0f64..5.0, 1..20), a in 0.01f64..0.99, b in 0.01f64..0.99) {
            let d = dist_from(&xs);
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(empirical_quantile(&d, lo)[(0, 0)] <= empirical_quantile(&d, hi)[(0, 0)]);
        }
    }
}
