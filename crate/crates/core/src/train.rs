//! Losses, gradients and the minibatch training loop.
//!
//! Gradients are reverse-mode through transitions, emissions, losses and
//! the affine flow steps. The flow coefficients themselves are frozen at
//! their forward values, so the gradient is that of the objective with the
//! coefficients held constant.

use std::io::Write;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::data::Window;
use crate::error::{Error, ErrorClass, Result};
use crate::flow::{FlowConfig, FlowTrace};
use crate::forecast::{
    forward_tape, predict, DecoderInput, ForecastDistribution, ForwardOptions, ForwardPass, PointStatistic,
    PredictConfig, WindowNoise,
};
use crate::rng;
use crate::ssm::cell::ParamVars;
use crate::ssm::{emission_std, Graph, ModelTheta};

const HALF_LOG_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    Mae,
    Nll,
}

impl LossKind {
    /// Median for MAE-trained models, mean otherwise.
    pub fn default_point(self) -> PointStatistic {
        match self {
            LossKind::Mae => PointStatistic::Median,
            LossKind::Nll => PointStatistic::Mean,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub loss: LossKind,
    pub n_particles_train: usize,
    pub n_particles_eval: usize,
    pub lr0: f64,
    /// 1-based epochs after which the learning rate is multiplied by
    /// `lr_factor`.
    pub lr_milestones: Vec<usize>,
    pub lr_factor: f64,
    pub clip_norm: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    /// Decay constant τ of the ground-truth feeding probability; 0 disables
    /// scheduled sampling.
    pub scheduled_sampling: f64,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Also learn `ρ` and `σ`. Off by default: they stay at their initial
    /// values.
    pub train_noise_scales: bool,
    pub flow: FlowConfig,
    /// Point summary; defaults by loss kind.
    pub point: Option<PointStatistic>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: LossKind::Mae,
            n_particles_train: 1,
            n_particles_eval: 10,
            lr0: 0.01,
            lr_milestones: vec![20, 30, 40, 50],
            lr_factor: 0.1,
            clip_norm: 5.0,
            batch_size: 64,
            max_epochs: 100,
            patience: 10,
            scheduled_sampling: 2000.0,
            seed: 0,
            optimizer: OptimizerKind::Adam,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            train_noise_scales: false,
            flow: FlowConfig::default(),
            point: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_particles_train", self.n_particles_train),
            ("n_particles_eval", self.n_particles_eval),
            ("batch_size", self.batch_size),
            ("max_epochs", self.max_epochs),
            ("patience", self.patience),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::invalid(name, "must be positive"));
            }
        }
        if !(self.lr_factor > 0.0 && self.lr_factor <= 1.0) {
            return Err(Error::invalid("lr_factor", "must lie in (0, 1]"));
        }
        if !(self.lr0 >= 0.0 && self.lr0.is_finite()) {
            return Err(Error::invalid("lr0", "must be finite and nonnegative"));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::invalid("clip_norm", "must be positive"));
        }
        if !(self.scheduled_sampling >= 0.0 && self.scheduled_sampling.is_finite()) {
            return Err(Error::invalid("scheduled_sampling", "must be finite and nonnegative"));
        }
        self.flow.validate()
    }

    pub fn point_statistic(&self) -> PointStatistic {
        self.point.unwrap_or(self.loss.default_point())
    }

    /// Learning rate for the 1-based `epoch`.
    pub fn learning_rate(&self, epoch: usize) -> f64 {
        let decays = self.lr_milestones.iter().filter(|&&m| epoch > m).count();
        self.lr0 * self.lr_factor.powi(decays as i32)
    }

    /// Probability of feeding the ground truth at training iteration `iter`.
    pub fn truth_probability(&self, iter: usize) -> f64 {
        let tau = self.scheduled_sampling;
        if tau == 0.0 {
            return 0.0;
        }
        tau / (tau + (iter as f64 / tau).exp())
    }

    pub fn predict_config(&self) -> PredictConfig {
        PredictConfig {
            n_particles: self.n_particles_eval,
            flow: self.flow,
            point: self.point_statistic(),
            noiseless: false,
        }
    }
}

/// `(1/NQ) Σ |y − ŷ|` with `ŷ` the distribution's point summary (the median
/// when none is set).
pub fn mae_loss(dist: &ForecastDistribution, target: &DMatrix<f64>) -> Result<f64> {
    let point = dist.point.clone().unwrap_or_else(|| dist.median());
    if point.shape() != target.shape() {
        return Err(Error::shape(
            "mae target",
            format!("{}x{}", point.nrows(), point.ncols()),
            format!("{}x{}", target.nrows(), target.ncols()),
        ));
    }
    if target.is_empty() {
        return Ok(0.0);
    }
    Ok((point - target).abs().sum() / target.len() as f64)
}

/// `−Σ_t log (1/N_p) Σ_j Π_i N(y_{t,i}; mean_i(x_t^j), std_i(x_t^j)²)`,
/// evaluated in the log domain from the decoder states.
pub fn nll_loss(dist: &ForecastDistribution, target: &DMatrix<f64>, model: &ModelTheta) -> Result<f64> {
    if dist.state_particles.len() != target.nrows() || target.ncols() != model.n_series() {
        return Err(Error::shape("nll target", dist.state_particles.len(), target.nrows()));
    }
    let mut total = 0.0;
    for (t, states) in dist.state_particles.iter().enumerate() {
        let mean = states * model.w_phi.transpose();
        let pre = states * model.c_gamma.transpose();
        let mut ll = Vec::with_capacity(states.nrows());
        for j in 0..states.nrows() {
            let mut s = 0.0;
            for i in 0..target.ncols() {
                let sd = emission_std(pre[(j, i)]);
                let z = (target[(t, i)] - mean[(j, i)]) / sd;
                s += -HALF_LOG_2PI - sd.ln() - 0.5 * z * z;
            }
            if !s.is_finite() {
                return Err(Error::NonFiniteLikelihood {
                    horizon: t + 1,
                    particle: j,
                });
            }
            ll.push(s);
        }
        let m = ll.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lme = m + (ll.iter().map(|v| (v - m).exp()).sum::<f64>() / ll.len() as f64).ln();
        total -= lme;
    }
    Ok(total)
}

fn target_row(tape: &mut Tape, target: &DMatrix<f64>, t: usize, rows: usize) -> Var {
    tape.constant(DMatrix::from_fn(rows, target.ncols(), |_, i| target[(t, i)]))
}

/// Tape form of [`mae_loss`] over a forward pass.
pub fn mae_loss_tape(tape: &mut Tape, pass: &ForwardPass, target: &DMatrix<f64>, point: PointStatistic) -> Var {
    let mut total: Option<Var> = None;
    for (t, &s) in pass.samples.iter().enumerate() {
        let summary = match point {
            PointStatistic::Mean => tape.mean_rows(s),
            PointStatistic::Median => tape.median_rows(s),
        };
        let y = target_row(tape, target, t, 1);
        let diff = tape.sub(summary, y);
        let abs = tape.abs(diff);
        let cell = tape.sum_all(abs);
        total = Some(match total {
            Some(acc) => tape.add(acc, cell),
            None => cell,
        });
    }
    let total = total.unwrap_or_else(|| tape.constant(DMatrix::zeros(1, 1)));
    tape.scale(total, 1.0 / target.len().max(1) as f64)
}

/// Tape form of [`nll_loss`].
pub fn nll_loss_tape(tape: &mut Tape, pass: &ForwardPass, target: &DMatrix<f64>) -> Result<Var> {
    let mut total: Option<Var> = None;
    for t in 0..pass.means.len() {
        let (mean, std) = (pass.means[t], pass.stds[t]);
        let np = tape.value(mean).nrows();
        let y = target_row(tape, target, t, np);
        let diff = tape.sub(y, mean);
        let inv = tape.recip(std);
        let z = tape.mul(diff, inv);
        let sq = tape.square(z);
        let quad = tape.scale(sq, -0.5);
        let log_std = tape.log(std);
        let cell = tape.sub(quad, log_std);
        let cell = tape.add_scalar(cell, -HALF_LOG_2PI);
        let per_particle = tape.sum_cols(cell);
        if let Some(j) = tape.value(per_particle).iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteLikelihood {
                horizon: t + 1,
                particle: j,
            });
        }
        let lme = tape.log_mean_exp_rows(per_particle);
        total = Some(match total {
            Some(acc) => tape.sub(acc, lme),
            None => tape.scale(lme, -1.0),
        });
    }
    Ok(total.unwrap_or_else(|| tape.constant(DMatrix::zeros(1, 1))))
}

/// Everything needed to evaluate the loss of one window.
#[derive(Debug, Clone, Copy)]
pub struct LossSettings<'a> {
    pub kind: LossKind,
    pub point: PointStatistic,
    pub flow: &'a FlowConfig,
    /// Multiplies the loss (and so every gradient).
    pub scale: f64,
}

/// One window with its fixed noise draws and decoder inputs.
#[derive(Debug, Clone)]
pub struct WindowSample<'a> {
    pub window: &'a Window,
    pub noise: WindowNoise,
    pub decoder_inputs: Vec<DecoderInput>,
}

impl<'a> WindowSample<'a> {
    pub fn new(window: &'a Window, model: &ModelTheta, n_particles: usize, seed: u64) -> Self {
        Self {
            window,
            noise: WindowNoise::sample(
                n_particles,
                model.state_dim(),
                model.n_series(),
                window.p(),
                window.q(),
                seed,
            ),
            decoder_inputs: Vec::new(),
        }
    }
}

fn window_tape(
    model: &ModelTheta,
    graph: Option<&Graph>,
    sample: &WindowSample<'_>,
    settings: &LossSettings<'_>,
    differentiable: bool,
    frozen: Option<&[FlowTrace]>,
) -> Result<(Tape, ParamVars, Var, Vec<FlowTrace>)> {
    let mut tape = Tape::new();
    let vars = ParamVars::register(&mut tape, model, graph, differentiable)?;
    let options = ForwardOptions {
        flow: settings.flow,
        noiseless: false,
        decoder_inputs: (!sample.decoder_inputs.is_empty()).then_some(sample.decoder_inputs.as_slice()),
        frozen_flow: frozen,
    };
    let w = sample.window;
    let pass = forward_tape(&mut tape, model, &vars, &w.history, &w.covariates, &sample.noise, options)?;
    let loss = match settings.kind {
        LossKind::Mae => mae_loss_tape(&mut tape, &pass, &w.target, settings.point),
        LossKind::Nll => nll_loss_tape(&mut tape, &pass, &w.target)?,
    };
    let loss = tape.scale(loss, settings.scale);
    Ok((tape, vars, loss, pass.traces))
}

/// Loss of one window. With `frozen`, the flow reuses those coefficients
/// instead of recomputing them, which makes this the exact function whose
/// gradient [`window_gradient`] returns.
pub fn window_loss(
    model: &ModelTheta,
    graph: Option<&Graph>,
    sample: &WindowSample<'_>,
    settings: &LossSettings<'_>,
    frozen: Option<&[FlowTrace]>,
) -> Result<f64> {
    let (tape, _, loss, _) = window_tape(model, graph, sample, settings, false, frozen)?;
    Ok(tape.scalar(loss))
}

/// Loss, flat gradient (aligned with [`ModelTheta::to_flat`]) and the flow
/// coefficients used.
pub fn window_gradient(
    model: &ModelTheta,
    graph: Option<&Graph>,
    sample: &WindowSample<'_>,
    settings: &LossSettings<'_>,
) -> Result<(f64, Vec<f64>, Vec<FlowTrace>)> {
    let (tape, vars, loss, traces) = window_tape(model, graph, sample, settings, true, None)?;
    let value = tape.scalar(loss);
    if !value.is_finite() {
        return Err(Error::NonFinite {
            context: "window loss".into(),
        });
    }
    let grads = tape.backward(loss);
    let mut flat = Vec::with_capacity(model.parameter_count());
    for (v, t) in vars.ordered().into_iter().zip(model.tensors()) {
        let g = grads.wrt(v);
        if let Some(k) = g.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFiniteGradient {
                name: format!("{}[{k}]", t.name),
            });
        }
        flat.extend_from_slice(g.as_slice());
    }
    Ok((value, flat, traces))
}

/// Batch-mean loss and gradient. Windows are processed in parallel and
/// reduced in input order, so the result does not depend on the thread
/// count.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBlock {
    pub loss: f64,
    pub grad: Vec<f64>,
}

pub fn gradients(
    model: &ModelTheta,
    graph: Option<&Graph>,
    batch: &[WindowSample<'_>],
    settings: &LossSettings<'_>,
) -> Result<GradientBlock> {
    if batch.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    let parts: Vec<(f64, Vec<f64>)> = batch
        .par_iter()
        .map(|s| window_gradient(model, graph, s, settings).map(|(l, g, _)| (l, g)))
        .collect::<Result<_>>()?;
    let inv = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; model.parameter_count()];
    for (l, g) in &parts {
        loss += l;
        for (a, b) in grad.iter_mut().zip(g) {
            *a += b;
        }
    }
    grad.iter_mut().for_each(|g| *g *= inv);
    Ok(GradientBlock { loss: loss * inv, grad })
}

/// Rescales `grad` in place to global norm at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm(grad: &mut [f64], max_norm: f64) -> f64 {
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grad.iter_mut().for_each(|g| *g *= s);
    }
    norm
}

#[derive(Debug, Clone, PartialEq)]
enum Optimizer {
    Sgd,
    Adam {
        m: Vec<f64>,
        v: Vec<f64>,
        t: i32,
        beta1: f64,
        beta2: f64,
        eps: f64,
    },
}

impl Optimizer {
    fn new(config: &TrainConfig, n: usize) -> Self {
        match config.optimizer {
            OptimizerKind::Sgd => Optimizer::Sgd,
            OptimizerKind::Adam => Optimizer::Adam {
                m: vec![0.0; n],
                v: vec![0.0; n],
                t: 0,
                beta1: config.beta1,
                beta2: config.beta2,
                eps: config.adam_eps,
            },
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        match self {
            Optimizer::Sgd => {
                for (p, g) in params.iter_mut().zip(grad) {
                    *p -= lr * g;
                }
            }
            Optimizer::Adam {
                m,
                v,
                t,
                beta1,
                beta2,
                eps,
            } => {
                *t += 1;
                let c1 = 1.0 - beta1.powi(*t);
                let c2 = 1.0 - beta2.powi(*t);
                for k in 0..params.len() {
                    m[k] = *beta1 * m[k] + (1.0 - *beta1) * grad[k];
                    v[k] = *beta2 * v[k] + (1.0 - *beta2) * grad[k] * grad[k];
                    let step = (m[k] / c1) / ((v[k] / c2).sqrt() + *eps);
                    // lr = 0 must leave parameters bitwise unchanged
                    if lr != 0.0 {
                        params[k] -= lr * step;
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
    pub seconds: f64,
    /// `best` when this epoch produced the retained checkpoint.
    pub status: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxEpochs,
    EarlyStop { epoch: usize },
    Diverged { epoch: usize, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    /// Validation loss of the untrained model.
    pub initial_val_loss: f64,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stop: StopReason,
}

impl TrainLog {
    /// Per-epoch CSV, plus a final `early_stop` or `diverged` marker row
    /// when training ended before `max_epochs`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["epoch", "train_loss", "val_loss", "lr", "seconds", "status"])?;
        for e in &self.epochs {
            w.write_record([
                e.epoch.to_string(),
                format!("{}", e.train_loss),
                format!("{}", e.val_loss),
                format!("{}", e.lr),
                format!("{:.3}", e.seconds),
                e.status.clone(),
            ])?;
        }
        let marker = match &self.stop {
            StopReason::MaxEpochs => None,
            StopReason::EarlyStop { epoch } => Some((*epoch, "early_stop")),
            StopReason::Diverged { epoch, .. } => Some((*epoch, "diverged")),
        };
        if let Some((epoch, tag)) = marker {
            w.write_record([epoch.to_string(), String::new(), String::new(), String::new(), String::new(), tag.into()])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    /// Best-validation parameters (the initial ones if no epoch improved).
    pub model: ModelTheta,
    pub log: TrainLog,
}

/// Mean validation loss with `n_particles_eval` particles and fixed
/// per-window seeds.
pub fn validation_loss(
    model: &ModelTheta,
    graph: Option<&Graph>,
    windows: &[Window],
    config: &TrainConfig,
) -> Result<f64> {
    if windows.is_empty() {
        return Err(Error::Data("empty validation set".into()));
    }
    let pc = config.predict_config();
    let seed = rng::mix(config.seed, 0x7a1);
    let losses: Vec<f64> = windows
        .par_iter()
        .enumerate()
        .map(|(k, w)| {
            let (d, _) = predict(model, graph, &w.history, &w.covariates, w.q(), &pc, rng::mix(seed, k as u64))?;
            match config.loss {
                LossKind::Mae => mae_loss(&d, &w.target),
                LossKind::Nll => nll_loss(&d, &w.target, model),
            }
        })
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

fn noise_scale_mask(model: &ModelTheta) -> Vec<bool> {
    // rho and sigma are the first two scalars of the flat layout
    let mut mask = vec![true; model.parameter_count()];
    mask[0] = false;
    mask[1] = false;
    mask
}

/// Minibatch training with clipping, milestone learning-rate decay, early
/// stopping on the validation loss and scheduled sampling.
pub fn fit(
    model_init: &ModelTheta,
    graph: Option<&Graph>,
    train: &[Window],
    val: &[Window],
    config: &TrainConfig,
) -> Result<FitOutcome> {
    config.validate()?;
    model_init.validate()?;
    if train.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    let mut model = model_init.clone();
    let mut params = model.to_flat();
    let mut optimizer = Optimizer::new(config, params.len());
    let mask = (!config.train_noise_scales).then(|| noise_scale_mask(&model));
    let settings = LossSettings {
        kind: config.loss,
        point: config.point_statistic(),
        flow: &config.flow,
        scale: 1.0,
    };

    let initial_val = validation_loss(&model, graph, val, config)?;
    let mut best = (model.clone(), initial_val, 0usize);
    let mut epochs = Vec::new();
    let mut since_best = 0;
    let mut iter = 0usize;
    let mut stop = StopReason::MaxEpochs;
    let mut order: Vec<usize> = (0..train.len()).collect();

    'epochs: for epoch in 1..=config.max_epochs {
        let started = Instant::now();
        let lr = config.learning_rate(epoch);
        let mut r = rng::stream(config.seed, 0x100_0000 + epoch as u64);
        order.shuffle(&mut r);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let p_truth = config.truth_probability(iter);
            let batch: Vec<WindowSample<'_>> = chunk
                .iter()
                .map(|&k| {
                    let w = &train[k];
                    let mut s = WindowSample::new(w, &model, config.n_particles_train, r.random());
                    s.decoder_inputs = (1..w.q())
                        .map(|t| {
                            if r.random::<f64>() < p_truth {
                                DecoderInput::Truth(w.target.row(t - 1).transpose())
                            } else {
                                DecoderInput::Own
                            }
                        })
                        .collect();
                    s
                })
                .collect();
            let block = match gradients(&model, graph, &batch, &settings) {
                Ok(b) if b.loss.is_finite() => b,
                Ok(_) => {
                    stop = StopReason::Diverged {
                        epoch,
                        reason: "non-finite training loss".into(),
                    };
                    break 'epochs;
                }
                Err(e) if e.class() == ErrorClass::Numeric => {
                    stop = StopReason::Diverged {
                        epoch,
                        reason: e.to_string(),
                    };
                    break 'epochs;
                }
                Err(e) => return Err(e),
            };
            let mut grad = block.grad;
            if let Some(mask) = &mask {
                for (g, keep) in grad.iter_mut().zip(mask) {
                    if !keep {
                        *g = 0.0;
                    }
                }
            }
            clip_global_norm(&mut grad, config.clip_norm);
            optimizer.step(&mut params, &grad, lr);
            params[0] = params[0].max(0.0);
            params[1] = params[1].max(0.0);
            model.set_flat(&params)?;
            loss_sum += block.loss;
            batches += 1;
            iter += 1;
        }
        let val_loss = match validation_loss(&model, graph, val, config) {
            Ok(v) if v.is_finite() => v,
            Ok(_) | Err(_) => {
                stop = StopReason::Diverged {
                    epoch,
                    reason: "non-finite validation loss".into(),
                };
                break;
            }
        };
        let improved = val_loss < best.1;
        if improved {
            best = (model.clone(), val_loss, epoch);
            since_best = 0;
        } else {
            since_best += 1;
        }
        epochs.push(EpochLog {
            epoch,
            train_loss: loss_sum / batches as f64,
            val_loss,
            lr,
            seconds: started.elapsed().as_secs_f64(),
            status: if improved { "best".into() } else { String::new() },
        });
        if since_best >= config.patience {
            stop = StopReason::EarlyStop { epoch };
            break;
        }
    }
    Ok(FitOutcome {
        model: best.0,
        log: TrainLog {
            epochs,
            initial_val_loss: initial_val,
            best_epoch: best.2,
            best_val_loss: best.1,
            stop,
        },
    })
}
