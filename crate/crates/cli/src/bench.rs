//! Filter comparison on random linear-Gaussian SSMs.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use flowcast::data::{synth_generate, SynthConfig, SynthKind};
use flowcast::filters::{run_bpf, run_flow_filter, run_kalman, FilterRun};
use flowcast::rng;
use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::config::BenchConfig;
use crate::CliError;

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub dim: usize,
    pub n_particles: usize,
    pub seed: u64,
    pub method: &'static str,
    pub rmse: f64,
    /// Mean ESS over time steps; `None` for the Kalman filter.
    pub ess_mean: Option<f64>,
}

pub fn validate(cfg: &BenchConfig) -> Result<(), CliError> {
    if cfg.dims.is_empty() || cfg.particles.is_empty() || cfg.n_seeds == 0 || cfg.steps == 0 {
        return Err(CliError::Usage("filter-bench needs dims, particles, n_seeds and steps".into()));
    }
    if cfg.dims.contains(&0) || cfg.particles.contains(&0) {
        return Err(CliError::Usage("dims and particle counts must be positive".into()));
    }
    cfg.flow.validate()?;
    Ok(())
}

fn rmse(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    ((a - b).norm_squared() / a.len() as f64).sqrt()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn cell(cfg: &BenchConfig, base_seed: u64, dim: usize, seed: u64) -> Result<Vec<BenchRow>, CliError> {
    let ssm_seed = rng::mix(rng::mix(base_seed, dim as u64), seed);
    let data = synth_generate(&SynthConfig {
        kind: SynthKind::LinearGaussian,
        n_series: dim,
        state_dim: dim,
        steps: cfg.steps,
        seed: ssm_seed,
        process_std: cfg.process_std,
        obs_std: cfg.obs_std,
        ..SynthConfig::default()
    })?;
    let ys = &data.series.values;
    let kf = run_kalman(&data.ssm, ys)?;
    let mut rows = Vec::new();
    for &np in &cfg.particles {
        let run_seed = rng::mix(ssm_seed, np as u64);
        let row = |method, run: &FilterRun, ess| BenchRow {
            dim,
            n_particles: np,
            seed,
            method,
            rmse: rmse(&run.means, &kf.means),
            ess_mean: ess,
        };
        rows.push(row("kalman", &kf, None));
        let flow = run_flow_filter(&data.ssm, ys, np, &cfg.flow, run_seed)?;
        // the flow ensemble is equally weighted
        rows.push(row("flow", &flow, Some(np as f64)));
        let bpf = run_bpf(&data.ssm, ys, np, cfg.ess_threshold, run_seed)?;
        rows.push(row("bpf", &bpf, Some(mean(&bpf.ess))));
    }
    Ok(rows)
}

pub fn bench_rows(cfg: &BenchConfig, base_seed: u64) -> Result<Vec<BenchRow>, CliError> {
    let tasks: Vec<(usize, u64)> = cfg.dims.iter().flat_map(|&d| (0..cfg.n_seeds).map(move |s| (d, s))).collect();
    let parts: Vec<Vec<BenchRow>> = tasks
        .par_iter()
        .map(|&(d, s)| cell(cfg, base_seed, d, s))
        .collect::<Result<_, _>>()?;
    let mut rows: Vec<BenchRow> = parts.into_iter().flatten().collect();
    // dims outermost, then particle counts, then seeds
    rows.sort_by_key(|r| {
        let pi = cfg.particles.iter().position(|&p| p == r.n_particles).unwrap_or(0);
        let di = cfg.dims.iter().position(|&d| d == r.dim).unwrap_or(0);
        (di, pi, r.seed)
    });
    Ok(rows)
}

pub fn run(cfg: &BenchConfig, base_seed: u64, out: &Path) -> Result<(), CliError> {
    let rows = bench_rows(cfg, base_seed)?;
    let file = File::create(out).map_err(|e| CliError::Data(format!("{}: {e}", out.display())))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    w.write_record(["dim", "n_particles", "seed", "method", "rmse_vs_kalman", "ess_mean"])
        .map_err(flowcast::Error::from)?;
    for r in &rows {
        w.write_record([
            r.dim.to_string(),
            r.n_particles.to_string(),
            r.seed.to_string(),
            r.method.to_string(),
            format!("{}", r.rmse),
            r.ess_mean.map_or_else(String::new, |e| format!("{e}")),
        ])
        .map_err(flowcast::Error::from)?;
    }
    w.flush()?;

    let mut stdout = std::io::stdout().lock();
    writeln!(stdout, "dim  particles  flow_rmse  bpf_rmse  bpf_ess  flow_wins")?;
    for &d in &cfg.dims {
        for &np in &cfg.particles {
            let pick = |m: &str| -> Vec<&BenchRow> {
                rows.iter().filter(|r| r.dim == d && r.n_particles == np && r.method == m).collect()
            };
            let (flow, bpf) = (pick("flow"), pick("bpf"));
            let wins = flow.iter().zip(&bpf).filter(|(f, b)| f.rmse < b.rmse).count();
            let avg = |v: &[&BenchRow], f: fn(&BenchRow) -> f64| v.iter().map(|r| f(r)).sum::<f64>() / v.len() as f64;
            writeln!(
                stdout,
                "{d:<4} {np:<10} {:<10.4} {:<9.4} {:<8.1} {wins}/{}",
                avg(&flow, |r| r.rmse),
                avg(&bpf, |r| r.rmse),
                avg(&bpf, |r| r.ess_mean.unwrap_or(f64::NAN)),
                flow.len()
            )?;
        }
    }
    Ok(())
}
