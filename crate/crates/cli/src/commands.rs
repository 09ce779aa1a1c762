use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use flowcast::data::{save_graph, save_series, synth_generate, Standardizer};
use flowcast::forecast::{
    predict_windows, read_samples, read_summary_points, read_truth, write_samples, write_summary, write_truth,
    PointStatistic, PredictConfig,
};
use flowcast::metrics::{evaluate as score, write_report};
use flowcast::ssm::{checkpoint, ModelTheta};
use flowcast::train::{fit, StopReason};
use nalgebra::DMatrix;
use serde_json::{json, Value};

use crate::config::{self, RunConfig};
use crate::pipeline::{prepare, Split};
use crate::CliError;

const DEFAULT_HORIZONS: [usize; 4] = [3, 6, 9, 12];

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    let f = File::create(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    Ok(BufWriter::new(f))
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))
}

fn open(path: &Path) -> Result<File, CliError> {
    File::open(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<(), CliError> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn train(config_path: Option<&Path>, overrides: &[String], seed: Option<u64>, out: &Path) -> Result<(), CliError> {
    let mut overrides = overrides.to_vec();
    if let Some(s) = seed {
        overrides.push(format!("train.seed={s}"));
    }
    let mut cfg: RunConfig = config::load(config_path, &overrides)?;
    config::resolve_paths(&mut cfg, config_path);
    cfg.train.validate()?;
    let data = prepare(&cfg.data, None)?;
    let hyper = cfg.model.hyper(data.n_series(), data.d_z);
    let init_seed = cfg.model.init_seed.unwrap_or(cfg.train.seed);
    let model0 = ModelTheta::init(hyper, cfg.model.rho, cfg.model.sigma, init_seed)?;
    let outcome = fit(&model0, data.graph.as_ref(), &data.train, &data.val, &cfg.train)?;

    ensure_dir(out)?;
    let resolved = serde_json::to_value(&cfg)?;
    let meta = json!({
        "standardizer": data.standardizer,
        "config": resolved,
        "best_epoch": outcome.log.best_epoch,
        "best_val_loss": outcome.log.best_val_loss,
    });
    checkpoint::save(&out.join("checkpoint.ckpt"), &outcome.model, &meta)?;
    checkpoint::save(&out.join("initial.ckpt"), &model0, &json!({ "standardizer": data.standardizer, "config": resolved }))?;
    let mut log = create(&out.join("train_log.csv"))?;
    outcome.log.write_csv(&mut log)?;
    log.flush()?;
    write_json(&out.join("resolved_config.json"), &cfg)?;

    let epochs = outcome.log.epochs.len();
    println!(
        "trained {epochs} epochs; best epoch {} with validation loss {} (initial {})",
        outcome.log.best_epoch, outcome.log.best_val_loss, outcome.log.initial_val_loss
    );
    match outcome.log.stop {
        StopReason::Diverged { epoch, reason } => Err(CliError::Numeric(format!(
            "training diverged at epoch {epoch}: {reason}; kept the best checkpoint"
        ))),
        StopReason::EarlyStop { epoch } => {
            println!("early stop after epoch {epoch}");
            Ok(())
        }
        StopReason::MaxEpochs => Ok(()),
    }
}

pub struct ForecastArgs {
    pub checkpoint: PathBuf,
    pub config: Option<PathBuf>,
    pub overrides: Vec<String>,
    pub data: Option<PathBuf>,
    pub split: Split,
    pub particles: usize,
    pub point: Option<PointStatistic>,
    pub seed: u64,
    pub out: PathBuf,
}

pub fn forecast(args: &ForecastArgs) -> Result<(), CliError> {
    let (model, meta) = checkpoint::load(&args.checkpoint)?;
    let mut value = match &args.config {
        Some(p) => config::read_json(p)?,
        None => meta
            .get("config")
            .cloned()
            .ok_or_else(|| CliError::Usage("checkpoint has no stored config; pass --config".into()))?,
    };
    for o in &args.overrides {
        config::apply_override(&mut value, o)?;
    }
    let mut cfg: RunConfig = config::from_value(value)?;
    config::resolve_paths(&mut cfg, args.config.as_deref());
    if let Some(d) = &args.data {
        cfg.data.path = d.clone();
    }
    let standardizer: Option<Standardizer> = meta
        .get("standardizer")
        .map(|v| serde_json::from_value(v.clone()))
        .transpose()
        .map_err(|e| CliError::Usage(format!("checkpoint standardizer: {e}")))?;
    let data = prepare(&cfg.data, standardizer.as_ref())?;
    if data.n_series() != model.n_series() || data.d_z != model.hyper.d_z {
        return Err(CliError::Usage(format!(
            "checkpoint/model mismatch: checkpoint expects {} series and {} covariates, data has {} and {}",
            model.n_series(),
            model.hyper.d_z,
            data.n_series(),
            data.d_z
        )));
    }
    if args.particles == 0 {
        return Err(CliError::Usage("--particles must be at least 1".into()));
    }
    let pc = PredictConfig {
        n_particles: args.particles,
        flow: cfg.train.flow,
        point: args.point.unwrap_or(cfg.train.point_statistic()),
        noiseless: false,
    };
    let windows = data.split(args.split);
    let mut dists = predict_windows(&model, data.graph.as_ref(), windows, &pc, args.seed)?;
    let s = &data.standardizer;
    for d in &mut dists {
        for m in &mut d.samples {
            *m = s.destandardize(m);
        }
        d.point = d.point.as_ref().map(|p| s.destandardize(p));
        d.state_particles.clear();
    }
    let targets: Vec<DMatrix<f64>> = windows.iter().map(|w| s.destandardize(&w.target)).collect();

    ensure_dir(&args.out)?;
    let mut w = create(&args.out.join("samples.csv"))?;
    write_samples(&dists, &mut w)?;
    w.flush()?;
    let mut w = create(&args.out.join("summary.csv"))?;
    write_summary(&dists, &mut w)?;
    w.flush()?;
    let mut w = create(&args.out.join("truth.csv"))?;
    write_truth(&targets, &mut w)?;
    w.flush()?;
    println!("{} windows, {} horizons, {} particles", dists.len(), cfg.data.q, args.particles);
    Ok(())
}

pub fn evaluate(
    samples: &Path,
    truth: &Path,
    summary: Option<&Path>,
    horizons: Option<Vec<usize>>,
    mape_mask: f64,
    out: Option<&Path>,
) -> Result<(), CliError> {
    let forecasts = read_samples(open(samples)?)?;
    let targets = read_truth(open(truth)?)?;
    if forecasts.len() != targets.len() {
        return Err(CliError::Data(format!(
            "{} forecast windows but {} truth windows",
            forecasts.len(),
            targets.len()
        )));
    }
    let q = targets.first().map_or(0, |t| t.nrows());
    if let Some(f) = forecasts.iter().find(|f| f.len() != q) {
        return Err(CliError::Data(format!("horizon mismatch: forecasts have {}, truth has {q}", f.len())));
    }
    let points = match summary {
        Some(p) => read_summary_points(open(p)?)?,
        None => forecasts
            .iter()
            .map(|f| DMatrix::from_fn(q, f[0].ncols(), |t, i| f[t].column(i).mean()))
            .collect(),
    };
    if points.len() != targets.len() || points.iter().any(|p| p.nrows() != q) {
        return Err(CliError::Data("horizon mismatch between summary and truth".into()));
    }
    let horizons = match horizons {
        Some(h) => {
            if let Some(bad) = h.iter().find(|&&h| h == 0 || h > q) {
                return Err(CliError::Usage(format!("horizon {bad} outside 1..={q}")));
            }
            h
        }
        None => {
            let h: Vec<usize> = DEFAULT_HORIZONS.into_iter().filter(|&h| h <= q).collect();
            if h.is_empty() {
                (1..=q).collect()
            } else {
                h
            }
        }
    };
    let rows = score(&forecasts, &points, &targets, &horizons, mape_mask)?;
    match out {
        Some(p) => {
            let mut w = create(p)?;
            write_report(&rows, &mut w)?;
            w.flush()?;
        }
        None => write_report(&rows, io::stdout().lock())?,
    }
    Ok(())
}

pub fn synth(config_path: Option<&Path>, overrides: &[String], seed: Option<u64>, out: &Path) -> Result<(), CliError> {
    let mut overrides = overrides.to_vec();
    if let Some(s) = seed {
        overrides.push(format!("seed={s}"));
    }
    let cfg = config::synth_config(config_path, &overrides)?;
    let data = synth_generate(&cfg)?;
    ensure_dir(out)?;
    save_series(&out.join("series.csv"), &data.series)?;
    if let Some(g) = &data.graph {
        save_graph(&out.join("graph.csv"), g)?;
    }
    write_json(&out.join("oracle.json"), &data.ssm)?;
    write_json(&out.join("synth_config.json"), &cfg)?;
    let kind: Value = serde_json::to_value(cfg.kind)?;
    println!(
        "{} rows x {} series ({}) written to {}",
        data.series.len(),
        data.series.n_series(),
        kind.as_str().unwrap_or_default(),
        out.display()
    );
    Ok(())
}
