//! Point and probabilistic forecast scores.
//!
//! A forecast set is indexed window → horizon → `N_p × N` sample matrix;
//! targets and point forecasts are window → `Q × N`. Horizons are 0-based
//! in this API. Scores that can have a zero denominator return `None`.

use std::io::Write;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default `|y|` threshold below which MAPE ignores a cell.
pub const MAPE_MASK: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointMetrics {
    pub mae: f64,
    /// Percent. `None` when every cell is masked.
    pub mape: Option<f64>,
    pub rmse: f64,
}

fn check_pairs(pred: &[DMatrix<f64>], target: &[DMatrix<f64>], horizon: usize) -> Result<()> {
    if pred.len() != target.len() {
        return Err(Error::shape("forecast windows", target.len(), pred.len()));
    }
    if pred.is_empty() {
        return Err(Error::Data("no windows to score".into()));
    }
    for (p, t) in pred.iter().zip(target) {
        if p.shape() != t.shape() {
            return Err(Error::shape(
                "forecast window",
                format!("{}x{}", t.nrows(), t.ncols()),
                format!("{}x{}", p.nrows(), p.ncols()),
            ));
        }
        if horizon >= t.nrows() {
            return Err(Error::invalid("horizon", format!("{horizon} is beyond Q = {}", t.nrows())));
        }
    }
    Ok(())
}

/// MAE, MAPE and RMSE at `horizon` over all windows and series.
pub fn point_metrics(
    pred: &[DMatrix<f64>],
    target: &[DMatrix<f64>],
    horizon: usize,
    mape_mask: f64,
) -> Result<PointMetrics> {
    check_pairs(pred, target, horizon)?;
    let (mut abs, mut sq, mut ape, mut cells, mut kept) = (0.0, 0.0, 0.0, 0usize, 0usize);
    for (p, t) in pred.iter().zip(target) {
        for i in 0..t.ncols() {
            let y = t[(horizon, i)];
            let e = y - p[(horizon, i)];
            abs += e.abs();
            sq += e * e;
            cells += 1;
            if y.abs() > mape_mask {
                ape += e.abs() / y.abs();
                kept += 1;
            }
        }
    }
    let n = cells as f64;
    Ok(PointMetrics {
        mae: abs / n,
        mape: (kept > 0).then(|| 100.0 * ape / kept as f64),
        rmse: (sq / n).sqrt(),
    })
}

/// `(1/n)Σ|x_i − y| − (1/2n²)ΣΣ|x_i − x_j|`, which is the exact CRPS of the
/// empirical CDF of `samples`.
pub fn crps_empirical(samples: &[f64], y: f64) -> f64 {
    let n = samples.len();
    assert!(n > 0, "crps needs at least one sample");
    let nf = n as f64;
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let abs: f64 = sorted.iter().map(|x| (x - y).abs()).sum::<f64>() / nf;
    // ΣΣ|x_i − x_j| = 2 Σ_i (2i − n + 1) x_(i) over the sorted sample
    let pair: f64 = sorted
        .iter()
        .enumerate()
        .map(|(i, x)| (2.0 * i as f64 - nf + 1.0) * x)
        .sum::<f64>()
        * 2.0;
    abs - pair / (2.0 * nf * nf)
}

/// Mean marginal CRPS over series and windows at `horizon`.
pub fn crps_avg(forecasts: &[Vec<DMatrix<f64>>], targets: &[DMatrix<f64>], horizon: usize) -> Result<f64> {
    check_samples(forecasts, targets, Some(horizon))?;
    let mut total = 0.0;
    let mut cells = 0usize;
    for (f, t) in forecasts.iter().zip(targets) {
        let s = &f[horizon];
        for i in 0..t.ncols() {
            let col: Vec<f64> = s.column(i).iter().copied().collect();
            total += crps_empirical(&col, t[(horizon, i)]);
            cells += 1;
        }
    }
    Ok(total / cells as f64)
}

/// CRPS of series-summed sample paths against the series-summed truth,
/// normalized by `Σ|Σ_i y|`. With `horizon = None` all horizons are pooled.
pub fn crps_sum(
    forecasts: &[Vec<DMatrix<f64>>],
    targets: &[DMatrix<f64>],
    horizon: Option<usize>,
) -> Result<Option<f64>> {
    check_samples(forecasts, targets, horizon)?;
    let mut num = 0.0;
    let mut den = 0.0;
    for (f, t) in forecasts.iter().zip(targets) {
        let hs: Vec<usize> = match horizon {
            Some(h) => vec![h],
            None => (0..t.nrows()).collect(),
        };
        for h in hs {
            let summed: Vec<f64> = f[h].row_iter().map(|r| r.sum()).collect();
            let truth = t.row(h).sum();
            num += crps_empirical(&summed, truth);
            den += truth.abs();
        }
    }
    Ok((den > 0.0).then(|| num / den))
}

fn check_samples(forecasts: &[Vec<DMatrix<f64>>], targets: &[DMatrix<f64>], horizon: Option<usize>) -> Result<()> {
    if forecasts.len() != targets.len() {
        return Err(Error::shape("forecast windows", targets.len(), forecasts.len()));
    }
    if forecasts.is_empty() {
        return Err(Error::Data("no windows to score".into()));
    }
    for (f, t) in forecasts.iter().zip(targets) {
        if f.len() != t.nrows() {
            return Err(Error::shape("forecast horizons", t.nrows(), f.len()));
        }
        if let Some(h) = horizon {
            if h >= t.nrows() {
                return Err(Error::invalid("horizon", format!("{h} is beyond Q = {}", t.nrows())));
            }
        }
        for s in f {
            if s.ncols() != t.ncols() || s.nrows() == 0 {
                return Err(Error::shape("forecast samples", t.ncols(), s.ncols()));
            }
        }
    }
    Ok(())
}

/// `2[α(y − ŷ)⁺ + (1 − α)(ŷ − y)⁺]`.
pub fn quantile_loss(y: f64, y_hat: f64, alpha: f64) -> f64 {
    2.0 * (alpha * (y - y_hat).max(0.0) + (1.0 - alpha) * (y_hat - y).max(0.0))
}

/// Summed quantile loss at `horizon` normalized by `Σ|y|`.
pub fn ql_avg(
    quantiles: &[DMatrix<f64>],
    targets: &[DMatrix<f64>],
    horizon: usize,
    alpha: f64,
) -> Result<Option<f64>> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::invalid("alpha", "must lie in (0, 1)"));
    }
    check_pairs(quantiles, targets, horizon)?;
    let mut num = 0.0;
    let mut den = 0.0;
    for (q, t) in quantiles.iter().zip(targets) {
        for i in 0..t.ncols() {
            let y = t[(horizon, i)];
            num += quantile_loss(y, q[(horizon, i)], alpha);
            den += y.abs();
        }
    }
    Ok((den > 0.0).then(|| num / den))
}

/// Type-7 sample quantile: linear interpolation between order statistics at
/// position `α(n − 1)`.
pub fn empirical_quantile(values: &[f64], alpha: f64) -> f64 {
    assert!(!values.is_empty(), "quantile of an empty sample");
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted_quantile(&sorted, alpha)
}

pub(crate) fn sorted_quantile(sorted: &[f64], alpha: f64) -> f64 {
    let pos = alpha * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Per-window `Q × N` α-quantiles of a forecast set.
pub fn quantiles_of(forecasts: &[Vec<DMatrix<f64>>], alpha: f64) -> Vec<DMatrix<f64>> {
    forecasts
        .iter()
        .map(|f| {
            let n = f.first().map_or(0, |s| s.ncols());
            DMatrix::from_fn(f.len(), n, |t, i| {
                let col: Vec<f64> = f[t].column(i).iter().copied().collect();
                empirical_quantile(&col, alpha)
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub metric: String,
    /// 1-based horizon.
    pub horizon: usize,
    pub value: Option<f64>,
}

/// MAE/MAPE/RMSE/CRPS_avg/CRPS_sum/P10QL/P50QL/P90QL at the 1-based
/// `horizons`.
pub fn evaluate(
    forecasts: &[Vec<DMatrix<f64>>],
    points: &[DMatrix<f64>],
    targets: &[DMatrix<f64>],
    horizons: &[usize],
    mape_mask: f64,
) -> Result<Vec<MetricRow>> {
    let q10 = quantiles_of(forecasts, 0.1);
    let q50 = quantiles_of(forecasts, 0.5);
    let q90 = quantiles_of(forecasts, 0.9);
    let mut rows = Vec::new();
    let mut push = |metric: &str, horizon: usize, value: Option<f64>| {
        rows.push(MetricRow {
            metric: metric.into(),
            horizon,
            value,
        })
    };
    for &h1 in horizons {
        if h1 == 0 {
            return Err(Error::invalid("horizon", "horizons are 1-based"));
        }
        let h = h1 - 1;
        let pm = point_metrics(points, targets, h, mape_mask)?;
        push("MAE", h1, Some(pm.mae));
        push("MAPE", h1, pm.mape);
        push("RMSE", h1, Some(pm.rmse));
        push("CRPS_avg", h1, Some(crps_avg(forecasts, targets, h)?));
        push("CRPS_sum", h1, crps_sum(forecasts, targets, Some(h))?);
        push("P10QL", h1, ql_avg(&q10, targets, h, 0.1)?);
        push("P50QL", h1, ql_avg(&q50, targets, h, 0.5)?);
        push("P90QL", h1, ql_avg(&q90, targets, h, 0.9)?);
    }
    Ok(rows)
}

/// Writes `metric,horizon,value`; undefined values are written as `undefined`.
pub fn write_report<W: Write>(rows: &[MetricRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["metric", "horizon", "value"])?;
    for r in rows {
        let value = r.value.map_or_else(|| "undefined".to_string(), |v| format!("{v}"));
        w.write_record([r.metric.as_str(), &r.horizon.to_string(), &value])?;
    }
    w.flush()?;
    Ok(())
}
