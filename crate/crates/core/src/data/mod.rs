//! Series ingestion, preprocessing and windowing.

mod synth;

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use chrono::{DateTime, NaiveDate, NaiveDateTime, Timelike};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ssm::Graph;

pub use synth::{synth_generate, SynthConfig, SynthKind, SynthOutput};

const TIMESTAMP_FORMAT: &str = "%Y-%m-%dT%H:%M:%S";

/// A `T × N` panel. Missing cells hold `NaN`.
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesSet {
    pub names: Vec<String>,
    pub timestamps: Option<Vec<NaiveDateTime>>,
    pub values: DMatrix<f64>,
}

impl SeriesSet {
    pub fn new(names: Vec<String>, timestamps: Option<Vec<NaiveDateTime>>, values: DMatrix<f64>) -> Result<Self> {
        if names.len() != values.ncols() {
            return Err(Error::shape("series names", values.ncols(), names.len()));
        }
        if let Some(ts) = &timestamps {
            if ts.len() != values.nrows() {
                return Err(Error::shape("timestamps", values.nrows(), ts.len()));
            }
        }
        Ok(Self {
            names,
            timestamps,
            values,
        })
    }

    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_series(&self) -> usize {
        self.values.ncols()
    }

    pub fn is_missing(&self, t: usize, i: usize) -> bool {
        self.values[(t, i)].is_nan()
    }

    pub fn missing_count(&self) -> usize {
        self.values.iter().filter(|v| v.is_nan()).count()
    }

    /// Rows `start..end`.
    pub fn slice(&self, start: usize, end: usize) -> SeriesSet {
        SeriesSet {
            names: self.names.clone(),
            timestamps: self.timestamps.as_ref().map(|ts| ts[start..end].to_vec()),
            values: self.values.rows(start, end - start).into_owned(),
        }
    }
}

fn parse_timestamp(s: &str) -> Option<NaiveDateTime> {
    let s = s.trim();
    if let Ok(dt) = DateTime::parse_from_rfc3339(s) {
        return Some(dt.naive_utc());
    }
    for fmt in [TIMESTAMP_FORMAT, "%Y-%m-%dT%H:%M", "%Y-%m-%d %H:%M:%S", "%Y-%m-%d %H:%M", "%Y-%m-%dT%H:%M:%S%.f"] {
        if let Ok(dt) = NaiveDateTime::parse_from_str(s, fmt) {
            return Some(dt);
        }
    }
    NaiveDate::parse_from_str(s, "%Y-%m-%d")
        .ok()
        .and_then(|d| d.and_hms_opt(0, 0, 0))
}

fn parse_cell(s: &str) -> std::result::Result<f64, String> {
    let s = s.trim();
    if s.is_empty() || s.eq_ignore_ascii_case("nan") {
        return Ok(f64::NAN);
    }
    let v: f64 = s.parse().map_err(|_| format!("`{s}` is not a number"))?;
    if v.is_infinite() {
        return Err(format!("`{s}` is not finite"));
    }
    Ok(v)
}

/// Reads a series CSV: header row required, optional ISO-8601 timestamp
/// first column, then one numeric column per series. Blank and `NaN` cells
/// are missing. Row numbers in errors are 1-based file lines.
pub fn read_series<R: Read>(reader: R) -> Result<SeriesSet> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    if header.is_empty() {
        return Err(Error::Data("series file has an empty header".into()));
    }
    let records: Vec<csv::StringRecord> = rdr.records().collect::<std::result::Result<_, _>>()?;
    let first_is_time = records
        .first()
        .is_some_and(|r| r.get(0).is_some_and(|c| c.trim().parse::<f64>().is_err() && parse_timestamp(c).is_some()));
    let offset = usize::from(first_is_time);
    let names: Vec<String> = header[offset..].to_vec();
    if names.is_empty() {
        return Err(Error::Data("series file has no value columns".into()));
    }
    let mut values = DMatrix::zeros(records.len(), names.len());
    let mut stamps = Vec::new();
    for (t, rec) in records.iter().enumerate() {
        let row = t + 2;
        if rec.len() != header.len() {
            return Err(Error::Parse {
                row,
                column: rec.len().min(header.len()) + 1,
                reason: format!("expected {} fields, found {}", header.len(), rec.len()),
            });
        }
        if first_is_time {
            let ts = parse_timestamp(&rec[0]).ok_or_else(|| Error::Parse {
                row,
                column: 1,
                reason: format!("`{}` is not an ISO-8601 timestamp", &rec[0]),
            })?;
            stamps.push(ts);
        }
        for i in 0..names.len() {
            let c = i + offset;
            values[(t, i)] = parse_cell(&rec[c]).map_err(|reason| Error::Parse {
                row,
                column: c + 1,
                reason,
            })?;
        }
    }
    SeriesSet::new(names, first_is_time.then_some(stamps), values)
}

pub fn load_series(path: &Path) -> Result<SeriesSet> {
    read_series(File::open(path)?)
}

/// Inverse of [`read_series`]; values use the shortest round-trip decimal
/// form and missing cells are left blank.
pub fn write_series<W: Write>(set: &SeriesSet, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<&str> = Vec::new();
    if set.timestamps.is_some() {
        header.push("timestamp");
    }
    header.extend(set.names.iter().map(String::as_str));
    w.write_record(&header)?;
    for t in 0..set.len() {
        let mut rec: Vec<String> = Vec::with_capacity(header.len());
        if let Some(ts) = &set.timestamps {
            rec.push(ts[t].format(TIMESTAMP_FORMAT).to_string());
        }
        for i in 0..set.n_series() {
            let v = set.values[(t, i)];
            rec.push(if v.is_nan() { String::new() } else { format!("{v}") });
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_series(path: &Path, set: &SeriesSet) -> Result<()> {
    write_series(set, File::create(path)?)
}

/// Replaces each missing cell with the last observed value of its series.
pub fn forward_fill(set: &SeriesSet) -> Result<SeriesSet> {
    let mut out = set.clone();
    for i in 0..set.n_series() {
        let mut last = None;
        for t in 0..set.len() {
            let v = set.values[(t, i)];
            if v.is_nan() {
                out.values[(t, i)] = last.ok_or_else(|| Error::LeadingMissing {
                    series: set.names[i].clone(),
                })?;
            } else {
                last = Some(v);
            }
        }
    }
    Ok(out)
}

/// Contiguous train/val/test segments with boundaries at
/// `floor(T · cumulative fraction)`. Every segment must hold at least
/// `min_len` rows.
pub fn chronological_split(
    set: &SeriesSet,
    fractions: [f64; 3],
    min_len: usize,
) -> Result<(SeriesSet, SeriesSet, SeriesSet)> {
    if fractions.iter().any(|f| !(*f > 0.0)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::invalid("split fractions", "must be positive and sum to 1"));
    }
    let t = set.len() as f64;
    // the small slack keeps e.g. 10 · (0.7 + 0.1) from flooring to 7
    let b1 = (t * fractions[0] + 1e-9).floor() as usize;
    let b2 = ((t * (fractions[0] + fractions[1]) + 1e-9).floor() as usize).max(b1);
    let bounds = [(0, b1), (b1, b2), (b2, set.len())];
    for (s, e) in bounds {
        if e - s < min_len {
            return Err(Error::SegmentTooShort {
                len: e - s,
                needed: min_len,
            });
        }
    }
    Ok((set.slice(0, b1), set.slice(b1, b2), set.slice(b2, set.len())))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NormalizationMode {
    #[default]
    Scalar,
    PerNode,
}

/// z-score statistics fitted on the training segment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mode: NormalizationMode,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

fn moments<'a>(values: impl Iterator<Item = &'a f64>) -> (f64, f64) {
    let v: Vec<f64> = values.copied().filter(|x| !x.is_nan()).collect();
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl Standardizer {
    /// Population moments over non-missing cells.
    pub fn fit(train: &DMatrix<f64>, mode: NormalizationMode) -> Result<Self> {
        let (mean, std) = match mode {
            NormalizationMode::Scalar => {
                let (m, s) = moments(train.iter());
                (vec![m], vec![s])
            }
            NormalizationMode::PerNode => (0..train.ncols()).map(|i| moments(train.column(i).iter())).unzip(),
        };
        if std.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::ZeroStd);
        }
        Ok(Self { mode, mean, std })
    }

    fn stats(&self, col: usize) -> (f64, f64) {
        match self.mode {
            NormalizationMode::Scalar => (self.mean[0], self.std[0]),
            NormalizationMode::PerNode => (self.mean[col], self.std[col]),
        }
    }

    pub fn standardize(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(x.nrows(), x.ncols(), |t, i| {
            let (m, s) = self.stats(i);
            (x[(t, i)] - m) / s
        })
    }

    pub fn destandardize(&self, z: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(z.nrows(), z.ncols(), |t, i| {
            let (m, s) = self.stats(i);
            z[(t, i)] * s + m
        })
    }

    /// Scale factor per series, for converting standardized-space errors.
    pub fn scale(&self, col: usize) -> f64 {
        self.stats(col).1
    }
}

/// `(sin, cos)(2π · slot / period)` per row. With timestamps the slot is
/// the second of the day and the period is one day; otherwise the slot is
/// the row index modulo `steps_per_day`.
pub fn time_of_day(set: &SeriesSet, steps_per_day: Option<usize>, offset: usize) -> Result<DMatrix<f64>> {
    let tau = std::f64::consts::TAU;
    let phase: Vec<f64> = match (&set.timestamps, steps_per_day) {
        (Some(ts), _) => ts
            .iter()
            .map(|t| t.num_seconds_from_midnight() as f64 / 86_400.0)
            .collect(),
        (None, Some(p)) if p > 0 => (0..set.len()).map(|t| ((t + offset) % p) as f64 / p as f64).collect(),
        _ => {
            return Err(Error::Data(
                "time-of-day covariates need timestamps or steps_per_day".into(),
            ))
        }
    };
    Ok(DMatrix::from_fn(set.len(), 2, |t, c| {
        if c == 0 {
            (tau * phase[t]).sin()
        } else {
            (tau * phase[t]).cos()
        }
    }))
}

/// One training or evaluation example.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    /// Row of the first history step within its segment.
    pub start: usize,
    /// `P × N`.
    pub history: DMatrix<f64>,
    /// `Q × N`.
    pub target: DMatrix<f64>,
    /// `(P + Q) × d_z`.
    pub covariates: DMatrix<f64>,
}

impl Window {
    pub fn p(&self) -> usize {
        self.history.nrows()
    }

    pub fn q(&self) -> usize {
        self.target.nrows()
    }
}

/// All `T − P − Q + 1` maximally overlapping windows of a segment.
/// `covariates`, when given, must have `T` rows.
pub fn make_windows(values: &DMatrix<f64>, covariates: Option<&DMatrix<f64>>, p: usize, q: usize) -> Result<Vec<Window>> {
    if p == 0 {
        return Err(Error::invalid("P", "must be at least 1"));
    }
    let t = values.nrows();
    if t < p + q {
        return Err(Error::SegmentTooShort { len: t, needed: p + q });
    }
    if let Some(z) = covariates {
        if z.nrows() != t {
            return Err(Error::shape("covariate rows", t, z.nrows()));
        }
    }
    let n = values.ncols();
    Ok((0..=t - p - q)
        .map(|s| Window {
            start: s,
            history: values.rows(s, p).into_owned(),
            target: values.rows(s + p, q).into_owned(),
            covariates: covariates.map_or_else(|| DMatrix::zeros(p + q, 0), |z| z.rows(s, p + q).into_owned()),
        })
        .inspect(|w| debug_assert_eq!(w.history.ncols(), n))
        .collect())
}

/// Reads an edge list with header `src,dst,weight`.
pub fn read_graph<R: Read>(reader: R, n_nodes: usize) -> Result<Graph> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header != ["src", "dst", "weight"] {
        return Err(Error::Data(format!(
            "graph header must be `src,dst,weight`, found `{}`",
            header.join(",")
        )));
    }
    let mut edges = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = k + 2;
        let field = |c: usize| -> Result<&str> {
            rec.get(c).ok_or_else(|| Error::Parse {
                row,
                column: c + 1,
                reason: "missing field".into(),
            })
        };
        let index = |c: usize| -> Result<usize> {
            let s = field(c)?;
            s.parse().map_err(|_| Error::Parse {
                row,
                column: c + 1,
                reason: format!("`{s}` is not a node index"),
            })
        };
        let (src, dst) = (index(0)?, index(1)?);
        let w = field(2)?;
        let weight: f64 = w.parse().map_err(|_| Error::Parse {
            row,
            column: 3,
            reason: format!("`{w}` is not a number"),
        })?;
        edges.push((src, dst, weight));
    }
    Graph::new(n_nodes, edges)
}

pub fn load_graph(path: &Path, n_nodes: usize) -> Result<Graph> {
    read_graph(File::open(path)?, n_nodes)
}

pub fn write_graph<W: Write>(graph: &Graph, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["src", "dst", "weight"])?;
    for (s, d, v) in graph.edges() {
        w.write_record([s.to_string(), d.to_string(), format!("{v}")])?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_graph(path: &Path, graph: &Graph) -> Result<()> {
    write_graph(graph, File::create(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn set(values: DMatrix<f64>) -> SeriesSet {
        let names = (0..values.ncols()).map(|i| format!("s{i}")).collect();
        SeriesSet::new(names, None, values).unwrap()
    }

    #[test]
    fn reads_well_formed_file() {
        let s = read_series("a,b\n1,2\n3,4\n5,6\n".as_bytes()).unwrap();
        assert_eq!(s.values.shape(), (3, 2));
        assert_eq!(s.names, ["a", "b"]);
        assert!(s.timestamps.is_none());
        assert_eq!(s.values[(2, 1)], 6.0);
    }

    #[test]
    fn blank_and_nan_cells_are_missing() {
        let s = read_series("a,b\n1,\n3,NaN\n5,6\n".as_bytes()).unwrap();
        assert!(s.is_missing(0, 1) && s.is_missing(1, 1));
        assert!(!s.is_missing(2, 1));
        assert_eq!(s.missing_count(), 2);
    }

    #[test]
    fn reads_timestamps() {
        let s = read_series("timestamp,x\n2024-01-01T00:05:00,1.5\n2024-01-01 00:10:00,2\n".as_bytes()).unwrap();
        let ts = s.timestamps.unwrap();
        assert_eq!(ts[1].format(TIMESTAMP_FORMAT).to_string(), "2024-01-01T00:10:00");
        assert_eq!(s.names, ["x"]);
    }

    #[test]
    fn parse_errors_carry_location() {
        match read_series("a,b\n1,2\n3,x\n".as_bytes()) {
            Err(Error::Parse { row, column, .. }) => assert_eq!((row, column), (3, 2)),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(read_series("a,b\n1,2\n3\n".as_bytes()), Err(Error::Parse { row: 3, .. })));
    }

    #[test]
    fn forward_fill_cases() {
        let s = set(DMatrix::from_column_slice(3, 1, &[1.0, f64::NAN, 2.0]));
        assert_eq!(forward_fill(&s).unwrap().values.as_slice(), &[1.0, 1.0, 2.0]);
        let s = set(DMatrix::from_column_slice(3, 1, &[5.0, f64::NAN, f64::NAN]));
        assert_eq!(forward_fill(&s).unwrap().values.as_slice(), &[5.0, 5.0, 5.0]);
        let clean = set(DMatrix::from_column_slice(3, 1, &[1.0, 2.0, 3.0]));
        assert_eq!(forward_fill(&clean).unwrap(), clean);
        let lead = set(DMatrix::from_column_slice(2, 2, &[1.0, 2.0, f64::NAN, 1.0]));
        assert!(matches!(forward_fill(&lead), Err(Error::LeadingMissing { series }) if series == "s1"));
    }

    #[test]
    fn split_cases() {
        let s = set(DMatrix::from_fn(100, 1, |t, _| t as f64));
        let (a, b, c) = chronological_split(&s, [0.7, 0.1, 0.2], 1).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (70, 10, 20));
        assert_eq!((a.values[(69, 0)], b.values[(0, 0)], c.values[(0, 0)]), (69.0, 70.0, 80.0));
        let s10 = s.slice(0, 10);
        let (a, b, c) = chronological_split(&s10, [0.7, 0.1, 0.2], 1).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (7, 1, 2));
        assert!(matches!(
            chronological_split(&s10, [0.7, 0.1, 0.2], 2),
            Err(Error::SegmentTooShort { len: 1, needed: 2 })
        ));
        assert!(chronological_split(&s10, [0.7, 0.2, 0.2], 1).is_err());
    }

    #[test]
    fn standardize_cases() {
        let x = DMatrix::from_fn(50, 3, |t, i| (t * (i + 1)) as f64 * 0.3 - 2.0);
        let st = Standardizer::fit(&x, NormalizationMode::Scalar).unwrap();
        let z = st.standardize(&x);
        let (m, s) = moments(z.iter());
        assert!(m.abs() < 1e-9 && (s - 1.0).abs() < 1e-9);
        assert!((st.destandardize(&z) - &x).amax() < 1e-9);
        let pn = Standardizer::fit(&x, NormalizationMode::PerNode).unwrap();
        let z = pn.standardize(&x);
        for i in 0..3 {
            let (m, s) = moments(z.column(i).iter());
            assert!(m.abs() < 1e-9 && (s - 1.0).abs() < 1e-9);
        }
        assert!(matches!(
            Standardizer::fit(&DMatrix::from_element(4, 2, 3.0), NormalizationMode::Scalar),
            Err(Error::ZeroStd)
        ));
    }

    #[test]
    fn window_counts() {
        let x = DMatrix::from_fn(30, 2, |t, i| (t + i) as f64);
        let w = make_windows(&x, None, 12, 12).unwrap();
        assert_eq!(w.len(), 7);
        assert_eq!(w[6].history[(0, 0)], 6.0);
        assert_eq!(w[6].target[(11, 1)], 30.0);
        assert_eq!(make_windows(&x.rows(0, 24).into_owned(), None, 12, 12).unwrap().len(), 1);
        assert!(matches!(
            make_windows(&x.rows(0, 23).into_owned(), None, 12, 12),
            Err(Error::SegmentTooShort { len: 23, needed: 24 })
        ));
        let z = DMatrix::from_fn(30, 2, |t, _| t as f64);
        let w = make_windows(&x, Some(&z), 3, 2).unwrap();
        assert_eq!(w[4].covariates.shape(), (5, 2));
        assert_eq!(w[4].covariates[(0, 0)], 4.0);
    }

    #[test]
    fn time_of_day_from_timestamps_and_period() {
        let s = read_series("timestamp,x\n2024-01-01T06:00:00,1\n2024-01-01T12:00:00,2\n".as_bytes()).unwrap();
        let z = time_of_day(&s, None, 0).unwrap();
        assert!((z[(0, 0)] - 1.0).abs() < 1e-12 && z[(0, 1)].abs() < 1e-12);
        assert!(z[(1, 0)].abs() < 1e-12 && (z[(1, 1)] + 1.0).abs() < 1e-12);
        let plain = set(DMatrix::zeros(5, 1));
        let z = time_of_day(&plain, Some(4), 0).unwrap();
        assert_eq!(z.row(0), z.row(4));
        assert!(time_of_day(&plain, None, 0).is_err());
    }

    #[test]
    fn graph_cases() {
        let g = read_graph("src,dst,weight\n".as_bytes(), 3).unwrap();
        assert_eq!(g.normalized_adj(), &DMatrix::identity(3, 3));
        let g = read_graph("src,dst,weight\n0,1,2.0\n".as_bytes(), 2).unwrap();
        assert_eq!(g.normalized_adj().row(0).iter().copied().collect::<Vec<_>>(), [0.0, 1.0]);
        for r in g.normalized_adj().row_iter() {
            assert!((r.sum() - 1.0).abs() < 1e-15);
        }
        assert!(read_graph("src,dst,weight\n0,5,1\n".as_bytes(), 2).is_err());
        assert!(read_graph("src,dst,weight\n0,1,-1\n".as_bytes(), 2).is_err());
        assert!(read_graph("a,b,c\n".as_bytes(), 2).is_err());
        let mut buf = Vec::new();
        write_graph(&Graph::new(3, vec![(0, 2, 0.5), (2, 1, 1.5)]).unwrap(), &mut buf).unwrap();
        let back = read_graph(buf.as_slice(), 3).unwrap();
        assert_eq!(back.edges(), &[(0, 2, 0.5), (2, 1, 1.5)]);
    }

    proptest! {
        #[test]
        fn series_round_trip_is_bitwise(v in prop::collection::vec(prop_oneof![Just(f64::NAN), -1e6f64..1e6, any::<f64>().prop_filter("finite", |x| x.is_finite())], 12), stamped in any::<bool>()) {
            let values = DMatrix::from_row_slice(4, 3, &v);
            let ts = stamped.then(|| {
                (0..4)
                    .map(|k| NaiveDate::from_ymd_opt(2024, 3, 1).unwrap().and_hms_opt(0, 5 * k, 0).unwrap())
                    .collect()
            });
            let s = SeriesSet::new(vec!["a".into(), "b".into(), "c".into()], ts, values).unwrap();
            let mut buf = Vec::new();
            write_series(&s, &mut buf).unwrap();
            let back = read_series(buf.as_slice()).unwrap();
            prop_assert_eq!(&back.timestamps, &s.timestamps);
            let a: Vec<u64> = s.values.iter().map(|x| if x.is_nan() { 0 } else { x.to_bits() }).collect();
            let b: Vec<u64> = back.values.iter().map(|x| if x.is_nan() { 0 } else { x.to_bits() }).collect();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn standardize_round_trip(v in prop::collection::vec(-1e3f64..1e3, 20), per_node in any::<bool>()) {
            let x = DMatrix::from_row_slice(10, 2, &v);
            let mode = if per_node { NormalizationMode::PerNode } else { NormalizationMode::Scalar };
            if let Ok(st) = Standardizer::fit(&x, mode) {
                let back = st.destandardize(&st.standardize(&x));
                prop_assert!((back - &x).amax() <= 1e-9 * (1.0 + x.amax()));
            }
        }

        #[test]
        fn split_segments_partition(t in 3usize..500) {
            let s = set(DMatrix::from_fn(t, 1, |r, _| r as f64));
            if let Ok((a, b, c)) = chronological_split(&s, [0.7, 0.1, 0.2], 1) {
                prop_assert_eq!(a.len() + b.len() + c.len(), t);
                let joined: Vec<f64> = a.values.iter().chain(b.values.iter()).chain(c.values.iter()).copied().collect();
                prop_assert_eq!(joined, (0..t).map(|r| r as f64).collect::<Vec<_>>());
            }
        }

        #[test]
        fn windows_stay_inside_segment(t in 2usize..60, p in 1usize..6, q in 0usize..6) {
            let x = DMatrix::from_fn(t, 1, |r, _| r as f64);
            match make_windows(&x, None, p, q) {
                Ok(ws) => {
                    prop_assert_eq!(ws.len(), t - p - q + 1);
                    for w in ws {
                        prop_assert!(w.start + p + q <= t);
                        prop_assert_eq!(w.history[(0, 0)], w.start as f64);
                    }
                }
                Err(_) => prop_assert!(t < p + q),
            }
        }
    }
}
