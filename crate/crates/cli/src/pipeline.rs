//! Series file to standardized train/val/test windows.

use flowcast::data::{
    chronological_split, forward_fill, load_graph, load_series, make_windows, time_of_day, SeriesSet, Standardizer,
    Window,
};
use flowcast::ssm::Graph;

use crate::config::DataConfig;
use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Split {
    Train,
    Val,
    Test,
}

pub struct Prepared {
    pub names: Vec<String>,
    pub standardizer: Standardizer,
    pub graph: Option<Graph>,
    pub train: Vec<Window>,
    pub val: Vec<Window>,
    pub test: Vec<Window>,
    pub d_z: usize,
}

impl Prepared {
    pub fn n_series(&self) -> usize {
        self.names.len()
    }

    pub fn split(&self, which: Split) -> &[Window] {
        match which {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

fn segment_windows(
    seg: &SeriesSet,
    offset: usize,
    cfg: &DataConfig,
    standardizer: &Standardizer,
) -> Result<Vec<Window>, CliError> {
    let values = standardizer.standardize(&seg.values);
    let cov = if cfg.time_of_day {
        Some(time_of_day(seg, cfg.steps_per_day, offset)?)
    } else {
        None
    };
    Ok(make_windows(&values, cov.as_ref(), cfg.p, cfg.q)?)
}

/// Loads, fills, splits and windows the series. Normalization statistics
/// are fitted on the training segment unless `standardizer` is given.
pub fn prepare(cfg: &DataConfig, standardizer: Option<&Standardizer>) -> Result<Prepared, CliError> {
    let raw = load_series(&cfg.path)?;
    let set = forward_fill(&raw)?;
    let (train, val, test) = chronological_split(&set, cfg.splits, cfg.p + cfg.q)?;
    let standardizer = match standardizer {
        Some(s) => s.clone(),
        None => Standardizer::fit(&train.values, cfg.normalization)?,
    };
    let graph = cfg.graph.as_ref().map(|p| load_graph(p, set.n_series())).transpose()?;
    let train_w = segment_windows(&train, 0, cfg, &standardizer)?;
    let val_w = segment_windows(&val, train.len(), cfg, &standardizer)?;
    let test_w = segment_windows(&test, train.len() + val.len(), cfg, &standardizer)?;
    Ok(Prepared {
        names: set.names.clone(),
        standardizer,
        graph,
        train: train_w,
        val: val_w,
        test: test_w,
        d_z: if cfg.time_of_day { 2 } else { 0 },
    })
}
