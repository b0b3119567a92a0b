//! The evaluation grid: every test window under every (pattern, rate),
//! imputed by every configured model.

use serde::{Deserialize, Serialize};

use super::baselines::{impute_last, impute_median};
use super::config::{Corpus, ModelKind, ProtocolConfig};
use super::metrics::{score_window, MetricSpace, MetricSum};
use crate::adaptation::{impute_with, PrefixFile};
use crate::data::mask::{derive_seed, generate};
use crate::data::{MissingPattern, SeriesWindow};
use crate::error::{Error, Result};
use crate::model::{ImputationModel, PrefixProvider};

/// Errors of one model under one (pattern, rate).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub model: ModelKind,
    pub pattern: MissingPattern,
    pub rate: f64,
    pub mse: f64,
    pub mae: f64,
    /// Scored positions.
    pub count: usize,
}

/// A model's cells averaged with equal weight.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Average {
    pub model: ModelKind,
    pub mse: f64,
    pub mae: f64,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub metric_space: MetricSpace,
    pub seed: u64,
    /// Variables the checkpoint was trained on, as recorded in it.
    pub train_variables: Vec<usize>,
    pub test_variables: Vec<usize>,
    pub cells: Vec<Cell>,
}

impl BenchReport {
    /// Per-model means over that model's cells, in first-appearance order.
    pub fn averages(&self) -> Vec<Average> {
        let mut order: Vec<ModelKind> = Vec::new();
        for c in &self.cells {
            if !order.contains(&c.model) {
                order.push(c.model);
            }
        }
        order
            .into_iter()
            .map(|m| {
                let cells: Vec<&Cell> = self.cells.iter().filter(|c| c.model == m).collect();
                let n = cells.len() as f64;
                Average {
                    model: m,
                    mse: cells.iter().map(|c| c.mse).sum::<f64>() / n,
                    mae: cells.iter().map(|c| c.mae).sum::<f64>() / n,
                    count: cells.iter().map(|c| c.count).sum(),
                }
            })
            .collect()
    }
}

/// Seed of the evaluation mask of one window under one (rate, pattern).
pub fn eval_mask_seed(seed: u64, w: &SeriesWindow, rate: f64, pattern: MissingPattern) -> u64 {
    derive_seed(&[seed, w.variable as u64, w.start as u64, rate.to_bits(), pattern as u64])
}

/// Loaded learned models of a run.
pub struct Engines {
    pub model: Option<ImputationModel<f32>>,
    pub prefix: Option<PrefixFile<f32>>,
}

impl Engines {
    pub fn load(cfg: &ProtocolConfig) -> Result<Self> {
        let b = &cfg.bench;
        let wants = |k: ModelKind| b.models.contains(&k);
        let model = match &b.checkpoint {
            Some(p) if wants(ModelKind::Model) || wants(ModelKind::ModelPrefix) => {
                let m = ImputationModel::<f32>::load(p)?;
                m.check_config(&cfg.model)?;
                Some(m)
            }
            _ => None,
        };
        let prefix = match (&b.prefix, &model) {
            (Some(p), Some(m)) if wants(ModelKind::ModelPrefix) => {
                let pf = PrefixFile::<f32>::load(p)?;
                pf.check_fits(m)?;
                Some(pf)
            }
            _ => None,
        };
        Ok(Engines { model, prefix })
    }
}

/// Loads data and checkpoints named by `cfg` and evaluates the grid.
pub fn run_protocol(cfg: &ProtocolConfig) -> Result<BenchReport> {
    cfg.validate()?;
    let corpus = Corpus::load(&cfg.data, cfg.model.window_len)?;
    let engines = Engines::load(cfg)?;
    evaluate(cfg, &corpus, &engines)
}

/// Evaluates the grid on the test variables of `corpus`. No parameter is
/// updated.
pub fn evaluate(cfg: &ProtocolConfig, corpus: &Corpus, engines: &Engines) -> Result<BenchReport> {
    let b = &cfg.bench;
    let test = corpus.split.test.clone();
    let train_variables = engines.model.as_ref().map(|m| m.train_vars.clone()).unwrap_or_default();
    if let Some(v) = train_variables.iter().find(|v| test.binary_search(v).is_ok()) {
        return Err(Error::Config(format!(
            "checkpoint was trained on variable {v}, which is in the test split"
        )));
    }
    let windows = corpus.windows_of(&test);
    let mut cells = Vec::new();
    for &pattern in &b.patterns {
        for &rate in &b.rates {
            let masks = b.exec.map(&windows, |w| generate(pattern, w.len(), rate, eval_mask_seed(b.seed, w, rate, pattern)));
            let masks = masks.into_iter().collect::<Result<Vec<_>>>()?;
            let masked: Vec<SeriesWindow> = windows.iter().zip(&masks).map(|(w, m)| w.masked(m)).collect();
            for &kind in &b.models {
                let imputed = match kind {
                    ModelKind::Median => b.exec.map(&masked, impute_median),
                    ModelKind::Last => b.exec.map(&masked, impute_last),
                    ModelKind::Model => impute_with(engine(&engines.model)?, b.exec, &masked, None)?,
                    ModelKind::ModelPrefix => {
                        let p: &dyn PrefixProvider<f32> = engine(&engines.prefix)?.provider();
                        impute_with(engine(&engines.model)?, b.exec, &masked, Some(p))?
                    }
                };
                let mut sum = MetricSum::default();
                for ((out, w), m) in imputed.iter().zip(&windows).zip(&masks) {
                    score_window(&mut sum, out, w, m, b.metric_space);
                }
                // a cell with nothing to score is left out of the report
                if let Ok(metric) = sum.finish() {
                    cells.push(Cell {
                        model: kind,
                        pattern,
                        rate,
                        mse: metric.mse,
                        mae: metric.mae,
                        count: metric.count,
                    });
                }
            }
        }
    }
    Ok(BenchReport {
        metric_space: b.metric_space,
        seed: b.seed,
        train_variables,
        test_variables: test,
        cells,
    })
}

fn engine<E>(e: &Option<E>) -> Result<&E> {
    e.as_ref().ok_or_else(|| Error::Config("model evaluation needs a checkpoint".into()))
}
