//! TOML configuration shared by the `train`, `finetune` and `bench`
//! commands, and the corpus it describes.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::metrics::MetricSpace;
use crate::adaptation::FinetuneConfig;
use crate::backbone::BackboneConfig;
use crate::data::{load_csv, sinusoid_corpus, slice_windows, split_by_variable, MissingPattern, MultivariateSeries, SeriesWindow, SinusoidSpec, VariableSplit};
use crate::error::{Error, Result};
use crate::parallel::Exec;
use crate::training::TrainConfig;

/// Where the series come from and how they are windowed and split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// CSV files; each file is one domain named after its file stem.
    pub paths: Vec<PathBuf>,
    /// Generated sinusoid corpus, domain `synthetic`.
    pub synthetic: Option<SinusoidSpec>,
    pub stride: usize,
    /// Train : validation : test ratio over variables.
    pub split: [f64; 3],
    pub split_seed: u64,
    /// Keep at most this many windows per variable (0 = all).
    pub max_windows_per_variable: usize,
    /// One domain embedding per domain label instead of a shared one.
    pub per_domain_embedding: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            paths: Vec::new(),
            synthetic: None,
            stride: 1,
            split: [1.0, 1.0, 1.0],
            split_seed: 0,
            max_windows_per_variable: 0,
            per_domain_embedding: false,
        }
    }
}

/// An entry of the evaluation grid's model axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ModelKind {
    #[serde(rename = "median")]
    Median,
    #[serde(rename = "last")]
    Last,
    #[serde(rename = "model")]
    Model,
    #[serde(rename = "model+prefix")]
    ModelPrefix,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Median => "median",
            ModelKind::Last => "last",
            ModelKind::Model => "model",
            ModelKind::ModelPrefix => "model+prefix",
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "median" => Ok(ModelKind::Median),
            "last" => Ok(ModelKind::Last),
            "model" => Ok(ModelKind::Model),
            "model+prefix" => Ok(ModelKind::ModelPrefix),
            _ => Err(Error::Config(format!("unknown model `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub rates: Vec<f64>,
    pub patterns: Vec<MissingPattern>,
    pub models: Vec<ModelKind>,
    pub checkpoint: Option<PathBuf>,
    pub prefix: Option<PathBuf>,
    pub metric_space: MetricSpace,
    /// Seed of the evaluation masks.
    pub seed: u64,
    pub exec: Exec,
    /// Report directory; the command line `--out` takes precedence.
    pub output: Option<PathBuf>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            rates: (1..=9).map(|i| i as f64 / 10.0).collect(),
            patterns: vec![MissingPattern::Random, MissingPattern::Continuous],
            models: vec![ModelKind::Median, ModelKind::Last],
            checkpoint: None,
            prefix: None,
            metric_space: MetricSpace::Normalized,
            seed: 0,
            exec: Exec::default(),
            output: None,
        }
    }
}

/// A whole experiment file: `[data]`, `[model]`, `[train]`, `[finetune]`
/// and `[bench]` tables, each optional.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolConfig {
    pub data: DataConfig,
    pub model: BackboneConfig,
    pub train: TrainConfig,
    pub finetune: FinetuneConfig,
    pub bench: BenchConfig,
}

impl ProtocolConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads `path`; relative paths inside are taken relative to its
    /// directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        cfg.data.paths.iter_mut().for_each(fix);
        cfg.bench.checkpoint.iter_mut().for_each(fix);
        cfg.bench.prefix.iter_mut().for_each(fix);
        cfg.bench.output.iter_mut().for_each(fix);
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let b = &self.bench;
        if let Some(r) = b.rates.iter().find(|r| !(**r > 0.0 && **r <= 1.0)) {
            return Err(Error::Config(format!("missing rate {r} outside (0, 1]")));
        }
        if b.models.is_empty() {
            return Err(Error::Config("at least one model must be evaluated".into()));
        }
        let wants_model = b.models.iter().any(|m| matches!(m, ModelKind::Model | ModelKind::ModelPrefix));
        if wants_model && b.checkpoint.is_none() {
            return Err(Error::Config("evaluating `model` needs bench.checkpoint".into()));
        }
        if b.models.contains(&ModelKind::ModelPrefix) && b.prefix.is_none() {
            return Err(Error::Config("evaluating `model+prefix` needs bench.prefix".into()));
        }
        if self.data.stride == 0 {
            return Err(Error::Config("data.stride must be at least 1".into()));
        }
        Ok(())
    }
}

/// All windows of a configured corpus and its variable split.
#[derive(Clone, Debug)]
pub struct Corpus {
    /// Variable names indexed by corpus-wide id.
    pub names: Vec<String>,
    /// Distinct domain labels in load order.
    pub domains: Vec<String>,
    pub windows: Vec<SeriesWindow>,
    pub split: VariableSplit,
}

impl Corpus {
    pub fn load(data: &DataConfig, window_len: usize) -> Result<Self> {
        let mut series: Vec<MultivariateSeries> = Vec::new();
        for p in &data.paths {
            series.push(load_csv(p)?);
        }
        if let Some(spec) = &data.synthetic {
            series.push(sinusoid_corpus(spec, "synthetic")?);
        }
        Self::from_series(&series, data, window_len)
    }

    pub fn from_series(series: &[MultivariateSeries], data: &DataConfig, window_len: usize) -> Result<Self> {
        if series.is_empty() {
            return Err(Error::Config("no data: set data.paths or data.synthetic".into()));
        }
        let mut names = Vec::new();
        let mut domains: Vec<String> = Vec::new();
        let mut windows = Vec::new();
        for s in series {
            let mut ws = slice_windows(s, window_len, data.stride, names.len())?;
            if data.max_windows_per_variable > 0 {
                ws.retain(|w| w.start / data.stride < data.max_windows_per_variable);
            }
            windows.extend(ws);
            names.extend(s.names.iter().cloned());
            if !domains.contains(&s.domain) {
                domains.push(s.domain.clone());
            }
        }
        if windows.is_empty() {
            return Err(Error::Format(format!("no series is at least {window_len} steps long")));
        }
        let ids: Vec<usize> = (0..names.len()).collect();
        let split = split_by_variable(&ids, data.split, data.split_seed)?;
        Ok(Corpus {
            names,
            domains,
            windows,
            split,
        })
    }

    /// Windows of the given variables, in corpus order.
    pub fn windows_of(&self, vars: &[usize]) -> Vec<SeriesWindow> {
        self.windows
            .iter()
            .filter(|w| vars.binary_search(&w.variable).is_ok())
            .cloned()
            .collect()
    }
}
