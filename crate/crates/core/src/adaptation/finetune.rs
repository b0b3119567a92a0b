use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::intervar::InterVarPrefixNet;
use super::prefix::{PrefixBundle, DEFAULT_BETA};
use crate::data::mask::derive_seed;
use crate::data::window::slice_variables;
use crate::data::{MultivariateSeries, SeriesWindow};
use crate::error::{Error, Result};
use crate::model::{ImputationModel, PrefixProvider};
use crate::numerics::{checkpoint, Graph, Module, Real, Tensor};
use crate::parallel::Exec;
use crate::training::masking::random_rate_mask;
use crate::training::trainer::view_target;
use crate::training::{mse_loss, Adam, AdamConfig};

const PASS_TAG: u64 = 0x4654;
const MASK_TAG: u64 = 0x464d;

/// Which prefix generator a fine-tune trains.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrefixMode {
    /// Continuous prompt plus domain-transfer network.
    #[default]
    Domain,
    /// Per-variable prefixes from all variables of a time window.
    Intervar,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub mask_rate_min: f64,
    pub mask_rate_max: f64,
    pub beta: f64,
    /// Also update the domain embedding fed to the transfer network.
    pub train_domain_embedding: bool,
    pub mode: PrefixMode,
    /// Inter-variable network width; 0 means `D / 4`.
    pub d_light: usize,
    pub intervar_heads: usize,
    /// Domain label whose embedding seeds the prefix (per-domain models).
    pub domain: Option<String>,
    /// Forecast horizon in patches; 0 fine-tunes for imputation.
    pub horizon: usize,
    pub seed: u64,
    pub exec: Exec,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            steps: 500,
            lr: 1e-3,
            batch_size: 16,
            mask_rate_min: 0.1,
            mask_rate_max: 0.9,
            beta: DEFAULT_BETA,
            train_domain_embedding: false,
            mode: PrefixMode::Domain,
            d_light: 0,
            intervar_heads: 1,
            domain: None,
            horizon: 0,
            seed: 0,
            exec: Exec::default(),
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || !(self.lr > 0.0) {
            return Err(Error::Config("fine-tune batch size and learning rate must be positive".into()));
        }
        let (lo, hi) = (self.mask_rate_min, self.mask_rate_max);
        if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
            return Err(Error::Config(format!("mask rate range [{lo}, {hi}] not inside [0, 1]")));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
    }
}

/// Windows grouped by time window (domain, start), variables in id order.
pub fn aligned_blocks(windows: &[SeriesWindow]) -> Vec<Vec<usize>> {
    let mut groups: BTreeMap<(&str, usize), Vec<usize>> = BTreeMap::new();
    for (i, w) in windows.iter().enumerate() {
        groups.entry((w.domain.as_str(), w.start)).or_default().push(i);
    }
    groups
        .into_values()
        .map(|mut g| {
            g.sort_by_key(|&i| windows[i].variable);
            g
        })
        .collect()
}

/// Imputes raw windows with an optional prefix, in input order. Providers
/// that need all variables of a time window get one such block per batch.
pub fn impute_with<T: Real>(
    model: &ImputationModel<T>,
    exec: Exec,
    windows: &[SeriesWindow],
    prefix: Option<&dyn PrefixProvider<T>>,
) -> Result<Vec<Vec<f64>>> {
    match prefix {
        Some(p) if p.needs_aligned_block() => {
            let blocks = aligned_blocks(windows);
            let outs = exec.map(&blocks, |b| {
                let ws: Vec<SeriesWindow> = b.iter().map(|&i| windows[i].clone()).collect();
                model.impute(Exec::Sequential, &ws, Some(p), ws.len())
            });
            let mut result = vec![Vec::new(); windows.len()];
            for (b, o) in blocks.iter().zip(outs) {
                for (&i, v) in b.iter().zip(o?) {
                    result[i] = v;
                }
            }
            Ok(result)
        }
        _ => model.impute(exec, windows, prefix, 32),
    }
}

/// Window starts covering `t` steps: back-to-back windows, then one
/// aligned to the end when `len` does not divide `t`.
pub fn covering_starts(t: usize, len: usize) -> Result<Vec<usize>> {
    if t < len || len == 0 {
        return Err(Error::Format(format!("series has {t} steps, the model needs at least {len}")));
    }
    let mut starts: Vec<usize> = (0..=t - len).step_by(len).collect();
    if !t.is_multiple_of(len) {
        starts.push(t - len);
    }
    Ok(starts)
}

/// Imputes every missing cell of `series`; observed cells are returned
/// unchanged. Output is time-major like `series.values`.
pub fn impute_series<T: Real>(
    model: &ImputationModel<T>,
    exec: Exec,
    series: &MultivariateSeries,
    prefix: Option<&dyn PrefixProvider<T>>,
) -> Result<Vec<f64>> {
    let len = model.cfg.window_len;
    let starts = covering_starts(series.len(), len)?;
    let columns: Vec<usize> = (0..series.vars()).collect();
    let mut windows = Vec::with_capacity(starts.len() * columns.len());
    for &s in &starts {
        let sub = MultivariateSeries::new(
            series.names.clone(),
            series.values[s * series.vars()..(s + len) * series.vars()].to_vec(),
            series.mask[s * series.vars()..(s + len) * series.vars()].to_vec(),
            series.domain.clone(),
        )?;
        for mut w in slice_variables(&sub, len, len, 0, &columns)? {
            w.start = s;
            windows.push(w);
        }
    }
    let out = impute_with(model, exec, &windows, prefix)?;
    let v = series.vars();
    let mut result = series.values.clone();
    let mut covered = 0;
    for (i, &s) in starts.iter().enumerate() {
        for (j, vals) in out[i * v..(i + 1) * v].iter().enumerate() {
            for t in covered.max(s)..s + len {
                result[t * v + j] = vals[t - s];
            }
        }
        covered = s + len;
    }
    Ok(result)
}

/// Batches of window indices for `step`, cycling through shuffled passes.
pub(crate) struct BatchCycle {
    batches: Vec<Vec<usize>>,
    seed: u64,
    pass: u64,
    at: usize,
}

impl BatchCycle {
    pub(crate) fn new(windows: &[SeriesWindow], batch: usize, aligned: bool, seed: u64) -> Result<Self> {
        if windows.is_empty() {
            return Err(Error::Config("no fine-tuning windows".into()));
        }
        let batches = if aligned {
            aligned_blocks(windows)
        } else {
            let idx: Vec<usize> = (0..windows.len()).collect();
            idx.chunks(batch).map(<[usize]>::to_vec).collect()
        };
        let mut c = BatchCycle {
            batches,
            seed,
            pass: 0,
            at: 0,
        };
        c.reshuffle(windows.len(), batch, aligned);
        Ok(c)
    }

    fn reshuffle(&mut self, n: usize, batch: usize, aligned: bool) {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[self.seed, PASS_TAG, self.pass]));
        if aligned {
            self.batches.shuffle(&mut rng);
        } else {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut rng);
            self.batches = idx.chunks(batch).map(<[usize]>::to_vec).collect();
        }
    }

    pub(crate) fn next(&mut self, n: usize, batch: usize, aligned: bool) -> Vec<usize> {
        if self.at == self.batches.len() {
            self.pass += 1;
            self.at = 0;
            self.reshuffle(n, batch, aligned);
        }
        self.at += 1;
        self.batches[self.at - 1].clone()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneSummary {
    pub steps: usize,
    pub losses: Vec<f64>,
}

/// Trains only `prefix` to reconstruct randomly masked windows through the
/// frozen `model`. The model is never written; a gradient reaching any
/// parameter outside `prefix` is an invariant violation.
pub fn finetune_loop<T: Real, P: PrefixProvider<T> + Module<T>>(
    model: &ImputationModel<T>,
    prefix: &mut P,
    windows: &[SeriesWindow],
    cfg: &FinetuneConfig,
    log: &mut dyn FnMut(usize, f64) -> Result<()>,
) -> Result<FinetuneSummary> {
    cfg.validate()?;
    let mut frozen = model.clone();
    frozen.set_trainable(false);
    let aligned = prefix.needs_aligned_block();
    let mut cycle = BatchCycle::new(windows, cfg.batch_size, aligned, cfg.seed)?;
    let mut opt = Adam::new(cfg.adam());
    let l = frozen.cfg.window_len;
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let idx = cycle.next(windows.len(), cfg.batch_size, aligned);
        let mut inputs = Vec::with_capacity(idx.len());
        let mut targets = Vec::with_capacity(idx.len() * l);
        let mut weights = Vec::with_capacity(idx.len() * l);
        for &i in &idx {
            let w = &windows[i];
            let s = derive_seed(&[cfg.seed, MASK_TAG, step as u64, w.variable as u64, w.start as u64]);
            let (m, _) = random_rate_mask(w.len(), (cfg.mask_rate_min, cfg.mask_rate_max), s)?;
            let (norm, t) = view_target(&w.masked(&m), w);
            inputs.push(norm);
            targets.extend(t.into_iter().map(T::of));
            weights.extend_from_slice(&w.mask);
        }
        let input = frozen.input(&inputs)?;
        let mut g = Graph::with_exec(cfg.exec);
        let pre = prefix.prefixes(&mut g, &frozen, &input)?;
        let out = frozen.forward::<ChaCha8Rng>(&mut g, &input, Some(&pre), None)?;
        let target = Tensor::new(vec![idx.len(), l], targets)?;
        let loss = mse_loss(&mut g, out.output, &target, &weights)?;
        let value = g.value(loss).item().f64();
        if !value.is_finite() {
            return Err(Error::Numeric(format!("non-finite fine-tuning loss at step {}", step + 1)));
        }
        let grads = g.backward(loss)?;
        opt.step(&mut [prefix as &mut dyn Module<T>], &grads)?;
        losses.push(value);
        log(step, value)?;
    }
    Ok(FinetuneSummary {
        steps: cfg.steps,
        losses,
    })
}

/// A stored prefix of either kind.
#[derive(Clone, Debug)]
pub enum PrefixFile<T> {
    Domain(PrefixBundle<T>),
    Intervar(InterVarPrefixNet<T>),
}

impl<T: Real> PrefixFile<T> {
    pub fn provider(&self) -> &dyn PrefixProvider<T> {
        match self {
            PrefixFile::Domain(b) => b,
            PrefixFile::Intervar(n) => n,
        }
    }

    pub fn to_tensors(&self) -> Vec<(String, Tensor<T>)> {
        match self {
            PrefixFile::Domain(b) => b.to_tensors(),
            PrefixFile::Intervar(n) => n.to_tensors(),
        }
    }

    pub fn from_tensors(t: &[(String, Tensor<T>)]) -> Result<Self> {
        if t.iter().any(|(n, _)| n == "prefix.prompt") {
            Ok(PrefixFile::Domain(PrefixBundle::from_tensors(t)?))
        } else if t.iter().any(|(n, _)| n == "intervar.tok.w") {
            Ok(PrefixFile::Intervar(InterVarPrefixNet::from_tensors(t)?))
        } else {
            Err(Error::Load("file holds no prefix tensors".into()))
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.to_tensors())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_tensors(&checkpoint::load(path)?)
    }

    /// Fails unless the prefix fits `model`'s backbone.
    pub fn check_fits(&self, model: &ImputationModel<T>) -> Result<()> {
        match self {
            PrefixFile::Domain(b) => b.check_fits(model),
            PrefixFile::Intervar(n) => {
                if n.layers.len() != model.cfg.layers
                    || n.d_model != model.cfg.d_model
                    || n.window_len() != model.cfg.window_len
                {
                    return Err(Error::Load(format!(
                        "inter-variable prefix for {} layers, width {}, windows of {}; model has {}, {}, {}",
                        n.layers.len(),
                        n.d_model,
                        n.window_len(),
                        model.cfg.layers,
                        model.cfg.d_model,
                        model.cfg.window_len
                    )));
                }
                Ok(())
            }
        }
    }
}

/// Builds a fresh prefix of the configured kind for `model`.
pub fn new_prefix<T: Real>(model: &ImputationModel<T>, cfg: &FinetuneConfig) -> Result<PrefixFile<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    Ok(match cfg.mode {
        PrefixMode::Domain => {
            let mut b = PrefixBundle::for_model(&mut rng, model, cfg.domain.as_deref(), cfg.beta)?;
            b.domain.trainable = cfg.train_domain_embedding;
            PrefixFile::Domain(b)
        }
        PrefixMode::Intervar => {
            PrefixFile::Intervar(InterVarPrefixNet::for_model(model, cfg.d_light, cfg.intervar_heads, cfg.seed)?)
        }
    })
}

/// Fine-tunes a prefix file of either kind.
pub fn finetune_prefix<T: Real>(
    model: &ImputationModel<T>,
    prefix: &mut PrefixFile<T>,
    windows: &[SeriesWindow],
    cfg: &FinetuneConfig,
    log: &mut dyn FnMut(usize, f64) -> Result<()>,
) -> Result<FinetuneSummary> {
    match prefix {
        PrefixFile::Domain(b) => finetune_loop(model, b, windows, cfg, log),
        PrefixFile::Intervar(n) => finetune_loop(model, n, windows, cfg, log),
    }
}
