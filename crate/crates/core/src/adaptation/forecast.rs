use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::finetune::{BatchCycle, FinetuneConfig, FinetuneSummary};
use super::prefix::PrefixBundle;
use crate::backbone::{self, OutputHead};
use crate::data::revin::normalize_values;
use crate::data::{revin_denormalize, revin_normalize, SeriesWindow};
use crate::embedding::{embed_tokens, normal, InputBatch};
use crate::error::{Error, Result};
use crate::model::{ImputationModel, PrefixProvider};
use crate::numerics::{checkpoint, Graph, Module, Param, Real, Tensor, Var};
use crate::parallel::Exec;
use crate::training::{mse_loss, Adam};

/// The imputation model turned forecaster: `M` learned padding tokens are
/// appended after the patch tokens and their final states are mapped to
/// `M·P` future values. Only positions, layer norms, the prefix, the
/// padding token and the forecasting head are trainable; the stored base
/// checkpoint is never modified.
#[derive(Clone, Debug)]
pub struct ForecastModel<T> {
    pub base: ImputationModel<T>,
    pub prefix: PrefixBundle<T>,
    /// `1 × D`, replicated `horizon` times.
    pub padding: Param<T>,
    pub head: OutputHead<T>,
    /// Padding tokens `M`.
    pub horizon: usize,
}

impl<T: Real> ForecastModel<T> {
    pub fn new(base: &ImputationModel<T>, horizon: usize, cfg: &FinetuneConfig) -> Result<Self> {
        if horizon == 0 {
            return Err(Error::Config("forecast horizon must be at least one patch".into()));
        }
        let c = &base.cfg;
        let seq = c.n_patches() + 2 + horizon;
        if seq > c.max_seq_len {
            return Err(Error::Config(format!(
                "{seq} tokens with {horizon} padding tokens exceed max_seq_len {}",
                c.max_seq_len
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut prefix = PrefixBundle::for_model(&mut rng, base, cfg.domain.as_deref(), cfg.beta)?;
        prefix.domain.trainable = cfg.train_domain_embedding;
        let mut base = base.clone();
        base.set_trainable(false);
        base.backbone.unfreeze_positions_and_norms();
        let d = c.d_model;
        Ok(ForecastModel {
            padding: Param::new("forecast.pad", normal(&mut rng, &[1, d], 0.02)),
            head: OutputHead::init(&mut rng, "forecast.head", horizon, d, horizon * c.patch_len),
            prefix,
            base,
            horizon,
        })
    }

    /// Future values per window.
    pub fn out_len(&self) -> usize {
        self.horizon * self.base.cfg.patch_len
    }

    /// Normalized forecasts `B × M·P` for normalized input windows.
    pub fn forward(&self, g: &mut Graph<T>, input: &InputBatch<T>) -> Result<Var> {
        let table = g.param(&self.padding);
        let pads = g.gather_rows(table, &vec![0; self.horizon])?;
        let tokens = embed_tokens(g, &self.base.embedding, input, Some(pads))?;
        let pre = self.prefix.prefixes(g, &self.base, input)?;
        let h = backbone::forward::<T, ChaCha8Rng>(g, &self.base.backbone, tokens, input.batch, Some(&pre), None)?;
        let fut = backbone::select_tokens(g, &h, input.n_patches + 2, self.horizon)?;
        self.head.apply(g, fut, input.batch)
    }

    /// Forecasts the `M·P` values following each raw window, in the
    /// window's units.
    pub fn forecast(&self, exec: Exec, windows: &[SeriesWindow]) -> Result<Vec<Vec<f64>>> {
        let chunks: Vec<&[SeriesWindow]> = windows.chunks(32).collect();
        let parts = exec.map(&chunks, |ws| -> Result<Vec<Vec<f64>>> {
            let (norm, stats): (Vec<_>, Vec<_>) = ws.iter().map(revin_normalize).unzip();
            let input = self.base.input(&norm)?;
            let mut g = Graph::new();
            let o = self.forward(&mut g, &input)?;
            let o = g.value(o);
            if !o.is_finite() {
                return Err(Error::Numeric("non-finite forecast".into()));
            }
            Ok(o.data()
                .chunks(self.out_len())
                .zip(&stats)
                .map(|(c, s)| revin_denormalize(&c.iter().map(|v| v.f64()).collect::<Vec<_>>(), s))
                .collect())
        });
        let mut out = Vec::with_capacity(windows.len());
        for p in parts {
            out.extend(p?);
        }
        Ok(out)
    }

    /// Self-contained forecasting checkpoint: base weights (with the tuned
    /// positions and norms), prefix, padding token and head.
    pub fn to_tensors(&self) -> Vec<(String, Tensor<T>)> {
        let mut t = self.base.to_tensors();
        t.push(("meta.forecast.horizon".into(), Tensor::scalar(T::of(self.horizon as f64))));
        t.extend(self.prefix.to_tensors());
        t.push((self.padding.name().to_string(), self.padding.value.clone()));
        t.extend(self.head.named_tensors());
        t
    }

    pub fn from_tensors(t: &[(String, Tensor<T>)]) -> Result<Self> {
        let horizon = t
            .iter()
            .find(|(n, _)| n == "meta.forecast.horizon")
            .map(|(_, v)| v.item().f64().round() as usize)
            .ok_or_else(|| Error::Load("not a forecasting checkpoint (no horizon)".into()))?;
        let base = ImputationModel::from_tensors(t)?;
        let mut fm = ForecastModel::new(&base, horizon, &FinetuneConfig::default())?;
        fm.prefix = PrefixBundle::from_tensors(t)?;
        fm.padding.load_tensors(t)?;
        fm.head.load_tensors(t)?;
        Ok(fm)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.to_tensors())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_tensors(&checkpoint::load(path)?)
    }
}

impl<T: Real> Module<T> for ForecastModel<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.base.visit(f);
        self.prefix.visit(f);
        f(&self.padding);
        self.head.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.base.visit_mut(f);
        self.prefix.visit_mut(f);
        f(&mut self.padding);
        self.head.visit_mut(f);
    }
}

/// Splits a window of `input_len + future` points into the input window and
/// the future values with their observation mask.
pub fn split_forecast_window(w: &SeriesWindow, input_len: usize) -> Result<(SeriesWindow, Vec<f64>, Vec<bool>)> {
    if w.len() <= input_len {
        return Err(Error::Config(format!(
            "window of {} points has no future beyond {input_len}",
            w.len()
        )));
    }
    let input = SeriesWindow {
        values: w.values[..input_len].to_vec(),
        mask: w.mask[..input_len].to_vec(),
        ..w.clone()
    };
    Ok((input, w.values[input_len..].to_vec(), w.mask[input_len..].to_vec()))
}

/// Trains the forecaster on windows of `L + M·P` points: the first `L` are
/// the input, the rest the target, both scaled by the input's statistics.
pub fn forecast_finetune<T: Real>(
    fm: &mut ForecastModel<T>,
    windows: &[SeriesWindow],
    cfg: &FinetuneConfig,
    log: &mut dyn FnMut(usize, f64) -> Result<()>,
) -> Result<FinetuneSummary> {
    cfg.validate()?;
    let l = fm.base.cfg.window_len;
    let h = fm.out_len();
    if let Some(w) = windows.iter().find(|w| w.len() != l + h) {
        return Err(Error::Dimension(format!(
            "forecast training window of {} points, expected {}",
            w.len(),
            l + h
        )));
    }
    let mut cycle = BatchCycle::new(windows, cfg.batch_size, false, cfg.seed)?;
    let mut opt = Adam::new(cfg.adam());
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let idx = cycle.next(windows.len(), cfg.batch_size, false);
        let mut inputs = Vec::with_capacity(idx.len());
        let mut targets = Vec::with_capacity(idx.len() * h);
        let mut weights = Vec::with_capacity(idx.len() * h);
        for &i in &idx {
            let (inp, fut, fmask) = split_forecast_window(&windows[i], l)?;
            let (nv, st) = normalize_values(&inp.values, &inp.mask);
            let s = st.scale();
            targets.extend(fut.iter().zip(&fmask).map(|(&v, &m)| T::of(if m { (v - st.mean) / s } else { 0.0 })));
            weights.extend(fmask);
            inputs.push(SeriesWindow { values: nv, ..inp });
        }
        let input = fm.base.input(&inputs)?;
        let mut g = Graph::with_exec(cfg.exec);
        let out = fm.forward(&mut g, &input)?;
        let target = Tensor::new(vec![idx.len(), h], targets)?;
        let loss = mse_loss(&mut g, out, &target, &weights)?;
        let value = g.value(loss).item().f64();
        if !value.is_finite() {
            return Err(Error::Numeric(format!("non-finite forecasting loss at step {}", step + 1)));
        }
        let grads = g.backward(loss)?;
        opt.step(&mut [fm as &mut dyn Module<T>], &grads)?;
        losses.push(value);
        log(step, value)?;
    }
    Ok(FinetuneSummary {
        steps: cfg.steps,
        losses,
    })
}
