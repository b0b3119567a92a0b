use std::collections::BTreeSet;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::{Adam, AdamConfig};
use super::loss::{infonce_loss, mse_loss, ContrastiveHead};
use super::masking::{dual_mask_batch, random_rate_mask, DualView};
use crate::backbone::Dropout;
use crate::bench::metrics::{score_window, MetricSpace, MetricSum};
use crate::data::mask::derive_seed;
use crate::data::{revin_normalize, SeriesWindow};
use crate::error::{Error, Result};
use crate::model::ImputationModel;
use crate::numerics::checkpoint::{self, tensor_u64, u64_tensor};
use crate::numerics::{Graph, Module, Real, Tensor, Var};
use crate::parallel::Exec;

const SHUFFLE_TAG: u64 = 0x5348;
const STEP_TAG: u64 = 0x5354;
const DROP_TAG: u64 = 0x4452;
const VAL_TAG: u64 = 0x5641;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Weight of the contrastive term.
    pub alpha: f64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub patience: usize,
    pub mask_rate_min: f64,
    pub mask_rate_max: f64,
    pub seed: u64,
    /// 32 or 64.
    pub precision: u32,
    /// Cap on steps per epoch; 0 means a full pass.
    pub max_steps_per_epoch: usize,
    pub exec: Exec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: 0.1,
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 16,
            epochs: 20,
            patience: 3,
            mask_rate_min: 0.1,
            mask_rate_max: 0.9,
            seed: 0,
            precision: 32,
            max_steps_per_epoch: 0,
            exec: Exec::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) {
            return Err(Error::Config(format!("alpha {} must be non-negative", self.alpha)));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        let (lo, hi) = self.rate_range();
        if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
            return Err(Error::Config(format!("mask rate range [{lo}, {hi}] not inside [0, 1]")));
        }
        if self.batch_size == 0 || (self.alpha > 0.0 && self.batch_size < 2) {
            return Err(Error::Config(format!(
                "batch size {} too small (contrastive training needs at least 2)",
                self.batch_size
            )));
        }
        if self.precision != 32 && self.precision != 64 {
            return Err(Error::Config(format!("precision must be 32 or 64, got {}", self.precision)));
        }
        Ok(())
    }

    pub fn rate_range(&self) -> (f64, f64) {
        (self.mask_rate_min, self.mask_rate_max)
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub mse1: f64,
    pub mse2: f64,
    pub contrastive: f64,
    pub total: f64,
}

/// Loss nodes of one training graph.
pub struct LossVars {
    pub mse1: Var,
    pub mse2: Var,
    pub contrastive: Option<Var>,
    pub total: Var,
}

/// Normalizes a view by its own observed statistics and builds the
/// reconstruction target: the original window in the same units, counted
/// wherever it was natively observed.
pub(crate) fn view_target(view: &SeriesWindow, original: &SeriesWindow) -> (SeriesWindow, Vec<f64>) {
    let (norm, st) = revin_normalize(view);
    let s = st.scale();
    let target = original
        .values
        .iter()
        .zip(&original.mask)
        .map(|(&v, &m)| if m { (v - st.mean) / s } else { 0.0 })
        .collect();
    (norm, target)
}

/// Builds `mse(view 1) + mse(view 2) + α·InfoNCE` for a batch in one graph.
pub fn composed_loss<T: Real, R: rand::Rng>(
    g: &mut Graph<T>,
    model: &ImputationModel<T>,
    head: &ContrastiveHead<T>,
    originals: &[SeriesWindow],
    views: &[DualView],
    alpha: f64,
    drop: Option<Dropout<'_, R>>,
) -> Result<LossVars> {
    let b = originals.len();
    if b == 0 || views.len() != b {
        return Err(Error::Contract(format!("{} views for {b} windows", views.len())));
    }
    let l = model.cfg.window_len;
    let mut inputs = Vec::with_capacity(2 * b);
    let mut targets = [Vec::with_capacity(b * l), Vec::with_capacity(b * l)];
    let mut weights = Vec::with_capacity(b * l);
    for o in originals {
        weights.extend_from_slice(&o.mask);
    }
    for k in 0..2 {
        for (o, d) in originals.iter().zip(views) {
            let (norm, t) = view_target(&d.views[k], o);
            inputs.push(norm);
            targets[k].extend(t.into_iter().map(T::of));
        }
    }
    let input = model.input(&inputs)?;
    let out = model.forward(g, &input, None, drop)?;
    let o1 = g.rows_range(out.output, 0, b)?;
    let o2 = g.rows_range(out.output, b, b)?;
    let [t1, t2] = targets;
    let mse1 = mse_loss(g, o1, &Tensor::new(vec![b, l], t1)?, &weights)?;
    let mse2 = mse_loss(g, o2, &Tensor::new(vec![b, l], t2)?, &weights)?;
    let mut total = g.add(mse1, mse2)?;
    let mut contrastive = None;
    if alpha > 0.0 {
        let states = model.patch_states(g, &out)?;
        let m = b * model.cfg.n_patches();
        let h1 = g.rows_range(states, 0, m)?;
        let h2 = g.rows_range(states, m, m)?;
        let cl = infonce_loss(g, h1, h2, head)?;
        let weighted = g.scale(cl, T::of(alpha));
        total = g.add(total, weighted)?;
        contrastive = Some(cl);
    }
    Ok(LossVars {
        mse1,
        mse2,
        contrastive,
        total,
    })
}

/// Stops after `patience` consecutive epochs without strict improvement.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EarlyStopper {
    pub patience: usize,
    pub best: f64,
    pub bad_epochs: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        EarlyStopper {
            patience,
            best: f64::INFINITY,
            bad_epochs: 0,
        }
    }

    /// Records a validation score; true when it is a new best.
    pub fn update(&mut self, val: f64) -> bool {
        if val < self.best {
            self.best = val;
            self.bad_epochs = 0;
            true
        } else {
            self.bad_epochs += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.bad_epochs >= self.patience.max(1)
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    /// `"step"` or `"epoch"`.
    pub kind: String,
    pub epoch: usize,
    pub step: u64,
    pub mse1: f64,
    pub mse2: f64,
    pub contrastive: f64,
    pub total: f64,
    pub val_mse: Option<f64>,
    pub wall_ms: u64,
}

/// Windows for training and for early-stopping validation.
#[derive(Clone, Debug, Default)]
pub struct TrainData {
    pub train: Vec<SeriesWindow>,
    pub val: Vec<SeriesWindow>,
}

/// Model, contrastive head, optimizer and loop progress. Everything needed
/// to resume a run.
#[derive(Clone, Debug)]
pub struct Trainer<T> {
    pub cfg: TrainConfig,
    pub model: ImputationModel<T>,
    pub head: ContrastiveHead<T>,
    pub opt: Adam<T>,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer steps.
    pub step: u64,
    pub stopper: EarlyStopper,
    pub best: Option<ImputationModel<T>>,
}

impl<T: Real> Trainer<T> {
    pub fn new(model: ImputationModel<T>, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let d = model.cfg.d_model;
        Ok(Trainer {
            opt: Adam::new(cfg.adam()),
            stopper: EarlyStopper::new(cfg.patience),
            head: ContrastiveHead::new(d),
            model,
            cfg,
            epoch: 0,
            step: 0,
            best: None,
        })
    }

    /// Loss parts of a batch without updating anything (no dropout).
    pub fn evaluate(&self, batch: &[SeriesWindow], seed: u64) -> Result<LossBreakdown> {
        let views = dual_mask_batch(batch, self.cfg.rate_range(), seed)?;
        let mut g = Graph::with_exec(self.cfg.exec);
        let lv = composed_loss::<T, ChaCha8Rng>(&mut g, &self.model, &self.head, batch, &views, self.cfg.alpha, None)?;
        Ok(breakdown(&g, &lv))
    }

    /// One optimizer step on `batch` with masks and dropout drawn from
    /// `seed`.
    pub fn train_step(&mut self, batch: &[SeriesWindow], seed: u64) -> Result<LossBreakdown> {
        let views = dual_mask_batch(batch, self.cfg.rate_range(), seed)?;
        let mut g = Graph::with_exec(self.cfg.exec);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, DROP_TAG]));
        let drop = (self.model.cfg.dropout > 0.0).then_some(Dropout {
            rate: self.model.cfg.dropout,
            rng: &mut rng,
        });
        let lv = composed_loss(&mut g, &self.model, &self.head, batch, &views, self.cfg.alpha, drop)?;
        let parts = breakdown(&g, &lv);
        if !parts.total.is_finite() {
            return Err(self.diagnose(batch, &views));
        }
        let grads = g.backward(lv.total)?;
        self.opt.step(&mut [&mut self.model, &mut self.head], &grads)?;
        self.step += 1;
        Ok(parts)
    }

    fn diagnose(&self, batch: &[SeriesWindow], views: &[DualView]) -> Error {
        for (w, v) in batch.iter().zip(views) {
            let mut g = Graph::with_exec(Exec::Sequential);
            let bad = match composed_loss::<T, ChaCha8Rng>(
                &mut g,
                &self.model,
                &self.head,
                std::slice::from_ref(w),
                std::slice::from_ref(v),
                0.0,
                None,
            ) {
                Ok(lv) => !g.value(lv.total).item().f64().is_finite(),
                Err(_) => true,
            };
            if bad {
                return Error::Numeric(format!(
                    "non-finite loss at step {}: window of variable {} starting at {}",
                    self.step + 1,
                    w.variable,
                    w.start
                ));
            }
        }
        Error::Numeric(format!(
            "non-finite loss at step {} (no single window reproduces it)",
            self.step + 1
        ))
    }

    /// Fixed validation masks: one rate and mask per window from the run
    /// seed.
    pub fn validation_masks(&self, val: &[SeriesWindow]) -> Result<Vec<Vec<bool>>> {
        val.iter()
            .map(|w| {
                let s = derive_seed(&[self.cfg.seed, VAL_TAG, w.variable as u64, w.start as u64]);
                random_rate_mask(w.len(), self.cfg.rate_range(), s).map(|(m, _)| m)
            })
            .collect()
    }

    /// Imputation MSE on the artificially hidden, natively observed
    /// validation positions, in normalized units.
    pub fn validation_mse(&self, val: &[SeriesWindow], masks: &[Vec<bool>]) -> Result<f64> {
        let masked: Vec<SeriesWindow> = val.iter().zip(masks).map(|(w, m)| w.masked(m)).collect();
        let imputed = self.model.impute(self.cfg.exec, &masked, None, 64)?;
        let mut sum = MetricSum::default();
        for ((w, m), out) in val.iter().zip(masks).zip(&imputed) {
            score_window(&mut sum, out, w, m, MetricSpace::Normalized);
        }
        Ok(sum.finish()?.mse)
    }

    pub fn save_state(&self, path: &Path) -> Result<()> {
        let mut t = self.model.to_tensors();
        t.extend(self.head.named_tensors());
        t.extend(self.opt.to_tensors());
        t.push(("state.epoch".into(), Tensor::scalar(T::of(self.epoch as f64))));
        t.push(("state.bad_epochs".into(), Tensor::scalar(T::of(self.stopper.bad_epochs as f64))));
        t.push(("state.step".into(), u64_tensor(self.step)));
        t.push(("state.best_val".into(), u64_tensor(self.stopper.best.to_bits())));
        if let Some(b) = &self.best {
            t.extend(b.to_tensors().into_iter().map(|(n, v)| (format!("best.{n}"), v)));
        }
        checkpoint::save(path, &t)
    }

    pub fn load_state(path: &Path, cfg: TrainConfig) -> Result<Self> {
        let t: Vec<(String, Tensor<T>)> = checkpoint::load(path)?;
        let (best, rest): (Vec<_>, Vec<_>) = t.into_iter().partition(|(n, _)| n.starts_with("best."));
        let model = ImputationModel::from_tensors(&rest)?;
        let mut tr = Trainer::new(model, cfg)?;
        tr.head.load_tensors(&rest)?;
        tr.opt = Adam::from_tensors(tr.cfg.adam(), &rest);
        let get = |k: &str| {
            rest.iter()
                .find(|(n, _)| n == k)
                .map(|(_, v)| v)
                .ok_or_else(|| Error::Load(format!("training state lacks `{k}`")))
        };
        tr.epoch = get("state.epoch")?.item().f64().round() as usize;
        tr.stopper.bad_epochs = get("state.bad_epochs")?.item().f64().round() as usize;
        tr.step = tensor_u64(get("state.step")?);
        tr.stopper.best = f64::from_bits(tensor_u64(get("state.best_val")?));
        if !best.is_empty() {
            let b: Vec<_> = best
                .into_iter()
                .map(|(n, v)| (n["best.".len()..].to_string(), v))
                .collect();
            tr.best = Some(ImputationModel::from_tensors(&b)?);
        }
        Ok(tr)
    }
}

fn breakdown<T: Real>(g: &Graph<T>, lv: &LossVars) -> LossBreakdown {
    LossBreakdown {
        mse1: g.value(lv.mse1).item().f64(),
        mse2: g.value(lv.mse2).item().f64(),
        contrastive: lv.contrastive.map_or(0.0, |c| g.value(c).item().f64()),
        total: g.value(lv.total).item().f64(),
    }
}

/// Summary of a finished (or stopped) run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub epochs: usize,
    pub steps: u64,
    pub best_val: f64,
    pub stopped_early: bool,
}

/// Epoch loop with per-epoch validation, early stopping and best-model
/// retention. `log` receives every record; with `state_path` the full
/// trainer state is written atomically after each epoch.
pub fn train_loop<T: Real>(
    tr: &mut Trainer<T>,
    data: &TrainData,
    log: &mut dyn FnMut(&LogRecord) -> Result<()>,
    state_path: Option<&Path>,
) -> Result<TrainSummary> {
    if data.train.is_empty() || data.val.is_empty() {
        return Err(Error::Config(format!(
            "need training and validation windows, got {} and {}",
            data.train.len(),
            data.val.len()
        )));
    }
    let vars: BTreeSet<usize> = data.train.iter().map(|w| w.variable).collect();
    tr.model.train_vars = vars.into_iter().collect();
    let val_masks = tr.validation_masks(&data.val)?;
    let seed = tr.cfg.seed;
    let mut stopped = tr.stopper.should_stop();
    while tr.epoch < tr.cfg.epochs && !stopped {
        let e = tr.epoch as u64;
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(&[seed, SHUFFLE_TAG, e])));
        let mut steps = order.chunks(tr.cfg.batch_size).count();
        if tr.cfg.max_steps_per_epoch > 0 {
            steps = steps.min(tr.cfg.max_steps_per_epoch);
        }
        let mut sums = [0.0; 4];
        for (s, idx) in order.chunks(tr.cfg.batch_size).take(steps).enumerate() {
            let t0 = Instant::now();
            let batch: Vec<SeriesWindow> = idx.iter().map(|&i| data.train[i].clone()).collect();
            let p = tr.train_step(&batch, derive_seed(&[seed, STEP_TAG, e, s as u64]))?;
            for (acc, v) in sums.iter_mut().zip([p.mse1, p.mse2, p.contrastive, p.total]) {
                *acc += v;
            }
            log(&LogRecord {
                kind: "step".into(),
                epoch: tr.epoch,
                step: tr.step,
                mse1: p.mse1,
                mse2: p.mse2,
                contrastive: p.contrastive,
                total: p.total,
                val_mse: None,
                wall_ms: t0.elapsed().as_millis() as u64,
            })?;
        }
        let t0 = Instant::now();
        let val = tr.validation_mse(&data.val, &val_masks)?;
        if tr.stopper.update(val) {
            tr.best = Some(tr.model.clone());
        }
        tr.epoch += 1;
        stopped = tr.stopper.should_stop();
        let n = steps.max(1) as f64;
        log(&LogRecord {
            kind: "epoch".into(),
            epoch: tr.epoch - 1,
            step: tr.step,
            mse1: sums[0] / n,
            mse2: sums[1] / n,
            contrastive: sums[2] / n,
            total: sums[3] / n,
            val_mse: Some(val),
            wall_ms: t0.elapsed().as_millis() as u64,
        })?;
        if let Some(p) = state_path {
            tr.save_state(p)?;
        }
    }
    Ok(TrainSummary {
        epochs: tr.epoch,
        steps: tr.step,
        best_val: tr.stopper.best,
        stopped_early: stopped,
    })
}
