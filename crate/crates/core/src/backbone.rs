//! Pre-norm causal transformer with per-layer prefix key/value slots and
//! the flatten-and-project imputation head.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{revin_denormalize, RevinStats, SeriesWindow};
use crate::embedding::{check_patching, normal, xavier};
use crate::error::{Error, Result};
use crate::numerics::{Graph, Module, Param, Real, Tensor, Var};

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub patch_len: usize,
    pub window_len: usize,
    /// Feed-forward width; 0 means `4 · d_model`.
    pub ff_width: usize,
    pub dropout: f64,
    pub max_seq_len: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            layers: 6,
            heads: 4,
            d_model: 64,
            patch_len: 16,
            window_len: 96,
            ff_width: 0,
            dropout: 0.1,
            max_seq_len: 32,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::Config("layers must be at least 1".into()));
        }
        if self.heads == 0 || self.d_model == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            )));
        }
        let n = check_patching(self.window_len, self.patch_len)?;
        if self.max_seq_len < n + 2 {
            return Err(Error::Config(format!(
                "max_seq_len {} shorter than the {} tokens of one window",
                self.max_seq_len,
                n + 2
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    pub fn n_patches(&self) -> usize {
        self.window_len / self.patch_len
    }

    pub fn ff(&self) -> usize {
        if self.ff_width == 0 {
            4 * self.d_model
        } else {
            self.ff_width
        }
    }
}

#[derive(Clone, Debug)]
pub struct Block<T> {
    pub ln1_g: Param<T>,
    pub ln1_b: Param<T>,
    pub qkv_w: Param<T>,
    pub qkv_b: Param<T>,
    pub proj_w: Param<T>,
    pub proj_b: Param<T>,
    pub ln2_g: Param<T>,
    pub ln2_b: Param<T>,
    pub fc_w: Param<T>,
    pub fc_b: Param<T>,
    pub out_w: Param<T>,
    pub out_b: Param<T>,
}

impl<T: Real> Block<T> {
    fn init<R: Rng>(rng: &mut R, i: usize, d: usize, ff: usize) -> Self {
        let n = |s: &str| format!("backbone.{i}.{s}");
        Block {
            ln1_g: Param::new(n("ln1.g"), Tensor::full(&[d], T::one())),
            ln1_b: Param::new(n("ln1.b"), Tensor::zeros(&[d])),
            qkv_w: Param::new(n("attn.qkv.w"), xavier(rng, d, 3 * d)),
            qkv_b: Param::new(n("attn.qkv.b"), Tensor::zeros(&[3 * d])),
            proj_w: Param::new(n("attn.proj.w"), xavier(rng, d, d)),
            proj_b: Param::new(n("attn.proj.b"), Tensor::zeros(&[d])),
            ln2_g: Param::new(n("ln2.g"), Tensor::full(&[d], T::one())),
            ln2_b: Param::new(n("ln2.b"), Tensor::zeros(&[d])),
            fc_w: Param::new(n("mlp.fc.w"), xavier(rng, d, ff)),
            fc_b: Param::new(n("mlp.fc.b"), Tensor::zeros(&[ff])),
            out_w: Param::new(n("mlp.out.w"), xavier(rng, ff, d)),
            out_b: Param::new(n("mlp.out.b"), Tensor::zeros(&[d])),
        }
    }

    pub fn layer_norms_mut(&mut self) -> [&mut Param<T>; 4] {
        [&mut self.ln1_g, &mut self.ln1_b, &mut self.ln2_g, &mut self.ln2_b]
    }
}

impl<T: Real> Module<T> for Block<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        for p in [
            &self.ln1_g, &self.ln1_b, &self.qkv_w, &self.qkv_b, &self.proj_w, &self.proj_b, &self.ln2_g,
            &self.ln2_b, &self.fc_w, &self.fc_b, &self.out_w, &self.out_b,
        ] {
            f(p);
        }
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        for p in [
            &mut self.ln1_g,
            &mut self.ln1_b,
            &mut self.qkv_w,
            &mut self.qkv_b,
            &mut self.proj_w,
            &mut self.proj_b,
            &mut self.ln2_g,
            &mut self.ln2_b,
            &mut self.fc_w,
            &mut self.fc_b,
            &mut self.out_w,
            &mut self.out_b,
        ] {
            f(p);
        }
    }
}

#[derive(Clone, Debug)]
pub struct Backbone<T> {
    pub cfg: BackboneConfig,
    /// Learned absolute positions, `max_seq_len × D`.
    pub pos: Param<T>,
    pub blocks: Vec<Block<T>>,
    pub lnf_g: Param<T>,
    pub lnf_b: Param<T>,
}

impl<T: Real> Backbone<T> {
    pub fn init<R: Rng>(rng: &mut R, cfg: &BackboneConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        Ok(Backbone {
            pos: Param::new("backbone.pos", normal(rng, &[cfg.max_seq_len, d], 0.02)),
            blocks: (0..cfg.layers).map(|i| Block::init(rng, i, d, cfg.ff())).collect(),
            lnf_g: Param::new("backbone.lnf.g", Tensor::full(&[d], T::one())),
            lnf_b: Param::new("backbone.lnf.b", Tensor::zeros(&[d])),
            cfg: cfg.clone(),
        })
    }

    /// Marks position embeddings and every layer norm trainable (and nothing
    /// else in the backbone).
    pub fn unfreeze_positions_and_norms(&mut self) {
        self.set_trainable(false);
        self.pos.trainable = true;
        self.lnf_g.trainable = true;
        self.lnf_b.trainable = true;
        for b in &mut self.blocks {
            for p in b.layer_norms_mut() {
                p.trainable = true;
            }
        }
    }
}

impl<T: Real> Module<T> for Backbone<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        f(&self.pos);
        self.blocks.visit(f);
        f(&self.lnf_g);
        f(&self.lnf_b);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.pos);
        self.blocks.visit_mut(f);
        f(&mut self.lnf_g);
        f(&mut self.lnf_b);
    }
}

/// One layer's prefix key and value rows in a graph: `[1×D]` shared by the
/// batch or `[B×D]` one per sequence.
#[derive(Clone, Copy, Debug)]
pub struct LayerPrefix {
    pub key: Var,
    pub value: Var,
}

/// Materialized per-layer prefix keys and values.
#[derive(Clone, Debug, PartialEq)]
pub struct PrefixKV<T> {
    /// Per layer, `R × D` with R = 1 or one row per variable.
    pub keys: Vec<Tensor<T>>,
    pub values: Vec<Tensor<T>>,
}

impl<T: Real> PrefixKV<T> {
    pub fn layers(&self) -> usize {
        self.keys.len()
    }

    pub fn to_graph(&self, g: &mut Graph<T>) -> Vec<LayerPrefix> {
        self.keys
            .iter()
            .zip(&self.values)
            .map(|(k, v)| LayerPrefix {
                key: g.constant(k.clone()),
                value: g.constant(v.clone()),
            })
            .collect()
    }
}

/// Dropout source for training passes.
pub struct Dropout<'a, R> {
    pub rate: f64,
    pub rng: &'a mut R,
}

fn dropout<T: Real, R: Rng>(g: &mut Graph<T>, x: Var, d: &mut Option<Dropout<'_, R>>) -> Result<Var> {
    match d {
        Some(d) if d.rate > 0.0 => {
            let keep = T::of(1.0 / (1.0 - d.rate));
            let n = g.value(x).len();
            let m = (0..n)
                .map(|_| if d.rng.random::<f64>() < d.rate { T::zero() } else { keep })
                .collect();
            g.mul_const(x, m)
        }
        _ => Ok(x),
    }
}

/// Final hidden states plus each layer's output.
#[derive(Clone, Debug)]
pub struct HiddenStates {
    pub last: Var,
    pub per_layer: Vec<Var>,
    pub batch: usize,
    pub seq: usize,
}

/// Runs `tokens` (`B·S × D`) through the backbone.
pub fn forward<T: Real, R: Rng>(
    g: &mut Graph<T>,
    bb: &Backbone<T>,
    tokens: Var,
    batch: usize,
    prefix: Option<&[LayerPrefix]>,
    mut drop: Option<Dropout<'_, R>>,
) -> Result<HiddenStates> {
    let cfg = &bb.cfg;
    let rows = g.value(tokens).rows();
    if batch == 0 || !rows.is_multiple_of(batch) {
        return Err(Error::Config(format!("{rows} token rows for batch {batch}")));
    }
    let seq = rows / batch;
    if seq > cfg.max_seq_len {
        return Err(Error::Config(format!(
            "sequence of {seq} tokens exceeds max_seq_len {}",
            cfg.max_seq_len
        )));
    }
    if let Some(p) = prefix {
        if p.len() != cfg.layers {
            return Err(Error::Config(format!(
                "prefix has {} layers, backbone has {}",
                p.len(),
                cfg.layers
            )));
        }
    }
    let pos_table = g.param(&bb.pos);
    let idx: Vec<usize> = (0..batch).flat_map(|_| 0..seq).collect();
    let pos = g.gather_rows(pos_table, &idx)?;
    let mut x = g.add(tokens, pos)?;
    x = dropout(g, x, &mut drop)?;
    let eps = T::of(LN_EPS);
    let d = cfg.d_model;
    let mut per_layer = Vec::with_capacity(cfg.layers);
    for (i, blk) in bb.blocks.iter().enumerate() {
        let (g1, b1) = (g.param(&blk.ln1_g), g.param(&blk.ln1_b));
        let h = g.layer_norm(x, g1, b1, eps)?;
        let (w, b) = (g.param(&blk.qkv_w), g.param(&blk.qkv_b));
        let qkv = g.linear(h, w, b)?;
        let q = g.slice_cols(qkv, 0, d)?;
        let k = g.slice_cols(qkv, d, d)?;
        let v = g.slice_cols(qkv, 2 * d, d)?;
        let pre = prefix.map(|p| (p[i].key, p[i].value));
        let a = g.attention(q, k, v, pre, batch, cfg.heads, true)?;
        let (w, b) = (g.param(&blk.proj_w), g.param(&blk.proj_b));
        let a = g.linear(a, w, b)?;
        let a = dropout(g, a, &mut drop)?;
        x = g.add(x, a)?;

        let (g2, b2) = (g.param(&blk.ln2_g), g.param(&blk.ln2_b));
        let h = g.layer_norm(x, g2, b2, eps)?;
        let (w, b) = (g.param(&blk.fc_w), g.param(&blk.fc_b));
        let h = g.linear(h, w, b)?;
        let h = g.gelu(h);
        let (w, b) = (g.param(&blk.out_w), g.param(&blk.out_b));
        let h = g.linear(h, w, b)?;
        let h = dropout(g, h, &mut drop)?;
        x = g.add(x, h)?;
        per_layer.push(x);
    }
    let (gf, bf) = (g.param(&bb.lnf_g), g.param(&bb.lnf_b));
    let last = g.layer_norm(x, gf, bf, eps)?;
    Ok(HiddenStates {
        last,
        per_layer,
        batch,
        seq,
    })
}

/// Rows `[start, start+count)` of every sequence in `h`, stacked.
pub fn select_tokens<T: Real>(g: &mut Graph<T>, h: &HiddenStates, start: usize, count: usize) -> Result<Var> {
    if start + count > h.seq {
        return Err(Error::Contract(format!(
            "tokens {start}..{} of a {}-token sequence",
            start + count,
            h.seq
        )));
    }
    let idx: Vec<usize> = (0..h.batch)
        .flat_map(|b| (start..start + count).map(move |j| b * h.seq + j))
        .collect();
    g.gather_rows(h.last, &idx)
}

/// Flattens `count` token states per sequence and maps them linearly.
#[derive(Clone, Debug)]
pub struct OutputHead<T> {
    pub w: Param<T>,
    pub b: Param<T>,
}

impl<T: Real> OutputHead<T> {
    pub fn init<R: Rng>(rng: &mut R, name: &str, tokens: usize, d: usize, out: usize) -> Self {
        OutputHead {
            w: Param::new(format!("{name}.w"), xavier(rng, tokens * d, out)),
            b: Param::new(format!("{name}.b"), Tensor::zeros(&[out])),
        }
    }

    pub fn tokens(&self, d: usize) -> usize {
        self.w.value.shape()[0] / d
    }

    pub fn out_len(&self) -> usize {
        self.w.value.cols()
    }

    /// `states`: `B·count × D` → `B × out`.
    pub fn apply(&self, g: &mut Graph<T>, states: Var, batch: usize) -> Result<Var> {
        let flat_len = self.w.value.shape()[0];
        if g.value(states).len() != batch * flat_len {
            return Err(Error::Contract(format!(
                "output head expects {} values per sequence, got {}",
                flat_len,
                g.value(states).len() / batch.max(1)
            )));
        }
        let flat = g.reshape(states, vec![batch, flat_len])?;
        let (w, b) = (g.param(&self.w), g.param(&self.b));
        g.linear(flat, w, b)
    }
}

impl<T: Real> Module<T> for OutputHead<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        f(&self.w);
        f(&self.b);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.w);
        f(&mut self.b);
    }
}

/// Imputation output: drops the domain and global tokens, flattens the `N`
/// patch states and maps them to `L` values.
pub fn output_head<T: Real>(g: &mut Graph<T>, head: &OutputHead<T>, h: &HiddenStates) -> Result<Var> {
    let d = g.value(h.last).cols();
    let n = head.tokens(d);
    if h.seq != n + 2 {
        return Err(Error::Contract(format!(
            "imputation head needs {} tokens per sequence, got {}",
            n + 2,
            h.seq
        )));
    }
    let patches = select_tokens(g, h, 2, n)?;
    head.apply(g, patches, h.batch)
}

/// Denormalizes the model output and keeps every observed input value.
pub fn compose_imputation(window: &SeriesWindow, stats: &RevinStats, output: &[f64]) -> Result<Vec<f64>> {
    if output.len() != window.len() {
        return Err(Error::Contract(format!(
            "output of {} values for a window of {}",
            output.len(),
            window.len()
        )));
    }
    let model = revin_denormalize(output, stats);
    Ok(window
        .values
        .iter()
        .zip(&window.mask)
        .zip(model)
        .map(|((&v, &m), o)| if m { v } else { o })
        .collect())
}
