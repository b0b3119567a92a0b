use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::{LayerPrefix, LN_EPS};
use crate::embedding::{xavier, InputBatch};
use crate::error::{Error, Result};
use crate::model::{ImputationModel, PrefixProvider};
use crate::numerics::{Graph, Module, Param, Real, Tensor, Var};

/// One non-causal pre-norm attention layer over the variable tokens.
#[derive(Clone, Debug)]
pub struct LightLayer<T> {
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

impl<T: Real> LightLayer<T> {
    fn init<R: Rng>(rng: &mut R, i: usize, d: usize) -> Self {
        let n = |s: &str| format!("intervar.{i}.{s}");
        LightLayer {
            ln1_g: Param::new(n("ln1.g"), Tensor::full(&[d], T::one())),
            ln1_b: Param::new(n("ln1.b"), Tensor::zeros(&[d])),
            qkv_w: Param::new(n("attn.qkv.w"), xavier(rng, d, 3 * d)),
            qkv_b: Param::new(n("attn.qkv.b"), Tensor::zeros(&[3 * d])),
            proj_w: Param::new(n("attn.proj.w"), xavier(rng, d, d)),
            proj_b: Param::new(n("attn.proj.b"), Tensor::zeros(&[d])),
            ln2_g: Param::new(n("ln2.g"), Tensor::full(&[d], T::one())),
            ln2_b: Param::new(n("ln2.b"), Tensor::zeros(&[d])),
            fc_w: Param::new(n("mlp.fc.w"), xavier(rng, d, 2 * d)),
            fc_b: Param::new(n("mlp.fc.b"), Tensor::zeros(&[2 * d])),
            out_w: Param::new(n("mlp.out.w"), xavier(rng, 2 * d, d)),
            out_b: Param::new(n("mlp.out.b"), Tensor::zeros(&[d])),
        }
    }

    fn forward(&self, g: &mut Graph<T>, x: Var, heads: usize) -> Result<Var> {
        let eps = T::of(LN_EPS);
        let d = g.value(x).cols();
        let (a, b) = (g.param(&self.ln1_g), g.param(&self.ln1_b));
        let h = g.layer_norm(x, a, b, eps)?;
        let (w, b) = (g.param(&self.qkv_w), g.param(&self.qkv_b));
        let qkv = g.linear(h, w, b)?;
        let q = g.slice_cols(qkv, 0, d)?;
        let k = g.slice_cols(qkv, d, d)?;
        let v = g.slice_cols(qkv, 2 * d, d)?;
        let att = g.attention(q, k, v, None, 1, heads, false)?;
        let (w, b) = (g.param(&self.proj_w), g.param(&self.proj_b));
        let att = g.linear(att, w, b)?;
        let x = g.add(x, att)?;
        let (a, b) = (g.param(&self.ln2_g), g.param(&self.ln2_b));
        let h = g.layer_norm(x, a, b, eps)?;
        let (w, b) = (g.param(&self.fc_w), g.param(&self.fc_b));
        let h = g.linear(h, w, b)?;
        let h = g.gelu(h);
        let (w, b) = (g.param(&self.out_w), g.param(&self.out_b));
        let h = g.linear(h, w, b)?;
        g.add(x, h)
    }
}

impl<T: Real> Module<T> for LightLayer<T> {
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

/// Generates a per-variable prefix from all variables of one time window:
/// each variable's window is tokenized, mixed by attention across
/// variables (no positional encoding, so the map is permutation
/// equivariant), and every layer's states are mapped to that backbone
/// layer's key and value.
#[derive(Clone, Debug)]
pub struct InterVarPrefixNet<T> {
    pub tok_w: Param<T>,
    pub tok_b: Param<T>,
    pub layers: Vec<LightLayer<T>>,
    /// Per layer `d_light → 2·D` (key columns first).
    pub maps: Vec<(Param<T>, Param<T>)>,
    pub heads: usize,
    pub d_model: usize,
}

impl<T: Real> InterVarPrefixNet<T> {
    pub fn init(window_len: usize, d_light: usize, heads: usize, layers: usize, d_model: usize, seed: u64) -> Result<Self> {
        if d_light == 0 || heads == 0 || !d_light.is_multiple_of(heads) || layers == 0 {
            return Err(Error::Config(format!(
                "inter-variable width {d_light} must be a positive multiple of {heads} heads, layers {layers} ≥ 1"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tok_w = Param::new("intervar.tok.w", xavier(&mut rng, window_len, d_light));
        let tok_b = Param::new("intervar.tok.b", Tensor::zeros(&[d_light]));
        let light = (0..layers).map(|i| LightLayer::init(&mut rng, i, d_light)).collect();
        let maps = (0..layers)
            .map(|i| {
                (
                    Param::new(format!("intervar.map.{i}.w"), xavier(&mut rng, d_light, 2 * d_model)),
                    Param::new(format!("intervar.map.{i}.b"), Tensor::zeros(&[2 * d_model])),
                )
            })
            .collect();
        Ok(InterVarPrefixNet {
            tok_w,
            tok_b,
            layers: light,
            maps,
            heads,
            d_model,
        })
    }

    /// Sized for `model`; `d_light = 0` means `D / 4`.
    pub fn for_model(model: &ImputationModel<T>, d_light: usize, heads: usize, seed: u64) -> Result<Self> {
        let d = model.cfg.d_model;
        let dl = if d_light == 0 { (d / 4).max(1) } else { d_light };
        Self::init(model.cfg.window_len, dl, heads, model.cfg.layers, d, seed)
    }

    pub fn d_light(&self) -> usize {
        self.tok_w.value.cols()
    }

    pub fn window_len(&self) -> usize {
        self.tok_w.value.shape()[0]
    }

    pub fn to_tensors(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = vec![
            ("meta.intervar.heads".to_string(), Tensor::scalar(T::of(self.heads as f64))),
            ("meta.intervar.layers".to_string(), Tensor::scalar(T::of(self.layers.len() as f64))),
            ("meta.intervar.d_model".to_string(), Tensor::scalar(T::of(self.d_model as f64))),
        ];
        out.extend(self.named_tensors());
        out
    }

    pub fn from_tensors(t: &[(String, Tensor<T>)]) -> Result<Self> {
        let get = |k: &str| {
            t.iter()
                .find(|(n, _)| n == k)
                .map(|(_, v)| v)
                .ok_or_else(|| Error::Load(format!("prefix file lacks `{k}`")))
        };
        let int = |k: &str| get(k).map(|v| v.item().f64().round() as usize);
        let tok = get("intervar.tok.w")?;
        let mut net = Self::init(
            tok.shape()[0],
            tok.cols(),
            int("meta.intervar.heads")?,
            int("meta.intervar.layers")?,
            int("meta.intervar.d_model")?,
            0,
        )?;
        net.load_tensors(t)?;
        Ok(net)
    }

    /// Per-layer keys and values for a `V × L` block, each `V × D`.
    pub fn prefix_graph(&self, g: &mut Graph<T>, block: Var) -> Result<Vec<LayerPrefix>> {
        if g.value(block).cols() != self.window_len() {
            return Err(Error::Dimension(format!(
                "block windows of length {}, prefix net expects {}",
                g.value(block).cols(),
                self.window_len()
            )));
        }
        let (w, b) = (g.param(&self.tok_w), g.param(&self.tok_b));
        let mut x = g.linear(block, w, b)?;
        let mut out = Vec::with_capacity(self.layers.len());
        for (layer, (mw, mb)) in self.layers.iter().zip(&self.maps) {
            x = layer.forward(g, x, self.heads)?;
            let (w, b) = (g.param(mw), g.param(mb));
            let kv = g.linear(x, w, b)?;
            out.push(LayerPrefix {
                key: g.slice_cols(kv, 0, self.d_model)?,
                value: g.slice_cols(kv, self.d_model, self.d_model)?,
            });
        }
        Ok(out)
    }
}

/// Materialized per-layer, per-variable keys and values for a normalized
/// `V × L` block (hidden points already zero).
pub fn intervar_prefix<T: Real>(net: &InterVarPrefixNet<T>, block: &Tensor<T>) -> Result<(Vec<Tensor<T>>, Vec<Tensor<T>>)> {
    let mut g = Graph::new();
    let b = g.constant(block.clone());
    let pre = net.prefix_graph(&mut g, b)?;
    Ok(pre
        .iter()
        .map(|p| (g.value(p.key).clone(), g.value(p.value).clone()))
        .unzip())
}

impl<T: Real> Module<T> for InterVarPrefixNet<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        f(&self.tok_w);
        f(&self.tok_b);
        self.layers.visit(f);
        for (w, b) in &self.maps {
            f(w);
            f(b);
        }
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.tok_w);
        f(&mut self.tok_b);
        self.layers.visit_mut(f);
        for (w, b) in &mut self.maps {
            f(w);
            f(b);
        }
    }
}

impl<T: Real> PrefixProvider<T> for InterVarPrefixNet<T> {
    fn prefixes(&self, g: &mut Graph<T>, _model: &ImputationModel<T>, input: &InputBatch<T>) -> Result<Vec<LayerPrefix>> {
        let block = g.constant(input.values.clone());
        self.prefix_graph(g, block)
    }

    fn needs_aligned_block(&self) -> bool {
        true
    }
}
