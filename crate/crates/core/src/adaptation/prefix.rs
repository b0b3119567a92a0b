use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::{LayerPrefix, PrefixKV};
use crate::embedding::{normal, xavier, InputBatch};
use crate::error::{Error, Result};
use crate::model::{ImputationModel, PrefixProvider};
use crate::numerics::checkpoint::{tensor_u64, u64_tensor};
use crate::numerics::{Graph, Module, Param, Real, Tensor, Var};

pub const DEFAULT_BETA: f64 = 0.01;

/// Continuous prompt plus a domain-transfer network. The per-layer prefix
/// is `prompt + β · transfer(k)`, rows `2l` (key) and `2l + 1` (value) for
/// layer `l`.
#[derive(Clone, Debug)]
pub struct PrefixBundle<T> {
    /// `2·layers × D`.
    pub prompt: Param<T>,
    /// Domain embedding fed to the transfer network, `1 × D`. Frozen unless
    /// configured otherwise.
    pub domain: Param<T>,
    pub fc_w: Param<T>,
    pub fc_b: Param<T>,
    pub out_w: Param<T>,
    pub out_b: Param<T>,
    pub beta: f64,
    pub layers: usize,
}

impl<T: Real> PrefixBundle<T> {
    /// Fresh bundle whose domain input is a copy of `k`.
    pub fn init<R: Rng>(rng: &mut R, layers: usize, k: &Tensor<T>, beta: f64) -> Result<Self> {
        let d = k.len();
        if layers == 0 || d == 0 {
            return Err(Error::Config("prefix needs at least one layer and width".into()));
        }
        let mut domain = Param::new("prefix.domain", k.clone().reshaped(vec![1, d])?);
        domain.trainable = false;
        Ok(PrefixBundle {
            prompt: Param::new("prefix.prompt", normal(rng, &[2 * layers, d], 0.02)),
            domain,
            fc_w: Param::new("prefix.transfer.fc.w", xavier(rng, d, d)),
            fc_b: Param::new("prefix.transfer.fc.b", Tensor::zeros(&[d])),
            out_w: Param::new("prefix.transfer.out.w", xavier(rng, d, 2 * layers * d)),
            out_b: Param::new("prefix.transfer.out.b", Tensor::zeros(&[2 * layers * d])),
            beta,
            layers,
        })
    }

    /// Bundle for `model`, seeded with the domain embedding of `label` (the
    /// shared one when the model has no domain table).
    pub fn for_model<R: Rng>(rng: &mut R, model: &ImputationModel<T>, label: Option<&str>, beta: f64) -> Result<Self> {
        let row = model.embedding.domain_index(label)?;
        let d = model.cfg.d_model;
        let k = Tensor::new(vec![1, d], model.embedding.domain.value.row(row).to_vec())?;
        Self::init(rng, model.cfg.layers, &k, beta)
    }

    pub fn width(&self) -> usize {
        self.prompt.value.cols()
    }

    /// Prefix rows `2·layers × D` as a graph node.
    pub fn combined(&self, g: &mut Graph<T>) -> Result<Var> {
        let k = g.param(&self.domain);
        let khat = domain_transfer_graph(g, self, k)?;
        let p = g.param(&self.prompt);
        combine_graph(g, p, khat, self.beta)
    }

    /// Materialized per-layer keys and values.
    pub fn prefix_kv(&self) -> Result<PrefixKV<T>> {
        let mut g = Graph::new();
        let c = self.combined(&mut g)?;
        split_layers(g.value(c), self.layers)
    }

    pub fn to_tensors(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = vec![
            ("meta.prefix.layers".to_string(), Tensor::scalar(T::of(self.layers as f64))),
            ("meta.prefix.beta".to_string(), u64_tensor(self.beta.to_bits())),
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
        let layers = get("meta.prefix.layers")?.item().f64().round() as usize;
        let beta = f64::from_bits(tensor_u64(get("meta.prefix.beta")?));
        let k = get("prefix.domain")?.clone();
        let mut b = Self::init(&mut ChaCha8Rng::seed_from_u64(0), layers, &k, beta)?;
        b.load_tensors(t)?;
        Ok(b)
    }

    /// Fails unless the bundle fits `model`'s backbone.
    pub fn check_fits(&self, model: &ImputationModel<T>) -> Result<()> {
        if self.layers != model.cfg.layers || self.width() != model.cfg.d_model {
            return Err(Error::Load(format!(
                "prefix for {} layers × {} wide, backbone has {} × {}",
                self.layers,
                self.width(),
                model.cfg.layers,
                model.cfg.d_model
            )));
        }
        Ok(())
    }
}

impl<T: Real> Module<T> for PrefixBundle<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        for p in [&self.prompt, &self.domain, &self.fc_w, &self.fc_b, &self.out_w, &self.out_b] {
            f(p);
        }
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        for p in [
            &mut self.prompt,
            &mut self.domain,
            &mut self.fc_w,
            &mut self.fc_b,
            &mut self.out_w,
            &mut self.out_b,
        ] {
            f(p);
        }
    }
}

impl<T: Real> PrefixProvider<T> for PrefixBundle<T> {
    fn prefixes(&self, g: &mut Graph<T>, _model: &ImputationModel<T>, _input: &InputBatch<T>) -> Result<Vec<LayerPrefix>> {
        let c = self.combined(g)?;
        graph_layers(g, c, self.layers)
    }
}

/// Two-layer perceptron `k → 2·layers × D` (GELU hidden layer of width D).
pub fn domain_transfer_graph<T: Real>(g: &mut Graph<T>, b: &PrefixBundle<T>, k: Var) -> Result<Var> {
    let (w1, b1) = (g.param(&b.fc_w), g.param(&b.fc_b));
    let h = g.linear(k, w1, b1)?;
    let h = g.gelu(h);
    let (w2, b2) = (g.param(&b.out_w), g.param(&b.out_b));
    let o = g.linear(h, w2, b2)?;
    g.reshape(o, vec![2 * b.layers, b.width()])
}

/// Evaluates the transfer network on `k` (`1 × D`).
pub fn domain_transfer<T: Real>(b: &PrefixBundle<T>, k: &Tensor<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let kv = g.constant(k.clone().reshaped(vec![1, k.len()])?);
    let o = domain_transfer_graph(&mut g, b, kv)?;
    Ok(g.value(o).clone())
}

fn combine_graph<T: Real>(g: &mut Graph<T>, prompt: Var, khat: Var, beta: f64) -> Result<Var> {
    if g.shape(prompt) != g.shape(khat) {
        return Err(Error::Config(format!(
            "prompt shape {:?} differs from transfer output {:?}",
            g.shape(prompt),
            g.shape(khat)
        )));
    }
    let s = g.scale(khat, T::of(beta));
    g.add(prompt, s)
}

/// `prompt + β·khat`, both `2·layers × D`, split into per-layer keys and
/// values.
pub fn combine_prefix<T: Real>(prompt: &Tensor<T>, khat: &Tensor<T>, beta: f64) -> Result<PrefixKV<T>> {
    if prompt.shape() != khat.shape() || prompt.rank() != 2 || !prompt.shape()[0].is_multiple_of(2) {
        return Err(Error::Config(format!(
            "prompt shape {:?} and transfer output {:?} must be equal and 2·layers × D",
            prompt.shape(),
            khat.shape()
        )));
    }
    let beta = T::of(beta);
    let data = prompt.data().iter().zip(khat.data()).map(|(&p, &k)| p + k * beta).collect();
    let c = Tensor::new(prompt.shape().to_vec(), data)?;
    split_layers(&c, prompt.shape()[0] / 2)
}

fn split_layers<T: Real>(c: &Tensor<T>, layers: usize) -> Result<PrefixKV<T>> {
    let d = c.cols();
    let row = |i: usize| Tensor::new(vec![1, d], c.row(i).to_vec());
    let mut keys = Vec::with_capacity(layers);
    let mut values = Vec::with_capacity(layers);
    for l in 0..layers {
        keys.push(row(2 * l)?);
        values.push(row(2 * l + 1)?);
    }
    Ok(PrefixKV { keys, values })
}

fn graph_layers<T: Real>(g: &mut Graph<T>, c: Var, layers: usize) -> Result<Vec<LayerPrefix>> {
    (0..layers)
        .map(|l| {
            Ok(LayerPrefix {
                key: g.rows_range(c, 2 * l, 1)?,
                value: g.rows_range(c, 2 * l + 1, 1)?,
            })
        })
        .collect()
}
