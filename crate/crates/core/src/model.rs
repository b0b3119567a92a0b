//! The assembled imputation model: embeddings, backbone and output head,
//! plus checkpointing and batched inference.

use std::path::Path;

use rand::rngs::ThreadRng;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::{self, Backbone, BackboneConfig, Dropout, HiddenStates, LayerPrefix, OutputHead};
use crate::data::{revin_normalize, SeriesWindow};
use crate::embedding::{embed_tokens, EmbeddingParams, InputBatch};
use crate::error::{Error, Result};
use crate::numerics::{checkpoint, Graph, Module, Param, Real, Tensor, Var};
use crate::parallel::Exec;

/// Supplies per-layer prefix keys/values for a batch.
pub trait PrefixProvider<T: Real>: Sync {
    fn prefixes(&self, g: &mut Graph<T>, model: &ImputationModel<T>, input: &InputBatch<T>) -> Result<Vec<LayerPrefix>>;

    /// True when a batch must be exactly the variables of one time window.
    fn needs_aligned_block(&self) -> bool {
        false
    }
}

#[derive(Clone, Debug)]
pub struct ImputationModel<T> {
    pub cfg: BackboneConfig,
    pub embedding: EmbeddingParams<T>,
    pub backbone: Backbone<T>,
    pub head: OutputHead<T>,
    /// Variable ids the model was trained on.
    pub train_vars: Vec<usize>,
}

/// Graph handles produced by one forward pass.
pub struct ForwardOut {
    /// `B × L` normalized reconstruction.
    pub output: Var,
    pub hidden: HiddenStates,
}

impl<T: Real> ImputationModel<T> {
    /// Random initialization. `domains` empty means one shared domain
    /// embedding.
    pub fn init(cfg: &BackboneConfig, domains: Vec<String>, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let embedding = EmbeddingParams::init(&mut rng, cfg.patch_len, cfg.d_model, domains);
        let backbone = Backbone::init(&mut rng, cfg)?;
        let head = OutputHead::init(&mut rng, "head", cfg.n_patches(), cfg.d_model, cfg.window_len);
        Ok(ImputationModel {
            cfg: cfg.clone(),
            embedding,
            backbone,
            head,
            train_vars: Vec::new(),
        })
    }

    pub fn input(&self, windows: &[SeriesWindow]) -> Result<InputBatch<T>> {
        InputBatch::new(windows, &self.embedding)
    }

    pub fn forward<R: Rng>(
        &self,
        g: &mut Graph<T>,
        input: &InputBatch<T>,
        prefix: Option<&[LayerPrefix]>,
        drop: Option<Dropout<'_, R>>,
    ) -> Result<ForwardOut> {
        if input.window_len != self.cfg.window_len {
            return Err(Error::Config(format!(
                "window length {} but the model expects {}",
                input.window_len, self.cfg.window_len
            )));
        }
        let tokens = embed_tokens(g, &self.embedding, input, None)?;
        let hidden = backbone::forward(g, &self.backbone, tokens, input.batch, prefix, drop)?;
        let output = backbone::output_head(g, &self.head, &hidden)?;
        Ok(ForwardOut { output, hidden })
    }

    /// Patch-token states, `B·N × D`.
    pub fn patch_states(&self, g: &mut Graph<T>, out: &ForwardOut) -> Result<Var> {
        backbone::select_tokens(g, &out.hidden, 2, self.cfg.n_patches())
    }

    /// Normalized reconstructions for one batch of normalized windows.
    pub fn reconstruct(
        &self,
        exec: Exec,
        windows: &[SeriesWindow],
        prefix: Option<&dyn PrefixProvider<T>>,
    ) -> Result<Vec<Vec<f64>>> {
        let input = self.input(windows)?;
        let mut g = Graph::with_exec(exec);
        let pre = match prefix {
            Some(p) => Some(p.prefixes(&mut g, self, &input)?),
            None => None,
        };
        let out = self.forward::<ThreadRng>(&mut g, &input, pre.as_deref(), None)?;
        let o = g.value(out.output);
        if !o.is_finite() {
            return Err(Error::Numeric("non-finite model output".into()));
        }
        let l = self.cfg.window_len;
        Ok(o.data().chunks(l).map(|c| c.iter().map(|v| v.f64()).collect()).collect())
    }

    /// Imputes raw windows: normalize, reconstruct, denormalize, keep
    /// observed values. Batches of `chunk` windows are independent and run
    /// under `exec`.
    pub fn impute(
        &self,
        exec: Exec,
        windows: &[SeriesWindow],
        prefix: Option<&dyn PrefixProvider<T>>,
        chunk: usize,
    ) -> Result<Vec<Vec<f64>>> {
        let chunks: Vec<&[SeriesWindow]> = windows.chunks(chunk.max(1)).collect();
        let results = exec.map(&chunks, |ws| -> Result<Vec<Vec<f64>>> {
            let (norm, stats): (Vec<_>, Vec<_>) = ws.iter().map(revin_normalize).unzip();
            let recon = self.reconstruct(Exec::Sequential, &norm, prefix)?;
            ws.iter()
                .zip(&stats)
                .zip(&recon)
                .map(|((w, s), r)| backbone::compose_imputation(w, s, r))
                .collect()
        });
        let mut out = Vec::with_capacity(windows.len());
        for r in results {
            out.extend(r?);
        }
        Ok(out)
    }

    pub fn to_tensors(&self) -> Vec<(String, Tensor<T>)> {
        let c = &self.cfg;
        let mut out: Vec<(String, Tensor<T>)> = [
            ("layers", c.layers as f64),
            ("heads", c.heads as f64),
            ("d_model", c.d_model as f64),
            ("patch_len", c.patch_len as f64),
            ("window_len", c.window_len as f64),
            ("ff_width", c.ff() as f64),
            ("max_seq_len", c.max_seq_len as f64),
            ("dropout", c.dropout),
        ]
        .iter()
        .map(|(k, v)| (format!("meta.{k}"), Tensor::scalar(T::of(*v))))
        .collect();
        for (i, l) in self.embedding.labels.iter().enumerate() {
            out.push((format!("meta.domain.{l}"), Tensor::scalar(T::of(i as f64))));
        }
        if !self.train_vars.is_empty() {
            let v: Vec<f64> = self.train_vars.iter().map(|&x| x as f64).collect();
            out.push(("meta.train_vars".into(), Tensor::vector(&v)));
        }
        out.extend(self.named_tensors());
        out
    }

    pub fn from_tensors(tensors: &[(String, Tensor<T>)]) -> Result<Self> {
        let meta = |k: &str| -> Result<f64> {
            tensors
                .iter()
                .find(|(n, _)| n == &format!("meta.{k}"))
                .map(|(_, t)| t.item().f64())
                .ok_or_else(|| Error::Load(format!("checkpoint lacks field `{k}`")))
        };
        let int = |k: &str| meta(k).map(|v| v.round() as usize);
        let cfg = BackboneConfig {
            layers: int("layers")?,
            heads: int("heads")?,
            d_model: int("d_model")?,
            patch_len: int("patch_len")?,
            window_len: int("window_len")?,
            ff_width: int("ff_width")?,
            max_seq_len: int("max_seq_len")?,
            dropout: meta("dropout")?,
        };
        cfg.validate().map_err(|e| Error::Load(format!("checkpoint config: {e}")))?;
        let mut labels: Vec<(usize, String)> = tensors
            .iter()
            .filter_map(|(n, t)| {
                n.strip_prefix("meta.domain.")
                    .map(|l| (t.item().f64().round() as usize, l.to_string()))
            })
            .collect();
        labels.sort();
        let labels = labels.into_iter().map(|(_, l)| l).collect();
        let mut model = Self::init(&cfg, labels, 0)?;
        model.load_tensors(tensors)?;
        model.train_vars = tensors
            .iter()
            .find(|(n, _)| n == "meta.train_vars")
            .map(|(_, t)| t.data().iter().map(|v| v.f64().round() as usize).collect())
            .unwrap_or_default();
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.to_tensors())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_tensors(&checkpoint::load(path)?)
    }

    /// Fails naming the first field where `expected` disagrees with the
    /// loaded architecture.
    pub fn check_config(&self, expected: &BackboneConfig) -> Result<()> {
        let a = &self.cfg;
        let pairs = [
            ("layers", a.layers, expected.layers),
            ("heads", a.heads, expected.heads),
            ("d_model", a.d_model, expected.d_model),
            ("patch_len", a.patch_len, expected.patch_len),
            ("window_len", a.window_len, expected.window_len),
            ("ff_width", a.ff(), expected.ff()),
            ("max_seq_len", a.max_seq_len, expected.max_seq_len),
        ];
        for (name, have, want) in pairs {
            if have != want {
                return Err(Error::Load(format!(
                    "field `{name}`: checkpoint has {have}, configuration expects {want}"
                )));
            }
        }
        Ok(())
    }
}

impl<T: Real> Module<T> for ImputationModel<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.embedding.visit(f);
        self.backbone.visit(f);
        self.head.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.embedding.visit_mut(f);
        self.backbone.visit_mut(f);
        self.head.visit_mut(f);
    }
}
