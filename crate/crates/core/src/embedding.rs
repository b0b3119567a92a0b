//! Patch tokens with statistical, missing-rate and domain embeddings.
//!
//! A normalized window of length `L` becomes `N = L / P` patch tokens. Each
//! patch token is the sum of a linear projection of its values, a projection
//! of its statistics `(min, median, max, slope)`, and the missing embedding
//! scaled by the patch's missing ratio. The sequence handed to the backbone
//! is `[domain, global statistics, patch_1 .. patch_N]`.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::data::SeriesWindow;
use crate::error::{Error, Result};
use crate::numerics::{Graph, Module, Param, Real, Tensor, Var};

pub const STATS_DIM: usize = 4;

/// A window cut into `n` non-overlapping patches of `p` points.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSet {
    pub n: usize,
    pub p: usize,
    /// Row-major `n × p`.
    pub values: Vec<f64>,
    pub masks: Vec<bool>,
    /// Missing ratio per patch.
    pub ratios: Vec<f64>,
}

impl PatchSet {
    pub fn patch(&self, j: usize) -> (&[f64], &[bool]) {
        (
            &self.values[j * self.p..(j + 1) * self.p],
            &self.masks[j * self.p..(j + 1) * self.p],
        )
    }
}

pub fn check_patching(len: usize, p: usize) -> Result<usize> {
    if p == 0 || len == 0 || !len.is_multiple_of(p) {
        return Err(Error::Config(format!(
            "window length {len} is not divisible by patch length {p}"
        )));
    }
    Ok(len / p)
}

pub fn patchify(values: &[f64], mask: &[bool], p: usize) -> Result<PatchSet> {
    let n = check_patching(values.len(), p)?;
    let ratios = mask
        .chunks(p)
        .map(|m| 1.0 - m.iter().filter(|x| **x).count() as f64 / p as f64)
        .collect();
    Ok(PatchSet {
        n,
        p,
        values: values.to_vec(),
        masks: mask.to_vec(),
        ratios,
    })
}

/// `(min, median, max, slope)` over observed points. The slope is the
/// least-squares fit against local indices `0..len`. No observed point gives
/// zeros; a single one gives slope 0.
pub fn patch_stats(values: &[f64], mask: &[bool]) -> [f64; STATS_DIM] {
    let pts: Vec<(f64, f64)> = values
        .iter()
        .zip(mask)
        .enumerate()
        .filter(|(_, (_, m))| **m)
        .map(|(i, (v, _))| (i as f64, *v))
        .collect();
    if pts.is_empty() {
        return [0.0; STATS_DIM];
    }
    let mut sorted: Vec<f64> = pts.iter().map(|p| p.1).collect();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    };
    let slope = if n < 2 {
        0.0
    } else {
        // Normal equations on raw sums: exact whenever the sums are
        // representable, e.g. for integer-valued data.
        let nf = n as f64;
        let sx: f64 = pts.iter().map(|p| p.0).sum();
        let sy: f64 = pts.iter().map(|p| p.1).sum();
        let sxy: f64 = pts.iter().map(|p| p.0 * p.1).sum();
        let sxx: f64 = pts.iter().map(|p| p.0 * p.0).sum();
        (nf * sxy - sx * sy) / (nf * sxx - sx * sx)
    };
    [sorted[0], median, sorted[n - 1], slope]
}

/// Same contract as [`patch_stats`] over a whole window.
pub fn series_stats(values: &[f64], mask: &[bool]) -> [f64; STATS_DIM] {
    patch_stats(values, mask)
}

/// Learned embedding weights.
#[derive(Clone, Debug)]
pub struct EmbeddingParams<T> {
    pub patch_w: Param<T>,
    pub patch_b: Param<T>,
    pub stats_w: Param<T>,
    pub stats_b: Param<T>,
    /// Missing embedding, `1 × D`.
    pub missing: Param<T>,
    /// Domain embeddings, one row per label; a single shared row when
    /// `labels` is empty.
    pub domain: Param<T>,
    pub labels: Vec<String>,
}

pub fn xavier<T: Real, R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> Tensor<T> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| T::of(rng.random_range(-a..a))).collect();
    Tensor::new(vec![fan_in, fan_out], data).expect("positive dims")
}

pub fn normal<T: Real, R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> Tensor<T> {
    let d = Normal::new(0.0, std).expect("std > 0");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| T::of(d.sample(rng))).collect()).expect("positive dims")
}

impl<T: Real> EmbeddingParams<T> {
    pub fn init<R: Rng>(rng: &mut R, patch_len: usize, d: usize, labels: Vec<String>) -> Self {
        let rows = labels.len().max(1);
        EmbeddingParams {
            patch_w: Param::new("embed.patch.w", xavier(rng, patch_len, d)),
            patch_b: Param::new("embed.patch.b", Tensor::zeros(&[d])),
            stats_w: Param::new("embed.stats.w", xavier(rng, STATS_DIM, d)),
            stats_b: Param::new("embed.stats.b", Tensor::zeros(&[d])),
            missing: Param::new("embed.missing", normal(rng, &[1, d], 0.02)),
            domain: Param::new("embed.domain", normal(rng, &[rows, d], 0.02)),
            labels,
        }
    }

    pub fn width(&self) -> usize {
        self.patch_w.value.cols()
    }

    pub fn patch_len(&self) -> usize {
        self.patch_w.value.shape()[0]
    }

    /// Row of the domain table for `label`.
    pub fn domain_index(&self, label: Option<&str>) -> Result<usize> {
        if self.labels.is_empty() {
            return Ok(0);
        }
        let label = label.ok_or_else(|| Error::Lookup("per-domain embeddings need a domain label".into()))?;
        self.labels
            .iter()
            .position(|l| l == label)
            .ok_or_else(|| Error::Lookup(format!("no domain embedding for `{label}`")))
    }
}

impl<T: Real> Module<T> for EmbeddingParams<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        for p in [&self.patch_w, &self.patch_b, &self.stats_w, &self.stats_b, &self.missing, &self.domain] {
            f(p);
        }
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        for p in [
            &mut self.patch_w,
            &mut self.patch_b,
            &mut self.stats_w,
            &mut self.stats_b,
            &mut self.missing,
            &mut self.domain,
        ] {
            f(p);
        }
    }
}

/// Constant inputs for embedding a batch of normalized windows.
#[derive(Clone, Debug)]
pub struct InputBatch<T> {
    pub batch: usize,
    pub n_patches: usize,
    pub window_len: usize,
    /// `B·N × P`
    pub patches: Tensor<T>,
    /// `B·N × 4`
    pub patch_stats: Tensor<T>,
    /// `B·N × 1`
    pub ratios: Tensor<T>,
    /// `B × 4`
    pub global_stats: Tensor<T>,
    /// `B × L`, normalized values with hidden points zeroed.
    pub values: Tensor<T>,
    pub domain_rows: Vec<usize>,
}

impl<T: Real> InputBatch<T> {
    /// `windows` must already be normalized.
    pub fn new(windows: &[SeriesWindow], params: &EmbeddingParams<T>) -> Result<Self> {
        let p = params.patch_len();
        let first = windows
            .first()
            .ok_or_else(|| Error::Contract("empty batch".into()))?;
        let l = first.len();
        let n = check_patching(l, p)?;
        let b = windows.len();
        let mut patches = Vec::with_capacity(b * l);
        let mut pstats = Vec::with_capacity(b * n * STATS_DIM);
        let mut ratios = Vec::with_capacity(b * n);
        let mut gstats = Vec::with_capacity(b * STATS_DIM);
        let mut values = Vec::with_capacity(b * l);
        let mut domain_rows = Vec::with_capacity(b);
        for w in windows {
            if w.len() != l {
                return Err(Error::Dimension(format!("window of length {} in a batch of {l}", w.len())));
            }
            let ps = patchify(&w.values, &w.mask, p)?;
            for j in 0..n {
                let (v, m) = ps.patch(j);
                patches.extend(v.iter().zip(m).map(|(&x, &o)| T::of(if o { x } else { 0.0 })));
                pstats.extend(patch_stats(v, m).iter().map(|&s| T::of(s)));
                ratios.push(T::of(ps.ratios[j]));
            }
            gstats.extend(series_stats(&w.values, &w.mask).iter().map(|&s| T::of(s)));
            values.extend(w.values.iter().zip(&w.mask).map(|(&x, &o)| T::of(if o { x } else { 0.0 })));
            let label = (!w.domain.is_empty()).then_some(w.domain.as_str());
            domain_rows.push(params.domain_index(label)?);
        }
        Ok(InputBatch {
            batch: b,
            n_patches: n,
            window_len: l,
            patches: Tensor::new(vec![b * n, p], patches)?,
            patch_stats: Tensor::new(vec![b * n, STATS_DIM], pstats)?,
            ratios: Tensor::new(vec![b * n, 1], ratios)?,
            global_stats: Tensor::new(vec![b, STATS_DIM], gstats)?,
            values: Tensor::new(vec![b, l], values)?,
            domain_rows,
        })
    }

    /// Tokens per window, `N + 2`.
    pub fn seq_len(&self) -> usize {
        self.n_patches + 2
    }
}

/// Patch tokens, `B·N × D`: values projection + statistics projection +
/// ratio × missing embedding.
pub fn patch_tokens<T: Real>(g: &mut Graph<T>, params: &EmbeddingParams<T>, input: &InputBatch<T>) -> Result<Var> {
    let pw = g.param(&params.patch_w);
    let pb = g.param(&params.patch_b);
    let sw = g.param(&params.stats_w);
    let sb = g.param(&params.stats_b);
    let zm = g.param(&params.missing);
    let x = g.constant(input.patches.clone());
    let values = g.linear(x, pw, pb)?;
    let st = g.constant(input.patch_stats.clone());
    let stats = g.linear(st, sw, sb)?;
    let r = g.constant(input.ratios.clone());
    let missing = g.matmul(r, zm)?;
    let s = g.add(values, stats)?;
    g.add(s, missing)
}

/// Full token sequence `B·(N+2+extra) × D`, ordered per window as
/// `[domain, global, patches.., extra..]`. `extra` appends the same row(s)
/// of a `M × D` node after every window's patches.
pub fn embed_tokens<T: Real>(
    g: &mut Graph<T>,
    params: &EmbeddingParams<T>,
    input: &InputBatch<T>,
    extra: Option<Var>,
) -> Result<Var> {
    let (b, n) = (input.batch, input.n_patches);
    let patches = patch_tokens(g, params, input)?;
    let sw = g.param(&params.stats_w);
    let sb = g.param(&params.stats_b);
    let gs = g.constant(input.global_stats.clone());
    let global = g.linear(gs, sw, sb)?;
    let table = g.param(&params.domain);
    let domain = g.gather_rows(table, &input.domain_rows)?;
    let m = match extra {
        Some(e) => g.value(e).rows(),
        None => 0,
    };
    let mut parts = vec![domain, global, patches];
    if let Some(e) = extra {
        parts.push(e);
    }
    let all = g.concat_rows(&parts)?;
    // row offsets inside `all`
    let (o_global, o_patch, o_extra) = (b, 2 * b, 2 * b + b * n);
    let s = n + 2 + m;
    let mut idx = Vec::with_capacity(b * s);
    for w in 0..b {
        idx.push(w);
        idx.push(o_global + w);
        idx.extend((0..n).map(|j| o_patch + w * n + j));
        idx.extend((0..m).map(|j| o_extra + j));
    }
    g.gather_rows(all, &idx)
}

/// The `(N+2) × D` input embedding of one normalized window.
pub fn embed_input<T: Real>(window: &SeriesWindow, params: &EmbeddingParams<T>) -> Result<Tensor<T>> {
    let input = InputBatch::new(std::slice::from_ref(window), params)?;
    let mut g = Graph::new();
    let e = embed_tokens(&mut g, params, &input, None)?;
    Ok(g.value(e).clone())
}
