use patchimpute::backbone::{self, BackboneConfig, Backbone, HiddenStates, LayerPrefix, OutputHead};
use patchimpute::data::{revin_normalize, SeriesWindow};
use patchimpute::embedding::{embed_input, embed_tokens, patch_stats, patchify, series_stats, EmbeddingParams, InputBatch};
use patchimpute::model::ImputationModel;
use patchimpute::numerics::{grad_check, Graph, Module, Tensor};
use patchimpute::parallel::Exec;
use patchimpute::training::mse_loss;
use patchimpute::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type NoRng = ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_window(r: &mut ChaCha8Rng, len: usize, missing: f64) -> SeriesWindow {
    let values = (0..len).map(|_| r.random_range(-2.0..2.0)).collect();
    let mask = (0..len).map(|_| r.random::<f64>() >= missing).collect();
    SeriesWindow::new(values, mask).masked(&vec![true; len])
}

// Brute-force statistics: order statistics by rank counting, slope from
// exact integer normal equations.
fn reference_stats(values: &[i64], mask: &[bool]) -> [f64; 4] {
    let pts: Vec<(i128, i128)> = values
        .iter()
        .zip(mask)
        .enumerate()
        .filter(|(_, (_, m))| **m)
        .map(|(i, (v, _))| (i as i128, *v as i128))
        .collect();
    if pts.is_empty() {
        return [0.0; 4];
    }
    let ys: Vec<i64> = pts.iter().map(|p| p.1 as i64).collect();
    let kth = |k: usize| -> i64 {
        *ys.iter()
            .find(|&&c| {
                let below = ys.iter().filter(|&&o| o < c).count();
                let equal = ys.iter().filter(|&&o| o == c).count();
                below <= k && k < below + equal
            })
            .unwrap()
    };
    let n = ys.len();
    let median = if n % 2 == 1 {
        kth(n / 2) as f64
    } else {
        (kth(n / 2 - 1) + kth(n / 2)) as f64 / 2.0
    };
    let slope = if n < 2 {
        0.0
    } else {
        let nn = n as i128;
        let sx: i128 = pts.iter().map(|p| p.0).sum();
        let sy: i128 = pts.iter().map(|p| p.1).sum();
        let sxy: i128 = pts.iter().map(|p| p.0 * p.1).sum();
        let sxx: i128 = pts.iter().map(|p| p.0 * p.0).sum();
        (nn * sxy - sx * sy) as f64 / (nn * sxx - sx * sx) as f64
    };
    [kth(0) as f64, median, kth(n - 1) as f64, slope]
}

#[test]
fn patch_stats_match_brute_force() {
    let mut r = rng(1);
    for _ in 0..1000 {
        let p = r.random_range(1..=32);
        let vals: Vec<i64> = (0..p).map(|_| r.random_range(-50..=50)).collect();
        let mask: Vec<bool> = (0..p).map(|_| r.random::<f64>() < 0.7).collect();
        let f: Vec<f64> = vals.iter().map(|&v| v as f64).collect();
        let got = patch_stats(&f, &mask);
        let want = reference_stats(&vals, &mask);
        for (a, b) in got.iter().zip(want) {
            assert_eq!(a.to_bits(), b.to_bits(), "{vals:?} {mask:?}: {got:?} vs {want:?}");
        }
    }
}

#[test]
fn stats_examples() {
    assert_eq!(patch_stats(&[1.0, 2.0, 3.0, 4.0], &[true; 4]), [1.0, 2.5, 4.0, 1.0]);
    assert_eq!(patch_stats(&[3.5; 5], &[true; 5]), [3.5, 3.5, 3.5, 0.0]);
    assert_eq!(patch_stats(&[1.0, 9.0], &[false; 2]), [0.0; 4]);
    assert_eq!(patch_stats(&[1.0, 9.0], &[false, true]), [9.0, 9.0, 9.0, 0.0]);
    let ramp: Vec<f64> = (0..96).map(f64::from).collect();
    assert_eq!(series_stats(&ramp, &[true; 96]), [0.0, 47.5, 95.0, 1.0]);
    let mut m = vec![false; 96];
    m[0] = true;
    m[95] = true;
    assert_eq!(series_stats(&ramp, &m)[3], 1.0);
    let ps = patchify(&ramp, &[true, true, false, false].repeat(24), 4).unwrap();
    assert_eq!(ps.n, 24);
    assert!(ps.ratios.iter().all(|&r| r == 0.5));
    assert_eq!(patchify(&ramp, &[true; 96], 16).unwrap().n, 6);
    assert!(matches!(patchify(&ramp, &[true; 96], 10), Err(Error::Config(_))));
}

fn params(seed: u64, p: usize, d: usize) -> EmbeddingParams<f64> {
    EmbeddingParams::init(&mut rng(seed), p, d, vec![])
}

fn row(t: &Tensor<f64>, i: usize) -> Vec<f64> {
    t.row(i).to_vec()
}

fn affine(x: &[f64], w: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
    let cols = w.cols();
    (0..cols)
        .map(|c| x.iter().enumerate().map(|(i, v)| v * w.data()[i * cols + c]).sum::<f64>() + b.data()[c])
        .collect()
}

#[test]
fn fully_observed_window_has_no_missing_contribution() {
    let mut r = rng(2);
    let w = revin_normalize(&random_window(&mut r, 32, 0.0)).0;
    let mut a = params(3, 8, 6);
    let e1 = embed_input(&w, &a).unwrap();
    a.missing.value.data_mut().iter_mut().for_each(|v| *v *= 100.0);
    assert_eq!(e1, embed_input(&w, &a).unwrap());
    assert_eq!(e1.shape(), &[6, 6]);
}

#[test]
fn fully_missing_patch_token_is_bias_only() {
    let mut a = params(4, 4, 5);
    a.missing.value = Tensor::zeros(&[1, 5]);
    let mut r = rng(5);
    a.patch_b.value = Tensor::new(vec![5], (0..5).map(|_| r.random()).collect()).unwrap();
    a.stats_b.value = Tensor::new(vec![5], (0..5).map(|_| r.random()).collect()).unwrap();
    let mut w = random_window(&mut r, 12, 0.0);
    w.mask[4..8].fill(false);
    let w = w.masked(&[true; 12]);
    let e = embed_input(&w, &a).unwrap();
    let want: Vec<f64> = a.patch_b.value.data().iter().zip(a.stats_b.value.data()).map(|(x, y)| x + y).collect();
    assert_eq!(row(&e, 3), want);
}

#[test]
fn extra_missing_point_changes_only_its_patch() {
    let mut r = rng(6);
    let (p, d) = (16, 8);
    let a = params(7, p, d);
    let base = revin_normalize(&random_window(&mut r, 96, 0.1)).0;
    let mut extra = vec![true; 96];
    let hit = (3 * p..4 * p).find(|&i| base.mask[i]).unwrap();
    extra[hit] = false;
    let other = base.masked(&extra);
    let e0 = embed_input(&base, &a).unwrap();
    let e1 = embed_input(&other, &a).unwrap();
    for t in [0, 2, 3, 4, 6, 7] {
        assert_eq!(row(&e0, t), row(&e1, t), "token {t}");
    }
    // direct construction of the changed tokens
    let (vals, mask) = (&other.values[3 * p..4 * p], &other.mask[3 * p..4 * p]);
    let zeroed: Vec<f64> = vals.iter().zip(mask).map(|(&v, &m)| if m { v } else { 0.0 }).collect();
    let ratio = mask.iter().filter(|m| !**m).count() as f64 / p as f64;
    let tok = affine(&zeroed, &a.patch_w.value, &a.patch_b.value);
    let st = affine(&patch_stats(vals, mask), &a.stats_w.value, &a.stats_b.value);
    let want: Vec<f64> = (0..d).map(|c| tok[c] + st[c] + ratio * a.missing.value.data()[c]).collect();
    for (x, y) in row(&e1, 5).iter().zip(&want) {
        assert!((x - y).abs() < 1e-12);
    }
    let global = affine(&series_stats(&other.values, &other.mask), &a.stats_w.value, &a.stats_b.value);
    for (x, y) in row(&e1, 1).iter().zip(&global) {
        assert!((x - y).abs() < 1e-12);
    }
    assert_eq!(row(&e1, 0), a.domain.value.row(0).to_vec());
    assert_ne!(row(&e0, 5), row(&e1, 5));
}

/// Random multiple of 2^-6 in [-2, 2]; sums and products of a few of these
/// are exact in 64-bit floats.
fn dyadic(r: &mut ChaCha8Rng) -> f64 {
    r.random_range(-128i32..=128) as f64 / 64.0
}

#[test]
fn missing_embedding_is_linear_in_ratio() {
    let mut r = rng(8);
    let (p, d) = (4, 6);
    let mut a = params(9, p, d);
    a.visit_mut(&mut |prm| prm.value.data_mut().iter_mut().for_each(|v| *v = dyadic(&mut r)));
    let w = revin_normalize(&random_window(&mut r, 16, 0.0)).0;
    let mut input = InputBatch::new(&[w], &a).unwrap();
    input.patches.data_mut().iter_mut().for_each(|v| *v = dyadic(&mut r));
    input.patch_stats.data_mut().iter_mut().for_each(|v| *v = dyadic(&mut r));
    let tokens = |ratio: f64| {
        let mut inp = input.clone();
        inp.ratios.data_mut().fill(ratio);
        let mut g = Graph::new();
        let t = embed_tokens(&mut g, &a, &inp, None).unwrap();
        g.value(t).clone()
    };
    let (t0, t1) = (tokens(0.0), tokens(1.0));
    for j in 2..6 {
        let diff: Vec<f64> = t1.row(j).iter().zip(t0.row(j)).map(|(x, y)| x - y).collect();
        assert_eq!(diff, a.missing.value.data());
    }
}

#[test]
fn domain_table_lookup() {
    let a = EmbeddingParams::<f64>::init(&mut rng(1), 4, 4, vec!["a".into(), "b".into()]);
    let mut w = SeriesWindow::new(vec![0.0; 8], vec![true; 8]);
    assert!(matches!(embed_input(&w, &a), Err(Error::Lookup(_))));
    w.domain = "b".into();
    assert_eq!(embed_input(&w, &a).unwrap().row(0), a.domain.value.row(1));
    w.domain = "c".into();
    assert!(matches!(embed_input(&w, &a), Err(Error::Lookup(_))));
}

fn small_cfg() -> BackboneConfig {
    BackboneConfig {
        layers: 2,
        heads: 2,
        d_model: 8,
        patch_len: 4,
        window_len: 12,
        ff_width: 16,
        dropout: 0.0,
        max_seq_len: 8,
    }
}

#[test]
fn missing_embedding_gets_no_gradient_when_fully_observed() {
    let model = ImputationModel::<f64>::init(&small_cfg(), vec![], 1).unwrap();
    let mut r = rng(3);
    let ws: Vec<SeriesWindow> = (0..3).map(|_| revin_normalize(&random_window(&mut r, 12, 0.0)).0).collect();
    let input = model.input(&ws).unwrap();
    let mut g = Graph::new();
    let out = model.forward::<NoRng>(&mut g, &input, None, None).unwrap();
    let loss = mse_loss(&mut g, out.output, &input.values, &[true; 36]).unwrap();
    let grads = g.backward(loss).unwrap();
    assert!(grads.get("embed.missing").unwrap().data().iter().all(|&v| v == 0.0));
    assert!(grads.get("embed.patch.w").unwrap().data().iter().any(|&v| v != 0.0));
}

// Independent scalar implementation of one pre-norm block plus final norm.
mod trace {
    pub fn ln(x: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
        let n = x.len() as f64;
        let m = x.iter().sum::<f64>() / n;
        let v = x.iter().map(|a| (a - m).powi(2)).sum::<f64>() / n;
        x.iter().enumerate().map(|(i, a)| (a - m) / (v + 1e-5).sqrt() * g[i] + b[i]).collect()
    }
    pub fn lin(x: &[f64], w: &[Vec<f64>], b: &[f64]) -> Vec<f64> {
        (0..b.len()).map(|o| b[o] + x.iter().enumerate().map(|(i, v)| v * w[i][o]).sum::<f64>()).collect()
    }
    pub fn gelu(x: f64) -> f64 {
        0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
    }
}

#[test]
fn single_block_matches_manual_trace() {
    let cfg = BackboneConfig {
        layers: 1,
        heads: 1,
        d_model: 2,
        patch_len: 1,
        window_len: 1,
        ff_width: 3,
        dropout: 0.0,
        max_seq_len: 4,
    };
    let mut bb = Backbone::<f64>::init(&mut rng(0), &cfg).unwrap();
    let pos = vec![vec![0.1, -0.2], vec![0.05, 0.3]];
    let g1 = [1.2, 0.8];
    let b1 = [0.1, -0.1];
    let qkv = vec![vec![0.5, -0.3, 0.2, 0.7, 1.0, -0.5], vec![0.4, 0.9, -0.6, 0.1, 0.3, 0.8]];
    let qkv_b = [0.01, 0.02, -0.03, 0.04, 0.05, -0.06];
    let proj = vec![vec![0.6, -0.2], vec![0.3, 0.9]];
    let proj_b = [0.02, -0.01];
    let g2 = [0.9, 1.1];
    let b2 = [-0.05, 0.05];
    let fc = vec![vec![0.7, -0.4, 0.2], vec![-0.3, 0.5, 0.8]];
    let fc_b = [0.1, 0.0, -0.1];
    let out = vec![vec![0.3, -0.6], vec![0.5, 0.2], vec![-0.4, 0.7]];
    let out_b = [0.03, -0.02];
    let gf = [1.05, 0.95];
    let bf = [0.0, 0.1];
    let set = |t: &mut Tensor<f64>, rows: &[Vec<f64>]| {
        let flat: Vec<f64> = rows.concat();
        t.data_mut()[..flat.len()].copy_from_slice(&flat);
    };
    set(&mut bb.pos.value, &pos);
    let blk = &mut bb.blocks[0];
    set(&mut blk.ln1_g.value, &[g1.to_vec()]);
    set(&mut blk.ln1_b.value, &[b1.to_vec()]);
    set(&mut blk.qkv_w.value, &qkv);
    set(&mut blk.qkv_b.value, &[qkv_b.to_vec()]);
    set(&mut blk.proj_w.value, &proj);
    set(&mut blk.proj_b.value, &[proj_b.to_vec()]);
    set(&mut blk.ln2_g.value, &[g2.to_vec()]);
    set(&mut blk.ln2_b.value, &[b2.to_vec()]);
    set(&mut blk.fc_w.value, &fc);
    set(&mut blk.fc_b.value, &[fc_b.to_vec()]);
    set(&mut blk.out_w.value, &out);
    set(&mut blk.out_b.value, &[out_b.to_vec()]);
    set(&mut bb.lnf_g.value, &[gf.to_vec()]);
    set(&mut bb.lnf_b.value, &[bf.to_vec()]);

    let tokens = [vec![0.5, -1.0], vec![1.5, 0.25]];
    let mut g = Graph::new();
    let t = g.constant(Tensor::from_rows(&[&tokens[0], &tokens[1]]).unwrap());
    let h = backbone::forward::<f64, NoRng>(&mut g, &bb, t, 1, None, None).unwrap();
    let got = g.value(h.last).clone();

    use trace::*;
    let x: Vec<Vec<f64>> = (0..2).map(|i| vec![tokens[i][0] + pos[i][0], tokens[i][1] + pos[i][1]]).collect();
    let qkvs: Vec<Vec<f64>> = x.iter().map(|xi| lin(&ln(xi, &g1, &b1), &qkv, &qkv_b)).collect();
    let mut want = Vec::new();
    for i in 0..2 {
        let q = &qkvs[i][0..2];
        let scores: Vec<f64> = (0..=i)
            .map(|j| (q[0] * qkvs[j][2] + q[1] * qkvs[j][3]) / 2f64.sqrt())
            .collect();
        let z: f64 = scores.iter().map(|s| s.exp()).sum();
        let mut a = [0.0; 2];
        for (j, s) in scores.iter().enumerate() {
            a[0] += s.exp() / z * qkvs[j][4];
            a[1] += s.exp() / z * qkvs[j][5];
        }
        let attn = lin(&a, &proj, &proj_b);
        let x1: Vec<f64> = (0..2).map(|c| x[i][c] + attn[c]).collect();
        let hid: Vec<f64> = lin(&ln(&x1, &g2, &b2), &fc, &fc_b).into_iter().map(gelu).collect();
        let m = lin(&hid, &out, &out_b);
        let x2: Vec<f64> = (0..2).map(|c| x1[c] + m[c]).collect();
        want.extend(ln(&x2, &gf, &bf));
    }
    for (a, b) in got.data().iter().zip(&want) {
        assert!((a - b).abs() < 1e-6, "{:?} vs {want:?}", got.data());
    }
}

fn random_tokens(r: &mut ChaCha8Rng, rows: usize, d: usize) -> Tensor<f64> {
    Tensor::new(vec![rows, d], (0..rows * d).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn later_tokens_never_affect_earlier_states() {
    let cfg = small_cfg();
    let bb = Backbone::<f64>::init(&mut rng(1), &cfg).unwrap();
    let mut r = rng(2);
    let (b, s, d) = (2, 5, 8);
    let base = random_tokens(&mut r, b * s, d);
    let run = |t: &Tensor<f64>| {
        let mut g = Graph::new();
        let v = g.constant(t.clone());
        let h = backbone::forward::<f64, NoRng>(&mut g, &bb, v, b, None, None).unwrap();
        let mut all = vec![g.value(h.last).clone()];
        all.extend(h.per_layer.iter().map(|&p| g.value(p).clone()));
        all
    };
    let h0 = run(&base);
    for j in 1..s {
        let mut t = base.clone();
        for c in 0..d {
            t.data_mut()[(s + j) * d + c] += 0.7;
        }
        let h1 = run(&t);
        for (a, z) in h0.iter().zip(&h1) {
            for i in 0..j {
                assert_eq!(a.row(s + i), z.row(s + i), "token {i} moved when {j} changed");
                assert_eq!(a.row(i), z.row(i));
            }
            assert_ne!(a.row(s + j), z.row(s + j));
        }
    }
}

#[test]
fn zero_prefix_still_changes_outputs() {
    let bb = Backbone::<f64>::init(&mut rng(1), &small_cfg()).unwrap();
    let t = random_tokens(&mut rng(4), 10, 8);
    let run = |with: bool| {
        let mut g = Graph::new();
        let v = g.constant(t.clone());
        let pre: Vec<LayerPrefix> = (0..2)
            .map(|_| LayerPrefix {
                key: g.constant(Tensor::zeros(&[1, 8])),
                value: g.constant(Tensor::zeros(&[1, 8])),
            })
            .collect();
        let h = backbone::forward::<f64, NoRng>(&mut g, &bb, v, 2, with.then_some(&pre[..]), None).unwrap();
        g.value(h.last).clone()
    };
    assert_ne!(run(true), run(false));

    let mut g = Graph::new();
    let v = g.constant(t.clone());
    let one = vec![LayerPrefix {
        key: g.constant(Tensor::zeros(&[1, 8])),
        value: g.constant(Tensor::zeros(&[1, 8])),
    }];
    assert!(matches!(
        backbone::forward::<f64, NoRng>(&mut g, &bb, v, 2, Some(&one), None),
        Err(Error::Config(_))
    ));
    let long = g.constant(random_tokens(&mut rng(1), 9, 8));
    assert!(matches!(
        backbone::forward::<f64, NoRng>(&mut g, &bb, long, 1, None, None),
        Err(Error::Config(_))
    ));
}

#[test]
fn output_head_contract() {
    let head = OutputHead::<f64>::init(&mut rng(1), "head", 6, 64, 96);
    assert_eq!(head.w.value.shape(), &[384, 96]);
    let mut g = Graph::new();
    let last = g.constant(Tensor::zeros(&[16, 64]));
    let h = HiddenStates {
        last,
        per_layer: vec![],
        batch: 2,
        seq: 8,
    };
    let o = backbone::output_head(&mut g, &head, &h).unwrap();
    assert_eq!(g.value(o).shape(), &[2, 96]);
    assert!(g.value(o).data().iter().all(|&v| v == 0.0));
    let bad = HiddenStates { seq: 4, batch: 4, ..h };
    assert!(matches!(backbone::output_head(&mut g, &head, &bad), Err(Error::Contract(_))));
}

#[test]
fn output_head_gradient() {
    let mut head = OutputHead::<f64>::init(&mut rng(1), "head", 3, 4, 12);
    let states = random_tokens(&mut rng(2), 10, 4);
    let r = grad_check(&mut head, 1e-6, |g, hd| {
        let last = g.constant(states.clone());
        let h = HiddenStates {
            last,
            per_layer: vec![],
            batch: 2,
            seq: 5,
        };
        let o = backbone::output_head(g, hd, &h)?;
        let sq = g.mul(o, o)?;
        Ok(g.sum(sq))
    })
    .unwrap();
    assert!(r.max_rel_err < 1e-4, "{r:?}");
}

#[test]
fn full_model_gradient() {
    let mut model = ImputationModel::<f64>::init(&small_cfg(), vec![], 2).unwrap();
    let mut r = rng(5);
    let ws: Vec<SeriesWindow> = (0..2).map(|_| revin_normalize(&random_window(&mut r, 12, 0.3)).0).collect();
    let target = Tensor::new(vec![2, 12], (0..24).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap();
    let weights = vec![true; 24];
    let rep = grad_check(&mut model, 5e-4, |g, m| {
        let input = m.input(&ws)?;
        let out = m.forward::<NoRng>(g, &input, None, None)?;
        mse_loss(g, out.output, &target, &weights)
    })
    .unwrap();
    assert!(rep.max_rel_err < 1e-3, "{rep:?}");
}

#[test]
fn inference_is_deterministic_across_modes() {
    let cfg = BackboneConfig {
        layers: 2,
        d_model: 32,
        ..Default::default()
    };
    let a = ImputationModel::<f32>::init(&cfg, vec![], 9).unwrap();
    let b = ImputationModel::<f32>::init(&cfg, vec![], 9).unwrap();
    let mut r = rng(1);
    let ws: Vec<SeriesWindow> = (0..40).map(|_| random_window(&mut r, 96, 0.3)).collect();
    let x = a.impute(Exec::Sequential, &ws, None, 40).unwrap();
    assert_eq!(x, b.impute(Exec::Sequential, &ws, None, 40).unwrap());
    assert_eq!(x, a.impute(Exec::Parallel, &ws, None, 40).unwrap());
    assert_eq!(x, a.impute(Exec::Parallel, &ws, None, 7).unwrap());
    for (w, o) in ws.iter().zip(&x) {
        for i in 0..96 {
            if w.mask[i] {
                assert_eq!(o[i], w.values[i]);
            }
        }
    }
}

#[test]
fn checkpoint_roundtrip_and_config_check() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let mut m = ImputationModel::<f32>::init(&small_cfg(), vec!["x".into(), "y".into()], 3).unwrap();
    m.train_vars = vec![1, 4, 7];
    m.save(&path).unwrap();
    let back = ImputationModel::<f32>::load(&path).unwrap();
    assert_eq!(back.named_tensors(), m.named_tensors());
    assert_eq!(back.train_vars, m.train_vars);
    assert_eq!(back.embedding.labels, m.embedding.labels);
    assert_eq!(back.cfg, m.cfg);
    let wide = ImputationModel::<f64>::load(&path).unwrap();
    assert_eq!(wide.embedding.patch_w.value.data()[0], m.embedding.patch_w.value.data()[0] as f64);
    let other = BackboneConfig {
        d_model: 16,
        ..small_cfg()
    };
    match back.check_config(&other) {
        Err(Error::Load(msg)) => assert!(msg.contains("d_model"), "{msg}"),
        e => panic!("{e:?}"),
    }
}
