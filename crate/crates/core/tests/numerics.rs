use patchimpute::numerics::{grad_check, Graph, Module, Param, Tensor, Var};
use patchimpute::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn params(seed: u64, shapes: &[(&str, &[usize])]) -> Vec<Param<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    shapes
        .iter()
        .map(|(n, s)| Param::new(*n, rand_tensor(&mut rng, s)))
        .collect()
}

/// Weighted sum so every output element gets a distinct upstream gradient.
fn probe(g: &mut Graph<f64>, y: Var) -> Var {
    let n = g.value(y).len();
    let w = (0..n).map(|i| 0.5 + (i * 7 % 11) as f64 / 10.0).collect();
    let z = g.mul_const(y, w).unwrap();
    g.sum(z)
}

fn check(ps: &mut Vec<Param<f64>>, f: impl Fn(&mut Graph<f64>, &[Var]) -> Var) -> f64 {
    let r = grad_check(ps, 1e-6, |g, m: &Vec<Param<f64>>| {
        let vs: Vec<Var> = m.iter().map(|p| g.param(p)).collect();
        let y = f(g, &vs);
        Ok(probe(g, y))
    })
    .unwrap();
    assert!(r.checked > 0);
    r.max_rel_err
}

#[test]
fn matmul_examples() {
    let mut g = Graph::<f64>::new();
    let i = g.constant(Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap());
    let b = g.constant(Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap());
    let c = g.matmul(i, b).unwrap();
    assert_eq!(g.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);

    let a = g.constant(Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 0.0]]).unwrap());
    let v = g.constant(Tensor::from_rows(&[&[5.0], &[7.0]]).unwrap());
    let c = g.matmul(a, v).unwrap();
    assert_eq!(g.value(c).data(), &[5.0, 0.0]);

    let bad = g.matmul(v, a);
    assert!(matches!(bad, Err(Error::Dimension(_))));
}

#[test]
fn matmul_gradient() {
    let mut ps = params(1, &[("a", &[3, 4]), ("b", &[4, 2])]);
    let e = check(&mut ps, |g, v| g.matmul(v[0], v[1]).unwrap());
    assert!(e < 1e-6, "{e}");
}

#[test]
fn layer_norm_examples() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::vector(&[1.0, 1.0, 1.0]));
    let one = g.constant(Tensor::vector(&[1.0; 3]));
    let zero = g.constant(Tensor::vector(&[0.0; 3]));
    let y = g.layer_norm(x, one, zero, 1e-12).unwrap();
    assert!(g.value(y).data().iter().all(|v| v.abs() < 1e-9));

    let x = g.constant(Tensor::vector(&[0.0, 2.0]));
    let one = g.constant(Tensor::vector(&[1.0; 2]));
    let five = g.constant(Tensor::vector(&[5.0; 2]));
    let y = g.layer_norm(x, one, five, 1e-12).unwrap();
    let d = g.value(y).data();
    assert!((d[0] - 4.0).abs() < 1e-9 && (d[1] - 6.0).abs() < 1e-9);

    let bad = g.layer_norm(x, one, five, 0.0);
    assert!(bad.is_err());
}

#[test]
fn layer_norm_gradient() {
    let mut ps = params(2, &[("x", &[2, 8]), ("g", &[8]), ("b", &[8])]);
    let e = check(&mut ps, |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5).unwrap());
    assert!(e < 1e-5, "{e}");
}

#[test]
fn layer_norm_rows_are_standardized() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut g = Graph::<f64>::new();
    let x = g.constant(rand_tensor(&mut rng, &[5, 16]));
    let one = g.constant(Tensor::vector(&[1.0; 16]));
    let zero = g.constant(Tensor::vector(&[0.0; 16]));
    let y = g.layer_norm(x, one, zero, 1e-12).unwrap();
    for r in 0..5 {
        let row = g.value(y).row(r);
        let mean: f64 = row.iter().sum::<f64>() / 16.0;
        let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
        assert!(mean.abs() < 1e-6);
        assert!((var - 1.0).abs() < 1e-6);
    }
}

#[test]
fn softmax_examples_and_gradient() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::vector(&[0.0, 0.0]));
    let y = g.softmax(x);
    assert_eq!(g.value(y).data(), &[0.5, 0.5]);
    let x = g.constant(Tensor::vector(&[1000.0, 1000.0]));
    let y = g.softmax(x);
    assert_eq!(g.value(y).data(), &[0.5, 0.5]);

    let mut ps = params(4, &[("x", &[6])]);
    let e = check(&mut ps, |g, v| g.softmax(v[0]));
    assert!(e < 1e-5, "{e}");

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = g.constant(rand_tensor(&mut rng, &[4, 7]));
    let y = g.softmax(x);
    for r in 0..4 {
        let s: f64 = g.value(y).row(r).iter().sum();
        assert!((s - 1.0).abs() < 1e-6);
        assert!(g.value(y).row(r).iter().all(|&p| p > 0.0));
    }
}

#[test]
fn backward_examples() {
    let p = Param::new("p", Tensor::<f64>::vector(&[1.0, -2.0, 3.0]));
    let mut g = Graph::new();
    let v = g.param(&p);
    let s = g.sum(v);
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get("p").unwrap().data(), &[1.0, 1.0, 1.0]);

    let mut g = Graph::new();
    let v = g.param(&p);
    let sq = g.mul(v, v).unwrap();
    let s = g.sum(sq);
    let l = g.scale(s, 0.5);
    let grads = g.backward(l).unwrap();
    assert_eq!(grads.get("p").unwrap().data(), &[1.0, -2.0, 3.0]);
    // a second backward on the same record is rejected
    assert!(matches!(g.backward(l), Err(Error::Contract(_))));
}

#[test]
fn backward_rejects_non_scalar_and_skips_constants() {
    let p = Param::new("p", Tensor::<f64>::vector(&[1.0, 2.0]));
    let mut g = Graph::new();
    let c = g.constant(Tensor::vector(&[3.0, 4.0]));
    let v = g.param(&p);
    let y = g.mul(v, c).unwrap();
    assert!(matches!(g.backward(y), Err(Error::Contract(_))));

    let mut g = Graph::new();
    let c = g.constant(Tensor::vector(&[3.0, 4.0]));
    let v = g.param(&p);
    let y = g.mul(v, c).unwrap();
    let s = g.sum(y);
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.len(), 1);
    assert_eq!(grads.get("p").unwrap().data(), &[3.0, 4.0]);
}

fn mlp(g: &mut Graph<f64>, v: &[Var], x: Var) -> Var {
    let h = g.linear(x, v[0], v[1]).unwrap();
    let h = g.gelu(h);
    let o = g.linear(h, v[2], v[3]).unwrap();
    let sq = g.mul(o, o).unwrap();
    g.mean(sq)
}

#[test]
fn two_layer_perceptron_gradient_64() {
    let mut ps = params(6, &[("w1", &[5, 8]), ("b1", &[8]), ("w2", &[8, 3]), ("b2", &[3])]);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = rand_tensor(&mut rng, &[4, 5]);
    let r = grad_check(&mut ps, 1e-6, |g, m: &Vec<Param<f64>>| {
        let vs: Vec<Var> = m.iter().map(|p| g.param(p)).collect();
        let xv = g.constant(x.clone());
        Ok(mlp(g, &vs, xv))
    })
    .unwrap();
    assert!(r.max_rel_err < 1e-7, "{:?}", r);
}

#[test]
fn two_layer_perceptron_gradient_32() {
    let ps64 = params(6, &[("w1", &[5, 8]), ("b1", &[8]), ("w2", &[8, 3]), ("b2", &[3])]);
    let mut ps: Vec<Param<f32>> = ps64.iter().map(|p| Param::new(p.name(), p.value.cast())).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x: Tensor<f32> = rand_tensor(&mut rng, &[4, 5]).cast();
    let r = grad_check(&mut ps, 1e-2, |g, m: &Vec<Param<f32>>| {
        let v: Vec<Var> = m.iter().map(|p| g.param(p)).collect();
        let xv = g.constant(x.clone());
        let h = g.linear(xv, v[0], v[1]).unwrap();
        let h = g.gelu(h);
        let o = g.linear(h, v[2], v[3]).unwrap();
        let sq = g.mul(o, o).unwrap();
        Ok(g.sum(sq))
    })
    .unwrap();
    // central differences in single precision: truncation error dominates
    assert!(r.max_rel_err < 1e-2, "{:?}", r);
}

#[test]
fn grad_check_quadratic_and_invalid_oracle() {
    let mut p = vec![Param::new("p", Tensor::<f64>::scalar(3.0))];
    let r = grad_check(&mut p, 1e-4, |g, m: &Vec<Param<f64>>| {
        let v = g.param(&m[0]);
        let y = g.mul(v, v)?;
        Ok(g.sum(y))
    })
    .unwrap();
    assert!(r.max_rel_err < 1e-7, "{}", r.max_rel_err);

    let counter = std::cell::Cell::new(0u64);
    let r = grad_check(&mut p, 1e-4, |g, m: &Vec<Param<f64>>| {
        counter.set(counter.get() + 1);
        let mut rng = ChaCha8Rng::seed_from_u64(counter.get());
        let v = g.param(&m[0]);
        let noise = g.constant(Tensor::scalar(rng.random::<f64>()));
        let y = g.mul(v, noise)?;
        Ok(g.sum(y))
    });
    assert!(matches!(r, Err(Error::OracleInvalid(_))));
}

#[test]
fn elementwise_and_shape_op_gradients() {
    let mut ps = params(8, &[("a", &[3, 4]), ("b", &[3, 4]), ("r", &[4])]);
    let e = check(&mut ps, |g, v| {
        let s = g.add(v[0], v[1]).unwrap();
        let d = g.sub(s, v[1]).unwrap();
        let m = g.mul(d, v[1]).unwrap();
        let r = g.add_row(m, v[2]).unwrap();
        let t = g.transpose(r).unwrap();
        let sc = g.scale(t, 1.5);
        g.gelu(sc)
    });
    assert!(e < 1e-6, "{e}");

    let mut ps = params(9, &[("a", &[2, 3]), ("b", &[4, 3]), ("c", &[2, 5])]);
    let e = check(&mut ps, |g, v| {
        let rows = g.concat_rows(&[v[0], v[1]]).unwrap();
        let picked = g.gather_rows(rows, &[5, 0, 0, 3]).unwrap();
        let cols = g.slice_cols(picked, 1, 2).unwrap();
        let flat = g.reshape(cols, vec![2, 4]).unwrap();
        let ls = g.log_softmax(flat);
        let wide = g.concat_cols(&[ls, v[2]]).unwrap();
        let mx = g.max(wide);
        let mn = g.min(wide);
        let mean = g.mean(wide);
        g.concat_rows(&[mx, mn, mean]).unwrap()
    });
    assert!(e < 1e-6, "{e}");
}

#[test]
fn attention_gradient_with_and_without_prefix() {
    for (causal, prefix_rows) in [(true, 0), (true, 1), (false, 2), (true, 2)] {
        let mut shapes: Vec<(&str, &[usize])> = vec![("q", &[6, 4]), ("k", &[6, 4]), ("v", &[6, 4])];
        let pshape = [prefix_rows.max(1), 4];
        if prefix_rows > 0 {
            shapes.push(("pk", &pshape));
            shapes.push(("pv", &pshape));
        }
        let mut ps = params(10 + prefix_rows as u64, &shapes);
        let e = check(&mut ps, |g, v| {
            let pre = (v.len() == 5).then(|| (v[3], v[4]));
            g.attention(v[0], v[1], v[2], pre, 2, 2, causal).unwrap()
        });
        assert!(e < 1e-6, "causal={causal} prefix={prefix_rows}: {e}");
    }
}

#[test]
fn forward_is_deterministic() {
    let ps = params(11, &[("q", &[8, 8]), ("k", &[8, 8]), ("v", &[8, 8])]);
    let run = || {
        let mut g = Graph::new();
        let v: Vec<Var> = ps.iter().map(|p| g.param(p)).collect();
        let a = g.attention(v[0], v[1], v[2], None, 2, 4, true).unwrap();
        let m = g.matmul(a, v[2]).unwrap();
        g.value(m).data().to_vec()
    };
    assert_eq!(run(), run());
}

#[test]
fn frozen_params_get_no_gradient() {
    let mut ps = params(12, &[("a", &[2, 2]), ("b", &[2, 2])]);
    ps[1].trainable = false;
    let mut g = Graph::new();
    let v: Vec<Var> = ps.iter().map(|p| g.param(p)).collect();
    let m = g.matmul(v[0], v[1]).unwrap();
    let s = g.sum(m);
    let grads = g.backward(s).unwrap();
    assert!(grads.get("a").is_some());
    assert!(grads.get("b").is_none());
    assert_eq!(ps.param_count(), 8);
}

