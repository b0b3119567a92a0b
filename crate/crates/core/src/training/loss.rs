use crate::error::{Error, Result};
use crate::numerics::{Graph, Module, Param, Real, Tensor, Var};

/// Mean squared error over positions with weight 1. `weights` are 0/1;
/// with no counted position the loss is a constant 0.
pub fn mse_loss<T: Real>(g: &mut Graph<T>, output: Var, target: &Tensor<T>, weights: &[bool]) -> Result<Var> {
    let n = g.value(output).len();
    if target.len() != n || weights.len() != n {
        return Err(Error::Contract(format!(
            "mse over {n} outputs with {} targets and {} weights",
            target.len(),
            weights.len()
        )));
    }
    let count = weights.iter().filter(|w| **w).count();
    if count == 0 {
        return Ok(g.constant(Tensor::scalar(T::zero())));
    }
    let t = g.constant(target.clone().reshaped(g.shape(output).to_vec())?);
    let d = g.sub(output, t)?;
    let sq = g.mul(d, d)?;
    let w = weights.iter().map(|&b| if b { T::one() } else { T::zero() }).collect();
    let m = g.mul_const(sq, w)?;
    let s = g.sum(m);
    Ok(g.scale(s, T::one() / T::of(count as f64)))
}

/// Plain MSE of two equal-length slices.
pub fn mse(output: &[f64], target: &[f64]) -> Result<f64> {
    if output.len() != target.len() || output.is_empty() {
        return Err(Error::Contract(format!(
            "mse of {} outputs against {} targets",
            output.len(),
            target.len()
        )));
    }
    Ok(output.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / output.len() as f64)
}

/// Learnable bilinear similarity `qᵀ W k`.
#[derive(Clone, Debug)]
pub struct ContrastiveHead<T> {
    pub w: Param<T>,
}

impl<T: Real> ContrastiveHead<T> {
    /// `W = I / √D`, so initial logits are scaled cosine-like scores of
    /// layer-normed states.
    pub fn new(d: usize) -> Self {
        let mut t = Tensor::zeros(&[d, d]);
        let s = T::of(1.0 / (d as f64).sqrt());
        for i in 0..d {
            t.data_mut()[i * d + i] = s;
        }
        ContrastiveHead {
            w: Param::new("contrastive.w", t),
        }
    }

    pub fn identity(d: usize) -> Self {
        let mut h = Self::new(d);
        for i in 0..d {
            h.w.value.data_mut()[i * d + i] = T::one();
        }
        h
    }
}

impl<T: Real> Module<T> for ContrastiveHead<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        f(&self.w)
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.w)
    }
}

/// One direction: row `i` of `queries` should match row `i` of `keys`
/// against every other row of `keys`.
fn directional<T: Real>(g: &mut Graph<T>, queries: Var, keys: Var, w: Var) -> Result<Var> {
    let m = g.value(queries).rows();
    let qw = g.matmul(queries, w)?;
    let kt = g.transpose(keys)?;
    let logits = g.matmul(qw, kt)?;
    let ls = g.log_softmax(logits);
    let mut diag = vec![T::zero(); m * m];
    for i in 0..m {
        diag[i * m + i] = T::one();
    }
    let picked = g.mul_const(ls, diag)?;
    let s = g.sum(picked);
    Ok(g.scale(s, -T::one() / T::of(m as f64)))
}

/// Symmetrized InfoNCE between aligned patch representations of two views
/// (`M × D` each). Each query's positive is the same patch in the other
/// view; every other patch of the other view in the batch is a negative.
pub fn infonce_loss<T: Real>(g: &mut Graph<T>, h1: Var, h2: Var, head: &ContrastiveHead<T>) -> Result<Var> {
    if g.shape(h1) != g.shape(h2) {
        return Err(Error::Contract(format!(
            "views have shapes {:?} and {:?}",
            g.shape(h1),
            g.shape(h2)
        )));
    }
    if g.value(h1).rows() < 2 {
        return Err(Error::DegenerateBatch("contrastive loss needs at least two patches".into()));
    }
    let w = g.param(&head.w);
    let a = directional(g, h1, h2, w)?;
    let b = directional(g, h2, h1, w)?;
    let s = g.add(a, b)?;
    Ok(g.scale(s, T::of(0.5)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn eval_infonce(h1: &[&[f64]], h2: &[&[f64]], head: &ContrastiveHead<f64>) -> Result<f64> {
        let mut g = Graph::new();
        let a = g.constant(Tensor::from_rows(h1)?);
        let b = g.constant(Tensor::from_rows(h2)?);
        let l = infonce_loss(&mut g, a, b, head)?;
        Ok(g.value(l).item())
    }

    #[test]
    fn mse_examples() {
        assert_eq!(mse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(mse(&[2.0, 3.0], &[1.0, 2.0]).unwrap(), 1.0);
        assert_eq!(mse(&[0.0, 2.0], &[1.0, 1.0]).unwrap(), 1.0);
        assert!(mse(&[0.0], &[1.0, 1.0]).is_err());

        let mut g = Graph::<f64>::new();
        let o = g.constant(Tensor::vector(&[0.0, 2.0, 100.0]));
        let l = mse_loss(&mut g, o, &Tensor::vector(&[1.0, 1.0, 0.0]), &[true, true, false]).unwrap();
        assert_eq!(g.value(l).item(), 1.0);
    }

    #[test]
    fn infonce_closed_form() {
        let head = ContrastiveHead::identity(2);
        let e = std::f64::consts::E;
        let expect = -(e / (e + 1.0)).ln();
        let got = eval_infonce(&[&[1.0, 0.0], &[0.0, 1.0]], &[&[1.0, 0.0], &[0.0, 1.0]], &head).unwrap();
        assert!((got - expect).abs() < 1e-12);
        assert!((expect - 0.3133).abs() < 1e-4);
    }

    #[test]
    fn infonce_uniform_and_degenerate() {
        let head = ContrastiveHead::identity(3);
        let r: &[f64] = &[0.3, -0.2, 0.9];
        let got = eval_infonce(&[r, r, r, r], &[r, r, r, r], &head).unwrap();
        assert!((got - 4f64.ln()).abs() < 1e-12);
        assert!(matches!(eval_infonce(&[r], &[r], &head), Err(Error::DegenerateBatch(_))));
    }

    #[test]
    fn infonce_decreases_with_positive_score() {
        let head = ContrastiveHead::identity(2);
        let mut last = f64::INFINITY;
        for s in [0.5, 1.0, 2.0, 4.0] {
            let l = eval_infonce(&[&[s, 0.0], &[0.0, 1.0]], &[&[1.0, 0.0], &[0.0, 1.0]], &head).unwrap();
            assert!(l < last);
            assert!(l >= 0.0);
            last = l;
        }
    }
}
