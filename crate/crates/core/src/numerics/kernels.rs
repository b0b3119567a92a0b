//! Dense kernels behind the graph ops. Row-parallel where the work allows;
//! every output element is computed by exactly one task in a fixed order, so
//! results do not depend on the execution mode.

use super::tensor::Real;
use crate::parallel::Exec;

/// `c[m×n] = a[m×k] · b[k×n]`
pub fn matmul<T: Real>(exec: Exec, a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    exec.chunks_mut(&mut c, n, m * k * n, |i, row| {
        let ar = &a[i * k..(i + 1) * k];
        for (p, &av) in ar.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let br = &b[p * n..(p + 1) * n];
            for (cv, &bv) in row.iter_mut().zip(br) {
                *cv += av * bv;
            }
        }
    });
    c
}

/// `c[m×k] = a[m×n] · b[k×n]ᵀ`
pub fn matmul_nt<T: Real>(exec: Exec, a: &[T], b: &[T], m: usize, n: usize, k: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * k];
    exec.chunks_mut(&mut c, k, m * k * n, |i, row| {
        let ar = &a[i * n..(i + 1) * n];
        for (j, cv) in row.iter_mut().enumerate() {
            let br = &b[j * n..(j + 1) * n];
            *cv = dot(ar, br);
        }
    });
    c
}

/// `c[k×n] = a[m×k]ᵀ · b[m×n]`
pub fn matmul_tn<T: Real>(exec: Exec, a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); k * n];
    exec.chunks_mut(&mut c, n, m * k * n, |i, row| {
        for r in 0..m {
            let av = a[r * k + i];
            if av == T::zero() {
                continue;
            }
            let br = &b[r * n..(r + 1) * n];
            for (cv, &bv) in row.iter_mut().zip(br) {
                *cv += av * bv;
            }
        }
    });
    c
}

#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut s = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

/// Shape of a multi-head attention call over `batch` independent sequences.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttnShape {
    pub batch: usize,
    pub seq: usize,
    pub heads: usize,
    pub width: usize,
    pub causal: bool,
    /// Rows in the prefix key/value tensors: 0 (none), 1 (shared) or `batch`.
    pub prefix_rows: usize,
}

impl AttnShape {
    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }
    /// Keys visible to each query: one prefix slot plus the sequence.
    pub fn keys(&self) -> usize {
        self.seq + usize::from(self.prefix_rows > 0)
    }
    fn prefix_row(&self, b: usize) -> usize {
        if self.prefix_rows == 1 {
            0
        } else {
            b
        }
    }
}

/// Forward attention. Returns (output `[batch·seq × width]`, probabilities
/// `[batch × heads × seq × keys]`). Masked entries hold probability 0.
pub fn attention_forward<T: Real>(
    exec: Exec,
    s: AttnShape,
    q: &[T],
    k: &[T],
    v: &[T],
    prefix: Option<(&[T], &[T])>,
) -> (Vec<T>, Vec<T>) {
    let (seq, w, dh, nk) = (s.seq, s.width, s.head_dim(), s.keys());
    let off = nk - seq;
    let scale = T::one() / T::of(dh as f64).sqrt();
    let work = s.batch * s.heads * seq * nk * dh;
    let per_window = seq * w + s.heads * seq * nk;

    // one buffer per window: [output seq×w | probs heads×seq×nk]
    let mut buf = vec![T::zero(); s.batch * per_window];
    exec.chunks_mut(&mut buf, per_window, work, |b, chunk| {
        let (out, probs) = chunk.split_at_mut(seq * w);
        let key_row = |j: usize, h: usize, src: &[T], pre: Option<&[T]>| -> Vec<T> {
            if j < off {
                let r = s.prefix_row(b);
                pre.unwrap()[r * w + h * dh..r * w + (h + 1) * dh].to_vec()
            } else {
                let t = b * seq + (j - off);
                src[t * w + h * dh..t * w + (h + 1) * dh].to_vec()
            }
        };
        for h in 0..s.heads {
            let keys: Vec<Vec<T>> = (0..nk).map(|j| key_row(j, h, k, prefix.map(|p| p.0))).collect();
            let vals: Vec<Vec<T>> = (0..nk).map(|j| key_row(j, h, v, prefix.map(|p| p.1))).collect();
            for i in 0..seq {
                let t = b * seq + i;
                let qi = &q[t * w + h * dh..t * w + (h + 1) * dh];
                let prow = &mut probs[(h * seq + i) * nk..(h * seq + i + 1) * nk];
                let limit = if s.causal { off + i + 1 } else { nk };
                let mut mx = T::neg_infinity();
                for j in 0..limit {
                    let sc = dot(qi, &keys[j]) * scale;
                    prow[j] = sc;
                    if sc > mx {
                        mx = sc;
                    }
                }
                let mut z = T::zero();
                for p in prow[..limit].iter_mut() {
                    *p = (*p - mx).exp();
                    z += *p;
                }
                for p in prow[..limit].iter_mut() {
                    *p /= z;
                }
                let orow = &mut out[i * w + h * dh..i * w + (h + 1) * dh];
                for j in 0..limit {
                    let pj = prow[j];
                    for (o, &vv) in orow.iter_mut().zip(&vals[j]) {
                        *o += pj * vv;
                    }
                }
            }
        }
    });

    let mut out = Vec::with_capacity(s.batch * seq * w);
    let mut probs = Vec::with_capacity(s.batch * s.heads * seq * nk);
    for chunk in buf.chunks(per_window) {
        out.extend_from_slice(&chunk[..seq * w]);
        probs.extend_from_slice(&chunk[seq * w..]);
    }
    (out, probs)
}

/// Gradients of attention inputs.
pub struct AttnGrads<T> {
    pub dq: Vec<T>,
    pub dk: Vec<T>,
    pub dv: Vec<T>,
    /// `(d prefix key, d prefix value)` with `prefix_rows` rows each.
    pub dprefix: Option<(Vec<T>, Vec<T>)>,
}

#[allow(clippy::too_many_arguments)]
pub fn attention_backward<T: Real>(
    exec: Exec,
    s: AttnShape,
    q: &[T],
    k: &[T],
    v: &[T],
    prefix: Option<(&[T], &[T])>,
    probs: &[T],
    dout: &[T],
) -> AttnGrads<T> {
    let (seq, w, dh, nk) = (s.seq, s.width, s.head_dim(), s.keys());
    let off = nk - seq;
    let scale = T::one() / T::of(dh as f64).sqrt();
    let work = 2 * s.batch * s.heads * seq * nk * dh;
    // per window: [dq seq×w | dk seq×w | dv seq×w | dpk w | dpv w]
    let per_window = 3 * seq * w + 2 * w;
    let mut buf = vec![T::zero(); s.batch * per_window];
    exec.chunks_mut(&mut buf, per_window, work, |b, chunk| {
        let (dq, rest) = chunk.split_at_mut(seq * w);
        let (dk, rest) = rest.split_at_mut(seq * w);
        let (dv, rest) = rest.split_at_mut(seq * w);
        let (dpk, dpv) = rest.split_at_mut(w);
        for h in 0..s.heads {
            let hs = h * dh..(h + 1) * dh;
            let key = |j: usize| -> &[T] {
                if j < off {
                    let r = s.prefix_row(b);
                    &prefix.unwrap().0[r * w + hs.start..r * w + hs.end]
                } else {
                    let t = b * seq + j - off;
                    &k[t * w + hs.start..t * w + hs.end]
                }
            };
            let val = |j: usize| -> &[T] {
                if j < off {
                    let r = s.prefix_row(b);
                    &prefix.unwrap().1[r * w + hs.start..r * w + hs.end]
                } else {
                    let t = b * seq + j - off;
                    &v[t * w + hs.start..t * w + hs.end]
                }
            };
            for i in 0..seq {
                let t = b * seq + i;
                let qi = &q[t * w + hs.start..t * w + hs.end];
                let doi = &dout[t * w + hs.start..t * w + hs.end];
                let base = ((b * s.heads + h) * seq + i) * nk;
                let prow = &probs[base..base + nk];
                let limit = if s.causal { off + i + 1 } else { nk };
                let dp: Vec<T> = (0..limit).map(|j| dot(doi, val(j))).collect();
                let mut acc = T::zero();
                for j in 0..limit {
                    acc += prow[j] * dp[j];
                }
                for j in 0..limit {
                    let pj = prow[j];
                    // value gradient
                    let dvrow: &mut [T] = if j < off {
                        &mut dpv[hs.clone()]
                    } else {
                        let r = j - off;
                        &mut dv[r * w + hs.start..r * w + hs.end]
                    };
                    for (d, &g) in dvrow.iter_mut().zip(doi) {
                        *d += pj * g;
                    }
                    let ds = pj * (dp[j] - acc) * scale;
                    if ds == T::zero() {
                        continue;
                    }
                    let kj = key(j);
                    for (d, &kv) in dq[i * w + hs.start..i * w + hs.end].iter_mut().zip(kj) {
                        *d += ds * kv;
                    }
                    let dkrow: &mut [T] = if j < off {
                        &mut dpk[hs.clone()]
                    } else {
                        let r = j - off;
                        &mut dk[r * w + hs.start..r * w + hs.end]
                    };
                    for (d, &qv) in dkrow.iter_mut().zip(qi) {
                        *d += ds * qv;
                    }
                }
            }
        }
    });

    let n = s.batch * seq * w;
    let mut dq = Vec::with_capacity(n);
    let mut dk = Vec::with_capacity(n);
    let mut dv = Vec::with_capacity(n);
    let mut dprefix = (s.prefix_rows > 0)
        .then(|| (vec![T::zero(); s.prefix_rows * w], vec![T::zero(); s.prefix_rows * w]));
    for (b, chunk) in buf.chunks(per_window).enumerate() {
        dq.extend_from_slice(&chunk[..seq * w]);
        dk.extend_from_slice(&chunk[seq * w..2 * seq * w]);
        dv.extend_from_slice(&chunk[2 * seq * w..3 * seq * w]);
        if let Some((pk, pv)) = dprefix.as_mut() {
            let r = s.prefix_row(b);
            let gk = &chunk[3 * seq * w..3 * seq * w + w];
            let gv = &chunk[3 * seq * w + w..];
            for (d, &g) in pk[r * w..(r + 1) * w].iter_mut().zip(gk) {
                *d += g;
            }
            for (d, &g) in pv[r * w..(r + 1) * w].iter_mut().zip(gv) {
                *d += g;
            }
        }
    }
    AttnGrads { dq, dk, dv, dprefix }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_variants_agree() {
        let a: Vec<f64> = (0..12).map(|x| x as f64 * 0.5 - 2.0).collect(); // 3×4
        let b: Vec<f64> = (0..8).map(|x| (x as f64).sin()).collect(); // 4×2
        let c = matmul(Exec::Sequential, &a, &b, 3, 4, 2);
        // bᵀ as 2×4
        let bt: Vec<f64> = (0..2).flat_map(|j| (0..4).map(move |p| (j, p))).map(|(j, p)| b[p * 2 + j]).collect();
        let c2 = matmul_nt(Exec::Sequential, &a, &bt, 3, 4, 2);
        for (x, y) in c.iter().zip(&c2) {
            assert!((x - y).abs() < 1e-12);
        }
        // aᵀ as 4×3 then (aᵀ)ᵀ·b via matmul_tn
        let at: Vec<f64> = (0..4).flat_map(|p| (0..3).map(move |i| (p, i))).map(|(p, i)| a[i * 4 + p]).collect();
        let c3 = matmul_tn(Exec::Sequential, &at, &b, 4, 3, 2);
        for (x, y) in c.iter().zip(&c3) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
