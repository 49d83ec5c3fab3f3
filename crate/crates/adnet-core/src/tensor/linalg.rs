//! Batched matrix multiply, softmax, layer norm and the per-head temperature
//! scaling used by transposed channel attention.

use rayon::prelude::*;

use super::{BackFn, Scalar, Tensor};
use crate::error::{Error, Result};

/// C[b] = A[b] (ta? transposed) x B[b] (tb? transposed), all row-major.
/// `m`,`k`,`n` refer to the logical (post-transpose) operand extents.
pub(crate) fn bmm_raw<T: Scalar>(
    a: &[T],
    b: &[T],
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    ta: bool,
    tb: bool,
) -> Vec<T> {
    let mut out = vec![T::ZERO; batch * m * n];
    out.par_chunks_mut(m * n).enumerate().for_each(|(bi, ob)| {
        let ab = &a[bi * m * k..(bi + 1) * m * k];
        let bb = &b[bi * k * n..(bi + 1) * k * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = T::ZERO;
                for p in 0..k {
                    let av = if ta { ab[p * m + i] } else { ab[i * k + p] };
                    let bv = if tb { bb[j * k + p] } else { bb[p * n + j] };
                    acc += av * bv;
                }
                ob[i * n + j] = acc;
            }
        }
    });
    out
}

fn batch_of(shape: &[usize]) -> usize {
    shape[..shape.len() - 2].iter().product()
}

impl<T: Scalar> Tensor<T> {
    /// Batched matmul: (..., M, K) x (..., K, N) -> (..., M, N).
    /// Leading axes must match exactly and are folded into the batch.
    pub fn bmm(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        let sa = self.shape();
        let sb = rhs.shape();
        if sa.len() < 2 || sb.len() != sa.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return Err(Error::dimension("bmm", &sb, format!("batch axes of {:?}", sa)));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != kb {
            return Err(Error::dimension("bmm", &sb, format!("inner extent {}", k)));
        }
        let batch = batch_of(&sa);
        let out = bmm_raw(&self.data(), &rhs.data(), batch, m, k, n, false, false);
        let mut out_shape = sa.clone();
        let l = out_shape.len();
        out_shape[l - 1] = n;
        let needs = self.requires_grad() || rhs.requires_grad();
        let back: Option<BackFn<T>> = if needs {
            let a = self.clone();
            let b = rhs.clone();
            Some(Box::new(move |g: &[T]| {
                if a.requires_grad() {
                    // dA = G x B^T
                    let da = bmm_raw(g, &b.data(), batch, m, n, k, false, true);
                    a.accumulate_grad(&da);
                }
                if b.requires_grad() {
                    // dB = A^T x G
                    let db = bmm_raw(&a.data(), g, batch, k, m, n, true, false);
                    b.accumulate_grad(&db);
                }
            }))
        } else {
            None
        };
        Ok(Tensor::from_op(
            out,
            out_shape,
            vec![self.clone(), rhs.clone()],
            back,
        ))
    }

    /// Batched matmul with the right operand transposed:
    /// (..., M, K) x (..., N, K) -> (..., M, N).
    pub fn bmm_transb(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        let sa = self.shape();
        let sb = rhs.shape();
        if sa.len() < 2 || sb.len() != sa.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return Err(Error::dimension(
                "bmm_transb",
                &sb,
                format!("batch axes of {:?}", sa),
            ));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (n, kb) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != kb {
            return Err(Error::dimension("bmm_transb", &sb, format!("inner extent {}", k)));
        }
        let batch = batch_of(&sa);
        // out[i,j] = sum_p a[i,p] * b[j,p]
        let out = {
            let a_ref = self.data();
            let b_ref = rhs.data();
            let a: &[T] = &a_ref;
            let b: &[T] = &b_ref;
            let mut out = vec![T::ZERO; batch * m * n];
            out.par_chunks_mut(m * n).enumerate().for_each(|(bi, ob)| {
                let ab = &a[bi * m * k..(bi + 1) * m * k];
                let bb = &b[bi * n * k..(bi + 1) * n * k];
                for i in 0..m {
                    for j in 0..n {
                        let mut acc = T::ZERO;
                        for p in 0..k {
                            acc += ab[i * k + p] * bb[j * k + p];
                        }
                        ob[i * n + j] = acc;
                    }
                }
            });
            out
        };
        let mut out_shape = sa.clone();
        let l = out_shape.len();
        out_shape[l - 1] = n;
        let needs = self.requires_grad() || rhs.requires_grad();
        let back: Option<BackFn<T>> = if needs {
            let a = self.clone();
            let b = rhs.clone();
            Some(Box::new(move |g: &[T]| {
                if a.requires_grad() {
                    // dA = G x B   (G: m x n, B: n x k)
                    let da = bmm_raw(g, &b.data(), batch, m, n, k, false, false);
                    a.accumulate_grad(&da);
                }
                if b.requires_grad() {
                    // dB = G^T x A (G^T: n x m, A: m x k)
                    let db = bmm_raw(g, &a.data(), batch, n, m, k, true, false);
                    b.accumulate_grad(&db);
                }
            }))
        } else {
            None
        };
        Ok(Tensor::from_op(
            out,
            out_shape,
            vec![self.clone(), rhs.clone()],
            back,
        ))
    }

    /// Numerically stabilized softmax over the last axis.
    /// NaN anywhere in the input is rejected rather than propagated.
    pub fn softmax_lastdim(&self) -> Result<Tensor<T>> {
        let s = self.shape();
        if s.is_empty() {
            return Err(Error::dimension("softmax_lastdim", &s, "rank >= 1"));
        }
        let l = s[s.len() - 1];
        let rows = self.numel() / l;
        let mut out = vec![T::ZERO; self.numel()];
        {
            let d = self.data();
            if d.iter().any(|v| v.is_nan()) {
                return Err(Error::NonFinite("softmax_lastdim input contains NaN".into()));
            }
            for r in 0..rows {
                let row = &d[r * l..(r + 1) * l];
                let orow = &mut out[r * l..(r + 1) * l];
                let mut mx = row[0];
                for v in row.iter().skip(1) {
                    mx = mx.max(*v);
                }
                let mut sum = T::ZERO;
                for (o, v) in orow.iter_mut().zip(row.iter()) {
                    *o = (*v - mx).exp();
                    sum += *o;
                }
                for o in orow.iter_mut() {
                    *o = *o / sum;
                }
            }
        }
        let back: Option<BackFn<T>> = if self.requires_grad() {
            let a = self.clone();
            let y = out.clone();
            Some(Box::new(move |g: &[T]| {
                let mut d = vec![T::ZERO; g.len()];
                for r in 0..rows {
                    let yr = &y[r * l..(r + 1) * l];
                    let gr = &g[r * l..(r + 1) * l];
                    let mut dot = T::ZERO;
                    for (gi, yi) in gr.iter().zip(yr.iter()) {
                        dot += *gi * *yi;
                    }
                    let dr = &mut d[r * l..(r + 1) * l];
                    for i in 0..l {
                        dr[i] = yr[i] * (gr[i] - dot);
                    }
                }
                a.accumulate_grad(&d);
            }))
        } else {
            None
        };
        Ok(Tensor::from_op(out, s, vec![self.clone()], back))
    }

    /// Layer normalization over the channel axis at each spatial position of
    /// an NCHW tensor, followed by a per-channel affine (`gamma`, `beta`).
    pub fn layer_norm(&self, gamma: &Tensor<T>, beta: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
        let s = self.shape();
        if s.len() != 4 {
            return Err(Error::dimension("layer_norm", &s, "4-d NCHW"));
        }
        if eps <= 0.0 {
            return Err(Error::Parameter(format!("layer_norm eps must be > 0, got {}", eps)));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        if gamma.numel() != c || beta.numel() != c {
            return Err(Error::dimension(
                "layer_norm affine",
                &[gamma.numel(), beta.numel()],
                format!("{} channels", c),
            ));
        }
        let hw = h * w;
        let positions = n * hw;
        let inv_c = 1.0 / c as f64;
        let epst = T::from_f64(eps);
        let mut normalized = vec![T::ZERO; self.numel()];
        let mut inv_std = vec![T::ZERO; positions];
        {
            let d = self.data();
            for ni in 0..n {
                for p in 0..hw {
                    let mut mean = T::ZERO;
                    for ci in 0..c {
                        mean += d[(ni * c + ci) * hw + p];
                    }
                    mean = mean * T::from_f64(inv_c);
                    let mut var = T::ZERO;
                    for ci in 0..c {
                        let dv = d[(ni * c + ci) * hw + p] - mean;
                        var += dv * dv;
                    }
                    var = var * T::from_f64(inv_c);
                    let inv = T::ONE / (var + epst).sqrt();
                    inv_std[ni * hw + p] = inv;
                    for ci in 0..c {
                        normalized[(ni * c + ci) * hw + p] =
                            (d[(ni * c + ci) * hw + p] - mean) * inv;
                    }
                }
            }
        }
        let out: Vec<T> = {
            let gm = gamma.data();
            let bt = beta.data();
            let mut out = vec![T::ZERO; self.numel()];
            for ni in 0..n {
                for ci in 0..c {
                    let base = (ni * c + ci) * hw;
                    for p in 0..hw {
                        out[base + p] = gm[ci] * normalized[base + p] + bt[ci];
                    }
                }
            }
            out
        };
        let needs = self.requires_grad() || gamma.requires_grad() || beta.requires_grad();
        let back: Option<BackFn<T>> = if needs {
            let x = self.clone();
            let gm = gamma.clone();
            let bt = beta.clone();
            let y = normalized;
            let inv = inv_std;
            Some(Box::new(move |g: &[T]| {
                if gm.requires_grad() {
                    let mut dg = vec![T::ZERO; c];
                    for ni in 0..n {
                        for ci in 0..c {
                            let base = (ni * c + ci) * hw;
                            let mut acc = T::ZERO;
                            for p in 0..hw {
                                acc += g[base + p] * y[base + p];
                            }
                            dg[ci] += acc;
                        }
                    }
                    gm.accumulate_grad(&dg);
                }
                if bt.requires_grad() {
                    let mut db = vec![T::ZERO; c];
                    for ni in 0..n {
                        for ci in 0..c {
                            let base = (ni * c + ci) * hw;
                            let mut acc = T::ZERO;
                            for p in 0..hw {
                                acc += g[base + p];
                            }
                            db[ci] += acc;
                        }
                    }
                    bt.accumulate_grad(&db);
                }
                if x.requires_grad() {
                    let gmd = gm.data();
                    let mut dx = vec![T::ZERO; g.len()];
                    for ni in 0..n {
                        for p in 0..hw {
                            let mut m1 = T::ZERO;
                            let mut m2 = T::ZERO;
                            for ci in 0..c {
                                let idx = (ni * c + ci) * hw + p;
                                let gh = g[idx] * gmd[ci];
                                m1 += gh;
                                m2 += gh * y[idx];
                            }
                            m1 = m1 * T::from_f64(inv_c);
                            m2 = m2 * T::from_f64(inv_c);
                            let istd = inv[ni * hw + p];
                            for ci in 0..c {
                                let idx = (ni * c + ci) * hw + p;
                                let gh = g[idx] * gmd[ci];
                                dx[idx] = istd * (gh - m1 - y[idx] * m2);
                            }
                        }
                    }
                    x.accumulate_grad(&dx);
                }
            }))
        } else {
            None
        };
        Ok(Tensor::from_op(
            out,
            s,
            vec![self.clone(), gamma.clone(), beta.clone()],
            back,
        ))
    }

    /// Divide a (N, heads, M, L) tensor by a per-head scalar `alpha[h]`.
    pub fn div_per_head(&self, alpha: &Tensor<T>) -> Result<Tensor<T>> {
        let s = self.shape();
        if s.len() != 4 {
            return Err(Error::dimension("div_per_head", &s, "4-d (N,heads,M,L)"));
        }
        let heads = s[1];
        if alpha.numel() != heads {
            return Err(Error::dimension(
                "div_per_head alpha",
                &alpha.shape(),
                format!("{} heads", heads),
            ));
        }
        let (n, m, l) = (s[0], s[2], s[3]);
        let per = m * l;
        let out: Vec<T> = {
            let d = self.data();
            let al = alpha.data();
            let mut out = vec![T::ZERO; self.numel()];
            for ni in 0..n {
                for hd in 0..heads {
                    let base = (ni * heads + hd) * per;
                    let a = al[hd];
                    for i in 0..per {
                        out[base + i] = d[base + i] / a;
                    }
                }
            }
            out
        };
        let needs = self.requires_grad() || alpha.requires_grad();
        let back: Option<BackFn<T>> = if needs {
            let x = self.clone();
            let al = alpha.clone();
            Some(Box::new(move |g: &[T]| {
                let av = al.to_vec();
                if x.requires_grad() {
                    let mut dx = vec![T::ZERO; g.len()];
                    for ni in 0..n {
                        for hd in 0..heads {
                            let base = (ni * heads + hd) * per;
                            for i in 0..per {
                                dx[base + i] = g[base + i] / av[hd];
                            }
                        }
                    }
                    x.accumulate_grad(&dx);
                }
                if al.requires_grad() {
                    let xd = x.data();
                    let mut da = vec![T::ZERO; heads];
                    for ni in 0..n {
                        for hd in 0..heads {
                            let base = (ni * heads + hd) * per;
                            let mut acc = T::ZERO;
                            for i in 0..per {
                                acc += g[base + i] * xd[base + i];
                            }
                            da[hd] += -acc / (av[hd] * av[hd]);
                        }
                    }
                    al.accumulate_grad(&da);
                }
            }))
        } else {
            None
        };
        Ok(Tensor::from_op(
            out,
            s,
            vec![self.clone(), alpha.clone()],
            back,
        ))
    }
}
