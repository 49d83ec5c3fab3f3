//! 2D convolution (grouped, strided, zero-padded) and reflect padding.
//!
//! Kernels are direct loops. Forward and all three backward passes are
//! written in gather form so every output element is accumulated by exactly
//! one task in a fixed order: results are bit-identical at any thread count.

use rayon::prelude::*;

use super::{BackFn, Scalar, Tensor};
use crate::error::{Error, Result};

pub(crate) struct ConvGeometry {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub oh: usize,
    pub ow: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

fn conv_geometry(
    input_shape: &[usize],
    weight_shape: &[usize],
    bias_len: Option<usize>,
    stride: usize,
    padding: usize,
    groups: usize,
) -> Result<ConvGeometry> {
    if input_shape.len() != 4 {
        return Err(Error::dimension("conv2d input", input_shape, "4-d NCHW"));
    }
    if weight_shape.len() != 4 {
        return Err(Error::dimension("conv2d weight", weight_shape, "4-d OIkk"));
    }
    if stride == 0 {
        return Err(Error::Parameter("conv2d stride must be >= 1".into()));
    }
    let (n, c_in, h, w) = (
        input_shape[0],
        input_shape[1],
        input_shape[2],
        input_shape[3],
    );
    let (c_out, wc, kh, kw) = (
        weight_shape[0],
        weight_shape[1],
        weight_shape[2],
        weight_shape[3],
    );
    if groups == 0 || c_in % groups != 0 || c_out % groups != 0 {
        return Err(Error::dimension(
            "conv2d groups",
            &[c_in, c_out, groups],
            "groups dividing both input and output channels",
        ));
    }
    if wc != c_in / groups {
        return Err(Error::dimension(
            "conv2d weight",
            weight_shape,
            format!("input-channel extent {} (= C/groups)", c_in / groups),
        ));
    }
    if let Some(bl) = bias_len {
        if bl != c_out {
            return Err(Error::dimension("conv2d bias", &[bl], format!("{} channels", c_out)));
        }
    }
    let h_eff = h + 2 * padding;
    let w_eff = w + 2 * padding;
    if h_eff < kh || w_eff < kw {
        return Err(Error::dimension(
            "conv2d input",
            input_shape,
            format!("padded extents >= kernel {}x{}", kh, kw),
        ));
    }
    let oh = (h_eff - kh) / stride + 1;
    let ow = (w_eff - kw) / stride + 1;
    Ok(ConvGeometry {
        n,
        c_in,
        h,
        w,
        c_out,
        kh,
        kw,
        oh,
        ow,
        stride,
        padding,
        groups,
    })
}

/// Forward convolution on raw slices. Parallel over (batch, out-channel) planes.
pub(crate) fn conv2d_raw<T: Scalar>(
    input: &[T],
    weight: &[T],
    bias: Option<&[T]>,
    g: &ConvGeometry,
) -> Vec<T> {
    let ConvGeometry {
        n,
        c_in,
        h,
        w,
        c_out,
        kh,
        kw,
        oh,
        ow,
        stride,
        padding,
        groups,
    } = *g;
    let cg_in = c_in / groups;
    let cg_out = c_out / groups;
    let mut out = vec![T::ZERO; n * c_out * oh * ow];
    out.par_chunks_mut(oh * ow)
        .enumerate()
        .for_each(|(plane, out_plane)| {
            let ni = plane / c_out;
            let oc = plane % c_out;
            let grp = oc / cg_out;
            let b = bias.map(|b| b[oc]).unwrap_or(T::ZERO);
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b;
                    for icl in 0..cg_in {
                        let ic = grp * cg_in + icl;
                        let in_plane = &input[(ni * c_in + ic) * h * w..(ni * c_in + ic + 1) * h * w];
                        let w_base = ((oc * cg_in) + icl) * kh * kw;
                        for ky in 0..kh {
                            let iy = (oy * stride + ky) as isize - padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * stride + kx) as isize - padding as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                acc += in_plane[iy as usize * w + ix as usize]
                                    * weight[w_base + ky * kw + kx];
                            }
                        }
                    }
                    out_plane[oy * ow + ox] = acc;
                }
            }
        });
    out
}

fn conv2d_backward_input<T: Scalar>(grad: &[T], weight: &[T], g: &ConvGeometry) -> Vec<T> {
    let ConvGeometry {
        n,
        c_in,
        h,
        w,
        c_out,
        kh,
        kw,
        oh,
        ow,
        stride,
        padding,
        groups,
    } = *g;
    let cg_in = c_in / groups;
    let cg_out = c_out / groups;
    let mut din = vec![T::ZERO; n * c_in * h * w];
    din.par_chunks_mut(h * w).enumerate().for_each(|(plane, dplane)| {
        let ni = plane / c_in;
        let ic = plane % c_in;
        let grp = ic / cg_in;
        let icl = ic % cg_in;
        for iy in 0..h {
            for ix in 0..w {
                let mut acc = T::ZERO;
                for ocl in 0..cg_out {
                    let oc = grp * cg_out + ocl;
                    let g_plane = &grad[(ni * c_out + oc) * oh * ow..(ni * c_out + oc + 1) * oh * ow];
                    let w_base = (oc * cg_in + icl) * kh * kw;
                    for ky in 0..kh {
                        let oy_num = iy as isize + padding as isize - ky as isize;
                        if oy_num < 0 || oy_num % stride as isize != 0 {
                            continue;
                        }
                        let oy = (oy_num / stride as isize) as usize;
                        if oy >= oh {
                            continue;
                        }
                        for kx in 0..kw {
                            let ox_num = ix as isize + padding as isize - kx as isize;
                            if ox_num < 0 || ox_num % stride as isize != 0 {
                                continue;
                            }
                            let ox = (ox_num / stride as isize) as usize;
                            if ox >= ow {
                                continue;
                            }
                            acc += g_plane[oy * ow + ox] * weight[w_base + ky * kw + kx];
                        }
                    }
                }
                dplane[iy * w + ix] = acc;
            }
        }
    });
    din
}

fn conv2d_backward_weight<T: Scalar>(grad: &[T], input: &[T], g: &ConvGeometry) -> Vec<T> {
    let ConvGeometry {
        n,
        c_in,
        h,
        w,
        c_out,
        kh,
        kw,
        oh,
        ow,
        stride,
        padding,
        groups,
    } = *g;
    let cg_in = c_in / groups;
    let cg_out = c_out / groups;
    let mut dw = vec![T::ZERO; c_out * cg_in * kh * kw];
    dw.par_chunks_mut(cg_in * kh * kw)
        .enumerate()
        .for_each(|(oc, dwc)| {
            let grp = oc / cg_out;
            for icl in 0..cg_in {
                let ic = grp * cg_in + icl;
                for ky in 0..kh {
                    for kx in 0..kw {
                        let mut acc = T::ZERO;
                        for ni in 0..n {
                            let g_plane =
                                &grad[(ni * c_out + oc) * oh * ow..(ni * c_out + oc + 1) * oh * ow];
                            let in_plane =
                                &input[(ni * c_in + ic) * h * w..(ni * c_in + ic + 1) * h * w];
                            for oy in 0..oh {
                                let iy = (oy * stride + ky) as isize - padding as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for ox in 0..ow {
                                    let ix = (ox * stride + kx) as isize - padding as isize;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    acc += g_plane[oy * ow + ox]
                                        * in_plane[iy as usize * w + ix as usize];
                                }
                            }
                        }
                        dwc[icl * kh * kw + ky * kw + kx] = acc;
                    }
                }
            }
        });
    dw
}

impl<T: Scalar> Tensor<T> {
    /// Grouped 2D convolution with zero padding.
    ///
    /// `self`: (N, C, H, W); `weight`: (O, C/groups, kh, kw); `bias`: (O).
    /// `groups == C` with `O == C` gives a depthwise convolution; a 1x1 kernel
    /// gives a pointwise (channel-mixing) convolution.
    pub fn conv2d(
        &self,
        weight: &Tensor<T>,
        bias: Option<&Tensor<T>>,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Tensor<T>> {
        let geom = conv_geometry(
            &self.shape(),
            &weight.shape(),
            bias.map(|b| b.numel()),
            stride,
            padding,
            groups,
        )?;
        let out = {
            let x = self.data();
            let wt = weight.data();
            match bias {
                Some(b) => conv2d_raw(&x, &wt, Some(&b.data()), &geom),
                None => conv2d_raw(&x, &wt, None, &geom),
            }
        };
        let out_shape = vec![geom.n, geom.c_out, geom.oh, geom.ow];

        let needs = self.requires_grad()
            || weight.requires_grad()
            || bias.map(|b| b.requires_grad()).unwrap_or(false);
        let mut parents = vec![self.clone(), weight.clone()];
        if let Some(b) = bias {
            parents.push(b.clone());
        }
        let back: Option<BackFn<T>> = if needs {
            let x = self.clone();
            let wt = weight.clone();
            let bs = bias.cloned();
            Some(Box::new(move |g: &[T]| {
                if x.requires_grad() {
                    let din = conv2d_backward_input(g, &wt.data(), &geom);
                    x.accumulate_grad(&din);
                }
                if wt.requires_grad() {
                    let dw = conv2d_backward_weight(g, &x.data(), &geom);
                    wt.accumulate_grad(&dw);
                }
                if let Some(b) = &bs {
                    if b.requires_grad() {
                        let per = geom.oh * geom.ow;
                        let mut db = vec![T::ZERO; geom.c_out];
                        for ni in 0..geom.n {
                            for oc in 0..geom.c_out {
                                let plane = &g[(ni * geom.c_out + oc) * per
                                    ..(ni * geom.c_out + oc + 1) * per];
                                let mut acc = T::ZERO;
                                for v in plane {
                                    acc += *v;
                                }
                                db[oc] += acc;
                            }
                        }
                        b.accumulate_grad(&db);
                    }
                }
            }))
        } else {
            None
        };
        Ok(Tensor::from_op(out, out_shape, parents, back))
    }

    /// Mirror padding (reflect-101: the edge row/column is not repeated).
    pub fn reflect_pad2d(&self, pad: usize) -> Result<Tensor<T>> {
        let s = self.shape();
        if s.len() != 4 {
            return Err(Error::dimension("reflect_pad2d", &s, "4-d NCHW"));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        if pad == 0 {
            return self.reshape(&s);
        }
        if h <= pad || w <= pad {
            return Err(Error::dimension(
                "reflect_pad2d",
                &s,
                format!("spatial extents > pad {}", pad),
            ));
        }
        let (oh, ow) = (h + 2 * pad, w + 2 * pad);
        let reflect = |i: isize, len: usize| -> usize {
            let len = len as isize;
            let mut v = i;
            if v < 0 {
                v = -v;
            }
            if v >= len {
                v = 2 * len - 2 - v;
            }
            v as usize
        };
        let mut out = vec![T::ZERO; n * c * oh * ow];
        {
            let d = self.data();
            for plane in 0..n * c {
                let src = &d[plane * h * w..(plane + 1) * h * w];
                let dst = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = reflect(oy as isize - pad as isize, h);
                    for ox in 0..ow {
                        let ix = reflect(ox as isize - pad as isize, w);
                        dst[oy * ow + ox] = src[iy * w + ix];
                    }
                }
            }
        }
        let back: Option<BackFn<T>> = if self.requires_grad() {
            let a = self.clone();
            Some(Box::new(move |g: &[T]| {
                let mut d = vec![T::ZERO; n * c * h * w];
                for plane in 0..n * c {
                    let gp = &g[plane * oh * ow..(plane + 1) * oh * ow];
                    let dp = &mut d[plane * h * w..(plane + 1) * h * w];
                    for oy in 0..oh {
                        let iy = reflect(oy as isize - pad as isize, h);
                        for ox in 0..ow {
                            let ix = reflect(ox as isize - pad as isize, w);
                            dp[iy * w + ix] += gp[oy * ow + ox];
                        }
                    }
                }
                a.accumulate_grad(&d);
            }))
        } else {
            None
        };
        Ok(Tensor::from_op(
            out,
            vec![n, c, oh, ow],
            vec![self.clone()],
            back,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_kernel_passes_input_through() {
        let x = Tensor::<f64>::constant((1..=9).map(|v| v as f64).collect(), &[1, 1, 3, 3]).unwrap();
        let w = Tensor::constant(vec![1.0], &[1, 1, 1, 1]).unwrap();
        let y = x.conv2d(&w, None, 1, 0, 1).unwrap();
        assert_eq!(y.shape(), vec![1, 1, 3, 3]);
        assert_eq!(y.to_vec(), x.to_vec());
    }

    #[test]
    fn sobel_on_vertical_step() {
        // 5x5, columns 0-1 are 0, columns 2-4 are 1
        let mut img = vec![0.0f64; 25];
        for r in 0..5 {
            for c in 2..5 {
                img[r * 5 + c] = 1.0;
            }
        }
        let x = Tensor::constant(img, &[1, 1, 5, 5]).unwrap();
        let gx = Tensor::constant(
            vec![-1.0, 0.0, 1.0, -2.0, 0.0, 2.0, -1.0, 0.0, 1.0],
            &[1, 1, 3, 3],
        )
        .unwrap();
        let y = x.conv2d(&gx, None, 1, 0, 1).unwrap();
        // valid 3x3 output; |response| is 4 in the two columns whose window
        // straddles the step, 0 once the window sits in the constant region
        let v = y.to_vec();
        let peak = v.iter().cloned().fold(f64::MIN, f64::max);
        assert_eq!(peak, 4.0);
        assert_eq!(v[0], 4.0);
        assert_eq!(v[1], 4.0);
        assert_eq!(v[2], 0.0);
    }

    #[test]
    fn depthwise_isolates_channels() {
        let c = 8usize;
        let mut data = vec![0.0f64; c * 9];
        for (i, v) in data.iter_mut().enumerate() {
            *v = (i as f64 * 0.7).sin();
        }
        let x = Tensor::constant(data.clone(), &[1, c, 3, 3]).unwrap();
        let w = Tensor::constant(vec![0.5; c * 9], &[c, 1, 3, 3]).unwrap();
        let y0 = x.conv2d(&w, None, 1, 1, c).unwrap();
        assert_eq!(y0.shape(), vec![1, c, 3, 3]);
        // zeroing channel j changes only output channel j
        let j = 3usize;
        let mut data2 = data.clone();
        for v in &mut data2[j * 9..(j + 1) * 9] {
            *v = 0.0;
        }
        let x2 = Tensor::constant(data2, &[1, c, 3, 3]).unwrap();
        let y1 = x2.conv2d(&w, None, 1, 1, c).unwrap();
        let a = y0.to_vec();
        let b = y1.to_vec();
        for ch in 0..c {
            let changed = (0..9).any(|i| a[ch * 9 + i] != b[ch * 9 + i]);
            assert_eq!(changed, ch == j, "channel {}", ch);
        }
    }

    #[test]
    fn rejects_group_mismatch() {
        let x = Tensor::<f32>::zeros(&[1, 6, 4, 4]);
        let w = Tensor::<f32>::zeros(&[4, 3, 3, 3]);
        // groups=4 does not divide 6 input channels
        assert!(matches!(
            x.conv2d(&w, None, 1, 1, 4),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn conv_linearity() {
        let a: Vec<f64> = (0..16).map(|i| (i as f64 * 0.3).cos()).collect();
        let b: Vec<f64> = (0..16).map(|i| (i as f64 * 0.9).sin()).collect();
        let w: Vec<f64> = (0..9).map(|i| 0.1 * i as f64 - 0.4).collect();
        let wt = Tensor::constant(w, &[1, 1, 3, 3]).unwrap();
        let xa = Tensor::constant(a.clone(), &[1, 1, 4, 4]).unwrap();
        let xb = Tensor::constant(b.clone(), &[1, 1, 4, 4]).unwrap();
        let mixed: Vec<f64> = a.iter().zip(b.iter()).map(|(x, y)| 2.0 * x - 3.0 * y).collect();
        let xm = Tensor::constant(mixed, &[1, 1, 4, 4]).unwrap();
        let ya = xa.conv2d(&wt, None, 1, 1, 1).unwrap();
        let yb = xb.conv2d(&wt, None, 1, 1, 1).unwrap();
        let ym = xm.conv2d(&wt, None, 1, 1, 1).unwrap();
        for i in 0..16 {
            let lin = 2.0 * ya.to_vec()[i] - 3.0 * yb.to_vec()[i];
            assert!((ym.to_vec()[i] - lin).abs() < 1e-6);
        }
    }

    #[test]
    fn reflect_pad_mirrors_without_edge_repeat() {
        let x = Tensor::<f64>::constant(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0], &[1, 1, 3, 3])
            .unwrap();
        let y = x.reflect_pad2d(1).unwrap();
        assert_eq!(y.shape(), vec![1, 1, 5, 5]);
        let v = y.to_vec();
        // first padded row mirrors row 1 (not row 0)
        assert_eq!(&v[0..5], &[5.0, 4.0, 5.0, 6.0, 5.0]);
        // center row: [5 4 5 6 5] -> row index 2 of output is original row 1
        assert_eq!(&v[10..15], &[5.0, 4.0, 5.0, 6.0, 5.0]);
    }

    #[test]
    fn stride_two_output_extents() {
        let x = Tensor::<f32>::zeros(&[2, 3, 8, 8]);
        let w = Tensor::<f32>::zeros(&[4, 3, 3, 3]);
        let y = x.conv2d(&w, None, 2, 1, 1).unwrap();
        assert_eq!(y.shape(), vec![2, 4, 4, 4]);
    }
}
