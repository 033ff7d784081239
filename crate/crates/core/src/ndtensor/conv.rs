//! 2-D convolution (im2col + GEMM) and per-channel bias.

use std::rc::Rc;

use super::graph::{BackwardOp, Var};
use super::tensor::{gemm, Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    /// Unfolds one image into a `(C*k*k) x (Ho*Wo)` column matrix.
    fn im2col<T: Real>(&self, img: &[T], cols: &mut [T]) {
        let g = self;
        let hw_out = g.ho * g.wo;
        for c in 0..g.c {
            for ki in 0..g.k {
                for kj in 0..g.k {
                    let row = ((c * g.k + ki) * g.k + kj) * hw_out;
                    for oy in 0..g.ho {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        let dst = &mut cols[row + oy * g.wo..row + (oy + 1) * g.wo];
                        if iy < 0 || iy >= g.h as isize {
                            dst.fill(T::zero());
                            continue;
                        }
                        let src = &img[(c * g.h + iy as usize) * g.w..][..g.w];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            *d = if ix < 0 || ix >= g.w as isize {
                                T::zero()
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    /// Scatter-adds a column matrix back into image layout.
    fn col2im<T: Real>(&self, cols: &[T], img: &mut [T]) {
        let g = self;
        let hw_out = g.ho * g.wo;
        for c in 0..g.c {
            for ki in 0..g.k {
                for kj in 0..g.k {
                    let row = ((c * g.k + ki) * g.k + kj) * hw_out;
                    for oy in 0..g.ho {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let dst = &mut img[(c * g.h + iy as usize) * g.w..][..g.w];
                        let src = &cols[row + oy * g.wo..row + (oy + 1) * g.wo];
                        for (ox, s) in src.iter().enumerate() {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                dst[ix as usize] += *s;
                            }
                        }
                    }
                }
            }
        }
    }
}

struct ConvBack<T> {
    x: Rc<Tensor<T>>,
    w: Rc<Tensor<T>>,
    geom: ConvGeom,
}

impl<T: Real> BackwardOp<T> for ConvBack<T> {
    fn backward(&self, g: &Tensor<T>, needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        let geom = self.geom;
        let n = self.x.shape()[0];
        let o = self.w.shape()[0];
        let ckk = geom.c * geom.k * geom.k;
        let hw_out = geom.ho * geom.wo;
        let in_plane = geom.c * geom.h * geom.w;
        let mut dx = needs[0].then(|| vec![T::zero(); self.x.numel()]);
        let mut dw = needs[1].then(|| vec![T::zero(); self.w.numel()]);
        let mut cols = vec![T::zero(); if geom.is_pointwise() { 0 } else { ckk * hw_out }];
        let mut dcols = vec![T::zero(); if dx.is_some() { ckk * hw_out } else { 0 }];
        for b in 0..n {
            let img = &self.x.data()[b * in_plane..(b + 1) * in_plane];
            let gout = &g.data()[b * o * hw_out..(b + 1) * o * hw_out];
            if let Some(dw) = dw.as_mut() {
                let cols_ref: &[T] = if geom.is_pointwise() {
                    img
                } else {
                    geom.im2col(img, &mut cols);
                    &cols
                };
                gemm(o, hw_out, ckk, gout, false, cols_ref, true, T::one(), dw);
            }
            if let Some(dx) = dx.as_mut() {
                let dimg = &mut dx[b * in_plane..(b + 1) * in_plane];
                if geom.is_pointwise() {
                    gemm(ckk, o, hw_out, self.w.data(), true, gout, false, T::zero(), dimg);
                } else {
                    gemm(ckk, o, hw_out, self.w.data(), true, gout, false, T::zero(), &mut dcols);
                    geom.col2im(&dcols, dimg);
                }
            }
        }
        vec![
            dx.map(|d| Tensor::new(self.x.shape().to_vec(), d).expect("shape")),
            dw.map(|d| Tensor::new(self.w.shape().to_vec(), d).expect("shape")),
        ]
    }
}

struct BiasBack {
    channels: usize,
}

impl<T: Real> BackwardOp<T> for BiasBack {
    fn backward(&self, g: &Tensor<T>, needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        let db = needs[1].then(|| {
            let plane: usize = g.shape()[2..].iter().product();
            let mut db = vec![T::zero(); self.channels];
            for (i, chunk) in g.data().chunks(plane).enumerate() {
                db[i % self.channels] += chunk.iter().copied().sum::<T>();
            }
            Tensor::new(vec![self.channels], db).expect("shape")
        });
        vec![needs[0].then(|| g.clone()), db]
    }
}

impl<'g, T: Real> Var<'g, T> {
    /// Cross-correlation of an `N x C x H x W` input with an `O x C x k x k`
    /// weight, zero padding `padding` on every side.
    pub fn conv2d(&self, weight: &Var<'g, T>, stride: usize, padding: usize) -> Result<Var<'g, T>> {
        let (x, w) = (self.value(), weight.value());
        let (xs, ws) = (x.shape(), w.shape());
        let mismatch = || {
            Error::dim(format!(
                "conv2d: input {xs:?} incompatible with weight {ws:?}"
            ))
        };
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] || ws[2] != ws[3] {
            return Err(mismatch());
        }
        if stride == 0 {
            return Err(Error::param("conv2d stride must be >= 1"));
        }
        let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (o, k) = (ws[0], ws[2]);
        if h + 2 * padding < k || wd + 2 * padding < k {
            return Err(mismatch());
        }
        let geom = ConvGeom {
            c,
            h,
            w: wd,
            k,
            stride,
            pad: padding,
            ho: (h + 2 * padding - k) / stride + 1,
            wo: (wd + 2 * padding - k) / stride + 1,
        };
        let ckk = c * k * k;
        let hw_out = geom.ho * geom.wo;
        let in_plane = c * h * wd;
        let mut out = vec![T::zero(); n * o * hw_out];
        let mut cols = vec![T::zero(); if geom.is_pointwise() { 0 } else { ckk * hw_out }];
        for b in 0..n {
            let img = &x.data()[b * in_plane..(b + 1) * in_plane];
            let cols_ref: &[T] = if geom.is_pointwise() {
                img
            } else {
                geom.im2col(img, &mut cols);
                &cols
            };
            let dst = &mut out[b * o * hw_out..(b + 1) * o * hw_out];
            gemm(o, ckk, hw_out, w.data(), false, cols_ref, false, T::zero(), dst);
        }
        let out = Tensor::new(vec![n, o, geom.ho, geom.wo], out)?;
        self.graph()
            .record("conv2d", out, &[*self, *weight], ConvBack { x, w, geom })
    }

    /// Adds `bias[c]` to every element of channel `c` (axis 1).
    pub fn add_channel_bias(&self, bias: &Var<'g, T>) -> Result<Var<'g, T>> {
        let (x, b) = (self.value(), bias.value());
        let xs = x.shape();
        if xs.len() < 2 || b.shape() != [xs[1]] {
            return Err(Error::dim(format!(
                "channel bias {:?} does not match input {xs:?}",
                b.shape()
            )));
        }
        let channels = xs[1];
        let plane: usize = xs[2..].iter().product();
        let mut out = (*x).clone();
        for (i, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
            let bv = b.data()[i % channels];
            for v in chunk {
                *v += bv;
            }
        }
        self.graph()
            .record("add_channel_bias", out, &[*self, *bias], BiasBack { channels })
    }
}
