//! Differentiable elementwise, reduction, normalization and dense ops.

use std::rc::Rc;

use super::graph::{BackwardOp, Var};
use super::tensor::{gemm, Real, Tensor};
use crate::error::{Error, Result};

/// Smallest norm accepted by [`Var::l2_normalize`].
pub const NORM_EPS: f64 = 1e-12;

fn same_shape<T: Real>(op: &str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(format!(
            "{op}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Splits a shape around `axis` into (outer, extent, inner) strides.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::dim(format!(
            "axis {axis} out of range for shape {shape:?}"
        )));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

struct AddBack;
impl<T: Real> BackwardOp<T> for AddBack {
    fn backward(&self, g: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        vec![Some(g.clone()), Some(g.clone())]
    }
}

struct MulBack<T> {
    a: Rc<Tensor<T>>,
    b: Rc<Tensor<T>>,
}
impl<T: Real> BackwardOp<T> for MulBack<T> {
    fn backward(&self, g: &Tensor<T>, needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        let prod = |x: &Tensor<T>| {
            let data = g.data().iter().zip(x.data()).map(|(a, b)| *a * *b).collect();
            Tensor::new(g.shape().to_vec(), data).expect("same shape")
        };
        vec![
            needs[0].then(|| prod(&self.b)),
            needs[1].then(|| prod(&self.a)),
        ]
    }
}

struct ScaleBack<T>(T);
impl<T: Real> BackwardOp<T> for ScaleBack<T> {
    fn backward(&self, g: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        vec![Some(g.map(|v| v * self.0))]
    }
}

/// d/dx for ops whose derivative is a pointwise function of (input, output).
struct PointwiseBack<T> {
    input: Rc<Tensor<T>>,
    output: Rc<Tensor<T>>,
    deriv: fn(T, T) -> T,
}
impl<T: Real> BackwardOp<T> for PointwiseBack<T> {
    fn backward(&self, g: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        let data = g
            .data()
            .iter()
            .zip(self.input.data())
            .zip(self.output.data())
            .map(|((&g, &x), &y)| g * (self.deriv)(x, y))
            .collect();
        vec![Some(Tensor::new(g.shape().to_vec(), data).expect("same shape"))]
    }
}

struct SumBack {
    shape: Vec<usize>,
}
impl<T: Real> BackwardOp<T> for SumBack {
    fn backward(&self, g: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        vec![Some(Tensor::full(self.shape.clone(), g.data()[0]))]
    }
}

struct MeanBack {
    shape: Vec<usize>,
}
impl<T: Real> BackwardOp<T> for MeanBack {
    fn backward(&self, g: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        let n: usize = self.shape.iter().product();
        let v = g.data()[0] / T::lit(n as f64);
        vec![Some(Tensor::full(self.shape.clone(), v))]
    }
}

struct SoftmaxBack<T> {
    output: Rc<Tensor<T>>,
    axis: usize,
    temperature: T,
}
impl<T: Real> BackwardOp<T> for SoftmaxBack<T> {
    fn backward(&self, g: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        let (outer, n, inner) = axis_split(g.shape(), self.axis).expect("validated");
        let y = self.output.data();
        let gd = g.data();
        let mut dx = vec![T::zero(); gd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * n + k) * inner + i;
                let dot: T = (0..n).map(|k| gd[idx(k)] * y[idx(k)]).sum();
                for k in 0..n {
                    dx[idx(k)] = y[idx(k)] * (gd[idx(k)] - dot) / self.temperature;
                }
            }
        }
        vec![Some(Tensor::new(g.shape().to_vec(), dx).expect("same shape"))]
    }
}

struct L2NormBack<T> {
    output: Rc<Tensor<T>>,
    norms: Vec<T>,
    axis: usize,
}
impl<T: Real> BackwardOp<T> for L2NormBack<T> {
    fn backward(&self, g: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        let (outer, n, inner) = axis_split(g.shape(), self.axis).expect("validated");
        let y = self.output.data();
        let gd = g.data();
        let mut dx = vec![T::zero(); gd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * n + k) * inner + i;
                let norm = self.norms[o * inner + i];
                let dot: T = (0..n).map(|k| gd[idx(k)] * y[idx(k)]).sum();
                for k in 0..n {
                    dx[idx(k)] = (gd[idx(k)] - y[idx(k)] * dot) / norm;
                }
            }
        }
        vec![Some(Tensor::new(g.shape().to_vec(), dx).expect("same shape"))]
    }
}

struct LinearBack<T> {
    x: Rc<Tensor<T>>,
    w: Rc<Tensor<T>>,
}
impl<T: Real> BackwardOp<T> for LinearBack<T> {
    fn backward(&self, g: &Tensor<T>, needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        let (n, d) = (self.x.shape()[0], self.x.shape()[1]);
        let k = self.w.shape()[0];
        let dx = needs[0].then(|| {
            let mut out = vec![T::zero(); n * d];
            gemm(n, k, d, g.data(), false, self.w.data(), false, T::zero(), &mut out);
            Tensor::new(vec![n, d], out).expect("shape")
        });
        let dw = needs[1].then(|| {
            let mut out = vec![T::zero(); k * d];
            gemm(k, n, d, g.data(), true, self.x.data(), false, T::zero(), &mut out);
            Tensor::new(vec![k, d], out).expect("shape")
        });
        let db = needs[2].then(|| {
            let mut out = vec![T::zero(); k];
            for row in g.data().chunks(k) {
                for (o, v) in out.iter_mut().zip(row) {
                    *o += *v;
                }
            }
            Tensor::new(vec![k], out).expect("shape")
        });
        vec![dx, dw, db]
    }
}

struct MaxPoolBack {
    input_shape: Vec<usize>,
    argmax: Vec<usize>,
}
impl<T: Real> BackwardOp<T> for MaxPoolBack {
    fn backward(&self, g: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        let mut dx = Tensor::zeros(self.input_shape.clone());
        let d = dx.data_mut();
        for (&src, &gv) in self.argmax.iter().zip(g.data()) {
            d[src] += gv;
        }
        vec![Some(dx)]
    }
}

struct AvgPoolBack {
    input_shape: Vec<usize>,
}
impl<T: Real> BackwardOp<T> for AvgPoolBack {
    fn backward(&self, g: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        let hw: usize = self.input_shape[2..].iter().product();
        let scale = T::one() / T::lit(hw as f64);
        let mut dx = Vec::with_capacity(g.numel() * hw);
        for &gv in g.data() {
            dx.extend(std::iter::repeat(gv * scale).take(hw));
        }
        vec![Some(
            Tensor::new(self.input_shape.clone(), dx).expect("shape"),
        )]
    }
}

struct ReshapeBack {
    shape: Vec<usize>,
}
impl<T: Real> BackwardOp<T> for ReshapeBack {
    fn backward(&self, g: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        vec![Some(g.clone().reshape(self.shape.clone()).expect("same numel"))]
    }
}

struct ConcatBack {
    leads: Vec<usize>,
}
impl<T: Real> BackwardOp<T> for ConcatBack {
    fn backward(&self, g: &Tensor<T>, needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        let mut start = 0;
        self.leads
            .iter()
            .zip(needs)
            .map(|(&len, &need)| {
                let part = need.then(|| g.narrow0(start, len).expect("in range"));
                start += len;
                part
            })
            .collect()
    }
}

struct NarrowBack {
    input_shape: Vec<usize>,
    start: usize,
}
impl<T: Real> BackwardOp<T> for NarrowBack {
    fn backward(&self, g: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        let mut dx = Tensor::zeros(self.input_shape.clone());
        let row: usize = self.input_shape[1..].iter().product();
        dx.data_mut()[self.start * row..self.start * row + g.numel()].copy_from_slice(g.data());
        vec![Some(dx)]
    }
}

impl<'g, T: Real> Var<'g, T> {
    pub fn add(&self, other: &Var<'g, T>) -> Result<Var<'g, T>> {
        let (a, b) = (self.value(), other.value());
        same_shape("add", &a, &b)?;
        let data = a.data().iter().zip(b.data()).map(|(x, y)| *x + *y).collect();
        let out = Tensor::new(a.shape().to_vec(), data)?;
        self.graph().record("add", out, &[*self, *other], AddBack)
    }

    pub fn mul(&self, other: &Var<'g, T>) -> Result<Var<'g, T>> {
        let (a, b) = (self.value(), other.value());
        same_shape("mul", &a, &b)?;
        let data = a.data().iter().zip(b.data()).map(|(x, y)| *x * *y).collect();
        let out = Tensor::new(a.shape().to_vec(), data)?;
        self.graph()
            .record("mul", out, &[*self, *other], MulBack { a, b })
    }

    /// Multiplies by a constant.
    pub fn scale(&self, factor: T) -> Result<Var<'g, T>> {
        let out = self.value().map(|v| v * factor);
        self.graph().record("scale", out, &[*self], ScaleBack(factor))
    }

    fn pointwise(
        &self,
        name: &str,
        f: impl Fn(T) -> T,
        deriv: fn(T, T) -> T,
    ) -> Result<Var<'g, T>> {
        let input = self.value();
        let output = Rc::new(input.map(f));
        self.graph().record(
            name,
            (*output).clone(),
            &[*self],
            PointwiseBack {
                input,
                output,
                deriv,
            },
        )
    }

    pub fn relu(&self) -> Result<Var<'g, T>> {
        self.pointwise(
            "relu",
            |x| if x > T::zero() { x } else { T::zero() },
            |x, _| if x > T::zero() { T::one() } else { T::zero() },
        )
    }

    pub fn exp(&self) -> Result<Var<'g, T>> {
        self.pointwise("exp", T::exp, |_, y| y)
    }

    /// Natural log; non-positive inputs produce a numeric error.
    pub fn log(&self) -> Result<Var<'g, T>> {
        self.pointwise("log", T::ln, |x, _| T::one() / x)
    }

    pub fn sum(&self) -> Result<Var<'g, T>> {
        let v = self.value();
        let out = Tensor::scalar(v.sum());
        self.graph().record(
            "sum",
            out,
            &[*self],
            SumBack {
                shape: v.shape().to_vec(),
            },
        )
    }

    pub fn mean(&self) -> Result<Var<'g, T>> {
        let v = self.value();
        let out = Tensor::scalar(v.sum() / T::lit(v.numel() as f64));
        self.graph().record(
            "mean",
            out,
            &[*self],
            MeanBack {
                shape: v.shape().to_vec(),
            },
        )
    }

    /// Softmax of `x / temperature` along `axis`, max-subtracted.
    pub fn softmax_temp(&self, axis: usize, temperature: T) -> Result<Var<'g, T>> {
        if !(temperature > T::zero()) {
            return Err(Error::param(format!(
                "softmax temperature must be positive, got {temperature}"
            )));
        }
        let x = self.value();
        let (outer, n, inner) = axis_split(x.shape(), axis)?;
        let xd = x.data();
        let mut y = vec![T::zero(); xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * n + k) * inner + i;
                let max = (0..n)
                    .map(|k| xd[idx(k)])
                    .fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for k in 0..n {
                    let e = ((xd[idx(k)] - max) / temperature).exp();
                    y[idx(k)] = e;
                    total += e;
                }
                for k in 0..n {
                    y[idx(k)] = y[idx(k)] / total;
                }
            }
        }
        let output = Rc::new(Tensor::new(x.shape().to_vec(), y)?);
        self.graph().record(
            "softmax_temp",
            (*output).clone(),
            &[*self],
            SoftmaxBack {
                output,
                axis,
                temperature,
            },
        )
    }

    /// Scales each slice along `axis` to unit Euclidean norm.
    pub fn l2_normalize(&self, axis: usize) -> Result<Var<'g, T>> {
        let x = self.value();
        let (outer, n, inner) = axis_split(x.shape(), axis)?;
        let xd = x.data();
        let mut y = vec![T::zero(); xd.len()];
        let mut norms = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * n + k) * inner + i;
                let norm = (0..n).map(|k| xd[idx(k)] * xd[idx(k)]).sum::<T>().sqrt();
                if norm.as_f64() < NORM_EPS {
                    return Err(Error::DegenerateVector {
                        norm: norm.as_f64(),
                        eps: NORM_EPS,
                    });
                }
                for k in 0..n {
                    y[idx(k)] = xd[idx(k)] / norm;
                }
                norms.push(norm);
            }
        }
        let output = Rc::new(Tensor::new(x.shape().to_vec(), y)?);
        self.graph().record(
            "l2_normalize",
            (*output).clone(),
            &[*self],
            L2NormBack {
                output,
                norms,
                axis,
            },
        )
    }

    /// Affine map `x W^T + b` for `x: N x D`, `W: K x D`, `b: K`.
    pub fn linear(&self, weight: &Var<'g, T>, bias: &Var<'g, T>) -> Result<Var<'g, T>> {
        let (x, w, b) = (self.value(), weight.value(), bias.value());
        if x.shape().len() != 2
            || w.shape().len() != 2
            || b.shape().len() != 1
            || x.shape()[1] != w.shape()[1]
            || b.shape()[0] != w.shape()[0]
        {
            return Err(Error::dim(format!(
                "linear: input {:?}, weight {:?}, bias {:?}",
                x.shape(),
                w.shape(),
                b.shape()
            )));
        }
        let (n, d, k) = (x.shape()[0], x.shape()[1], w.shape()[0]);
        let mut out = Vec::with_capacity(n * k);
        for _ in 0..n {
            out.extend_from_slice(b.data());
        }
        gemm(n, d, k, x.data(), false, w.data(), true, T::one(), &mut out);
        let out = Tensor::new(vec![n, k], out)?;
        self.graph()
            .record("linear", out, &[*self, *weight, *bias], LinearBack { x, w })
    }

    /// 2x2 max pooling with stride 2 over an `N x C x H x W` tensor.
    pub fn max_pool2(&self) -> Result<Var<'g, T>> {
        let x = self.value();
        let s = x.shape();
        if s.len() != 4 || s[2] < 2 || s[3] < 2 {
            return Err(Error::dim(format!(
                "max_pool2 needs N x C x H x W with H, W >= 2, got {s:?}"
            )));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (ho, wo) = (h / 2, w / 2);
        let xd = x.data();
        let mut out = Vec::with_capacity(n * c * ho * wo);
        let mut argmax = Vec::with_capacity(n * c * ho * wo);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if xd[idx] > xd[best] {
                            best = idx;
                        }
                    }
                    out.push(xd[best]);
                    argmax.push(best);
                }
            }
        }
        let out = Tensor::new(vec![n, c, ho, wo], out)?;
        self.graph().record(
            "max_pool2",
            out,
            &[*self],
            MaxPoolBack {
                input_shape: s.to_vec(),
                argmax,
            },
        )
    }

    /// Mean over the spatial axes: `N x C x H x W -> N x C`.
    pub fn global_avg_pool(&self) -> Result<Var<'g, T>> {
        let x = self.value();
        let s = x.shape();
        if s.len() != 4 {
            return Err(Error::dim(format!(
                "global_avg_pool needs N x C x H x W, got {s:?}"
            )));
        }
        let hw = s[2] * s[3];
        let scale = T::one() / T::lit(hw as f64);
        let out: Vec<T> = x
            .data()
            .chunks(hw)
            .map(|p| p.iter().copied().sum::<T>() * scale)
            .collect();
        let out = Tensor::new(vec![s[0], s[1]], out)?;
        self.graph().record(
            "global_avg_pool",
            out,
            &[*self],
            AvgPoolBack {
                input_shape: s.to_vec(),
            },
        )
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Var<'g, T>> {
        let x = self.value();
        let old = x.shape().to_vec();
        let out = (*x).clone().reshape(shape)?;
        self.graph()
            .record("reshape", out, &[*self], ReshapeBack { shape: old })
    }

    /// Rows `start..start + len` of the leading axis.
    pub fn narrow0(&self, start: usize, len: usize) -> Result<Var<'g, T>> {
        let x = self.value();
        let out = x.narrow0(start, len)?;
        self.graph().record(
            "narrow0",
            out,
            &[*self],
            NarrowBack {
                input_shape: x.shape().to_vec(),
                start,
            },
        )
    }

    /// Stacks variables along the leading axis.
    pub fn concat0(parts: &[Var<'g, T>]) -> Result<Var<'g, T>> {
        let first = parts.first().ok_or_else(|| Error::dim("concat of zero tensors"))?;
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let refs: Vec<&Tensor<T>> = values.iter().map(|v| v.as_ref()).collect();
        let out = Tensor::concat0(&refs)?;
        let leads = values.iter().map(|v| v.shape()[0]).collect();
        first
            .graph()
            .record("concat0", out, parts, ConcatBack { leads })
    }
}
