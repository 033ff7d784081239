//! Saliency maps and the non-uniform sampling grids they induce.
//!
//! A backbone stage's feature map is condensed by a 1x1 convolution and a
//! temperature softmax into a saliency map `S`. Each output cell `(x, y)` of
//! the grid then receives the source coordinate
//!
//! ```text
//! x'(x, y) = sum_{u,v} S(u, v) k((x, y), (u, v)) u_src / sum_{u,v} S(u, v) k((x, y), (u, v))
//! ```
//!
//! (and likewise for `y'`) with a truncated Gaussian distance kernel `k`, so
//! salient regions pull sample points towards themselves and get magnified.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::ndtensor::{BackwardOp, Graph, Real, Tensor, Var};
use crate::resampler::{resize_var, uniform_coord, SamplingGrid};

/// Normalized 2-D saliency distribution.
#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyMap<T: Real> {
    height: usize,
    width: usize,
    values: Vec<T>,
}

impl<T: Real> SaliencyMap<T> {
    /// Wraps a non-negative map that sums to one within `1e-6`.
    pub fn new(height: usize, width: usize, values: Vec<T>) -> Result<Self> {
        if values.len() != height * width || height == 0 || width == 0 {
            return Err(Error::dim(format!(
                "saliency map {height} x {width} given {} values",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite() || *v < T::zero()) {
            return Err(Error::param("saliency entries must be finite and non-negative"));
        }
        let total: T = values.iter().copied().sum();
        if (total.as_f64() - 1.0).abs() > 1e-6 {
            return Err(Error::param(format!("saliency map sums to {total}, not 1")));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    /// Normalizes arbitrary non-negative weights into a map.
    pub fn from_weights(height: usize, width: usize, weights: Vec<T>) -> Result<Self> {
        let total: T = weights.iter().copied().sum();
        if !(total > T::zero()) {
            return Err(Error::param("saliency weights must have positive mass"));
        }
        Self::new(height, width, weights.into_iter().map(|w| w / total).collect())
    }

    pub fn uniform(height: usize, width: usize) -> Self {
        let v = T::one() / T::lit((height * width) as f64);
        Self {
            height,
            width,
            values: vec![v; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn get(&self, x: usize, y: usize) -> T {
        self.values[y * self.width + x]
    }

    pub fn argmax(&self) -> (usize, usize) {
        let i = self
            .values
            .iter()
            .enumerate()
            .fold(0, |best, (i, v)| if *v > self.values[best] { i } else { best });
        (i % self.width, i / self.width)
    }

    pub fn to_tensor(&self) -> Tensor<T> {
        Tensor::new(vec![1, 1, self.height, self.width], self.values.clone()).expect("shape")
    }

    /// Writes the map as a single-channel PFM image.
    pub fn write_pfm(&self, path: &Path) -> Result<()> {
        let data: Vec<f32> = self.values.iter().map(|v| v.as_f64() as f32).collect();
        write_pfm(path, self.width, self.height, 1, &data)
    }
}

/// Square truncated Gaussian `exp(-(dx^2 + dy^2) / (2 sigma^2))`, side `2r + 1`.
///
/// Not normalized: the constant cancels in the grid ratio.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceKernel {
    sigma: f64,
    radius: usize,
    weights: Vec<f64>,
}

impl DistanceKernel {
    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn radius(&self) -> usize {
        self.radius
    }

    pub fn side(&self) -> usize {
        2 * self.radius + 1
    }

    /// Weight at offset `(dx, dy)` from the center.
    pub fn weight(&self, dx: isize, dy: isize) -> f64 {
        let r = self.radius as isize;
        assert!(dx.abs() <= r && dy.abs() <= r, "offset outside kernel");
        self.weights[((dy + r) as usize) * self.side() + (dx + r) as usize]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// One axis of the separable kernel, offsets `-r..=r`.
    fn factor<T: Real>(&self) -> Vec<T> {
        let r = self.radius as isize;
        (-r..=r)
            .map(|d| T::lit((-((d * d) as f64) / (2.0 * self.sigma * self.sigma)).exp()))
            .collect()
    }
}

pub fn make_kernel(sigma: f64, radius: usize) -> Result<DistanceKernel> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::param(format!("kernel sigma must be positive, got {sigma}")));
    }
    if radius == 0 {
        return Err(Error::param("kernel radius must be at least 1"));
    }
    let r = radius as isize;
    let mut weights = Vec::with_capacity((2 * radius + 1).pow(2));
    for dy in -r..=r {
        for dx in -r..=r {
            weights.push((-((dx * dx + dy * dy) as f64) / (2.0 * sigma * sigma)).exp());
        }
    }
    Ok(DistanceKernel {
        sigma,
        radius,
        weights,
    })
}

/// Default kernel for an `out_size` grid: `sigma = out_size / 9`,
/// `radius = ceil(3 sigma)`.
pub fn default_kernel(out_size: usize) -> Result<DistanceKernel> {
    let sigma = out_size as f64 / 9.0;
    make_kernel(sigma, (3.0 * sigma).ceil() as usize)
}

/// Saliency map of one `C x h x w` feature map under a `1 x C x 1 x 1`
/// projection and softmax temperature `tau_o`.
pub fn saliency_from_features<T: Real>(
    features: &Tensor<T>,
    proj_weight: &Tensor<T>,
    tau_o: T,
) -> Result<SaliencyMap<T>> {
    let s = features.shape();
    if s.len() != 3 {
        return Err(Error::dim(format!("features must be C x h x w, got {s:?}")));
    }
    let g = Graph::new();
    let f = g.constant(features.clone().reshape(vec![1, s[0], s[1], s[2]])?);
    let w = g.constant(proj_weight.clone());
    let map = saliency_var(&f, &w, tau_o)?;
    SaliencyMap::new(s[1], s[2], map.value().data().to_vec())
}

/// Batched, differentiable saliency: `N x C x h x w` features and a
/// `1 x C x 1 x 1` projection give an `N x 1 x h x w` map, each slice
/// summing to one.
pub fn saliency_var<'g, T: Real>(
    features: &Var<'g, T>,
    proj_weight: &Var<'g, T>,
    tau_o: T,
) -> Result<Var<'g, T>> {
    let s = features.shape();
    let logits = features.conv2d(proj_weight, 1, 0)?;
    let ls = logits.shape();
    if ls[1] != 1 {
        return Err(Error::dim(format!(
            "saliency projection must produce one channel, got {ls:?}"
        )));
    }
    logits
        .reshape(vec![s[0], s[2] * s[3]])?
        .softmax_temp(1, tau_o)?
        .reshape(vec![s[0], 1, s[2], s[3]])
}

/// Box-truncated separable correlation of an `h x w` plane with `k (x) k`.
fn box_correlate<T: Real>(src: &[T], h: usize, w: usize, k: &[T], r: usize) -> Vec<T> {
    let mut tmp = vec![T::zero(); h * w];
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        for x in 0..w {
            let lo = x.saturating_sub(r);
            let hi = (x + r).min(w - 1);
            let mut acc = T::zero();
            for u in lo..=hi {
                acc += row[u] * k[u + r - x];
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![T::zero(); h * w];
    for y in 0..h {
        let lo = y.saturating_sub(r);
        let hi = (y + r).min(h - 1);
        for v in lo..=hi {
            let kv = k[v + r - y];
            let src_row = &tmp[v * w..(v + 1) * w];
            for (o, s) in out[y * w..(y + 1) * w].iter_mut().zip(src_row) {
                *o += kv * *s;
            }
        }
    }
    out
}

/// Forward values of the grid ratio for one map.
struct GridPlane<T> {
    xs: Vec<T>,
    ys: Vec<T>,
    denom: Vec<T>,
    /// Cells whose kernel mass underflowed; they keep the uniform coordinate.
    fallback: Vec<bool>,
}

struct GridGeometry<T> {
    h: usize,
    w: usize,
    radius: usize,
    factor: Vec<T>,
    /// Source-pixel coordinate of each grid column / row.
    col_src: Vec<T>,
    row_src: Vec<T>,
}

impl<T: Real> GridGeometry<T> {
    fn new(kernel: &DistanceKernel, h: usize, w: usize, src_h: usize, src_w: usize) -> Self {
        Self {
            h,
            w,
            radius: kernel.radius,
            factor: kernel.factor(),
            col_src: (0..w).map(|x| uniform_coord(x, w, src_w)).collect(),
            row_src: (0..h).map(|y| uniform_coord(y, h, src_h)).collect(),
        }
    }

    fn corr(&self, plane: &[T]) -> Vec<T> {
        box_correlate(plane, self.h, self.w, &self.factor, self.radius)
    }

    fn forward(&self, s: &[T]) -> GridPlane<T> {
        let (h, w) = (self.h, self.w);
        let sx: Vec<T> = s.iter().enumerate().map(|(i, v)| *v * self.col_src[i % w]).collect();
        let sy: Vec<T> = s.iter().enumerate().map(|(i, v)| *v * self.row_src[i / w]).collect();
        let denom = self.corr(s);
        let nx = self.corr(&sx);
        let ny = self.corr(&sy);
        let mut xs = Vec::with_capacity(h * w);
        let mut ys = Vec::with_capacity(h * w);
        let mut fallback = Vec::with_capacity(h * w);
        for i in 0..h * w {
            let d = denom[i];
            if d > T::min_positive_value() {
                // a ratio of non-negative sums may exceed its range by one ulp
                let x = (nx[i] / d).min(self.col_src[w - 1]).max(T::zero());
                let y = (ny[i] / d).min(self.row_src[h - 1]).max(T::zero());
                xs.push(x);
                ys.push(y);
                fallback.push(false);
            } else {
                xs.push(self.col_src[i % w]);
                ys.push(self.row_src[i / w]);
                fallback.push(true);
            }
        }
        GridPlane {
            xs,
            ys,
            denom,
            fallback,
        }
    }

    /// d(loss)/dS given upstream gradients on the x and y coordinates.
    fn backward(&self, plane: &GridPlane<T>, gx: &[T], gy: &[T]) -> Vec<T> {
        let n = self.h * self.w;
        let mut ax = vec![T::zero(); n];
        let mut bx = vec![T::zero(); n];
        let mut ay = vec![T::zero(); n];
        let mut by = vec![T::zero(); n];
        for i in 0..n {
            if plane.fallback[i] {
                continue;
            }
            let inv = T::one() / plane.denom[i];
            ax[i] = gx[i] * inv;
            bx[i] = gx[i] * plane.xs[i] * inv;
            ay[i] = gy[i] * inv;
            by[i] = gy[i] * plane.ys[i] * inv;
        }
        let (kax, kbx, kay, kby) = (self.corr(&ax), self.corr(&bx), self.corr(&ay), self.corr(&by));
        (0..n)
            .map(|i| {
                self.col_src[i % self.w] * kax[i] - kbx[i] + self.row_src[i / self.w] * kay[i]
                    - kby[i]
            })
            .collect()
    }
}

/// Grid of one saliency map already at grid resolution.
pub fn grid_from_saliency<T: Real>(
    s: &SaliencyMap<T>,
    kernel: &DistanceKernel,
    out_h: usize,
    out_w: usize,
    src_h: usize,
    src_w: usize,
) -> Result<SamplingGrid<T>> {
    let g = Graph::new();
    let sv = g.constant(s.to_tensor());
    let grid = saliency_grid(&sv, kernel, out_h, out_w, src_h, src_w)?;
    let t = grid.value().as_ref().clone().reshape(vec![out_h, out_w, 2])?;
    SamplingGrid::from_tensor(&t, src_h, src_w)
}

struct SaliencyGridBack<T> {
    geom: GridGeometry<T>,
    planes: Vec<GridPlane<T>>,
}

impl<T: Real> BackwardOp<T> for SaliencyGridBack<T> {
    fn backward(&self, g: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        let n = self.planes.len();
        let cells = self.geom.h * self.geom.w;
        let mut ds = Vec::with_capacity(n * cells);
        for (b, plane) in self.planes.iter().enumerate() {
            let gd = &g.data()[b * cells * 2..(b + 1) * cells * 2];
            let gx: Vec<T> = gd.iter().step_by(2).copied().collect();
            let gy: Vec<T> = gd.iter().skip(1).step_by(2).copied().collect();
            ds.extend(self.geom.backward(plane, &gx, &gy));
        }
        vec![Some(
            Tensor::new(vec![n, 1, self.geom.h, self.geom.w], ds).expect("shape"),
        )]
    }
}

/// Differentiable batched grid construction.
///
/// `s` is `N x 1 x h x w`; maps whose size differs from `out_h x out_w` are
/// first resized bilinearly. Returns `N x out_h x out_w x 2` source
/// coordinates in pixel units of a `src_h x src_w` image.
pub fn saliency_grid<'g, T: Real>(
    s: &Var<'g, T>,
    kernel: &DistanceKernel,
    out_h: usize,
    out_w: usize,
    src_h: usize,
    src_w: usize,
) -> Result<Var<'g, T>> {
    let shape = s.shape();
    if shape.len() != 4 || shape[1] != 1 {
        return Err(Error::dim(format!(
            "saliency must be N x 1 x h x w, got {shape:?}"
        )));
    }
    if kernel.radius >= out_h.min(out_w) {
        return Err(Error::param(format!(
            "kernel radius {} must be below the grid size {out_h} x {out_w}",
            kernel.radius
        )));
    }
    if src_h < 2 || src_w < 2 || out_h < 2 || out_w < 2 {
        return Err(Error::param("grid and source must be at least 2 x 2"));
    }
    let resized = resize_var(s, out_h, out_w)?;
    let values: Rc<Tensor<T>> = resized.value();
    let geom = GridGeometry::new(kernel, out_h, out_w, src_h, src_w);
    let cells = out_h * out_w;
    let mut out = Vec::with_capacity(shape[0] * cells * 2);
    let mut planes = Vec::with_capacity(shape[0]);
    for plane in values.data().chunks(cells) {
        let p = geom.forward(plane);
        for (x, y) in p.xs.iter().zip(&p.ys) {
            out.push(*x);
            out.push(*y);
        }
        planes.push(p);
    }
    let out = Tensor::new(vec![shape[0], out_h, out_w, 2], out)?;
    s.graph().record(
        "saliency_grid",
        out,
        &[resized],
        SaliencyGridBack { geom, planes },
    )
}

/// Writes a PFM image (`channels` 1 or 3), rows given top to bottom.
pub fn write_pfm(path: &Path, width: usize, height: usize, channels: usize, data: &[f32]) -> Result<()> {
    if channels != 1 && channels != 3 {
        return Err(Error::param("PFM supports 1 or 3 channels"));
    }
    if data.len() != width * height * channels {
        return Err(Error::dim("PFM payload does not match its size"));
    }
    let mut out = BufWriter::new(File::create(path)?);
    let tag = if channels == 1 { "Pf" } else { "PF" };
    write!(out, "{tag}\n{width} {height}\n-1.0\n")?;
    // PFM stores the bottom row first
    for row in data.chunks(width * channels).rev() {
        for v in row {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Reads a little-endian PFM image; returns `(width, height, channels, rows
/// top to bottom)`.
pub fn read_pfm(path: &Path) -> Result<(usize, usize, usize, Vec<f32>)> {
    let bad = |m: &str| Error::Ingestion {
        path: path.to_path_buf(),
        reason: m.to_string(),
    };
    let mut reader = BufReader::new(File::open(path)?);
    let mut line = String::new();
    reader.read_line(&mut line)?;
    let channels = match line.trim() {
        "Pf" => 1,
        "PF" => 3,
        _ => return Err(bad("missing PFM tag")),
    };
    line.clear();
    reader.read_line(&mut line)?;
    let dims: Vec<usize> = line
        .split_whitespace()
        .map(|t| t.parse().map_err(|_| bad("bad PFM size")))
        .collect::<Result<_>>()?;
    if dims.len() != 2 {
        return Err(bad("bad PFM size"));
    }
    line.clear();
    reader.read_line(&mut line)?;
    let scale: f32 = line.trim().parse().map_err(|_| bad("bad PFM scale"))?;
    if scale >= 0.0 {
        return Err(bad("big-endian PFM is not supported"));
    }
    let (w, h) = (dims[0], dims[1]);
    let mut bytes = vec![0u8; w * h * channels * 4];
    reader.read_exact(&mut bytes)?;
    let values: Vec<f32> = bytes
        .chunks(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    let rows: Vec<f32> = values
        .chunks(w * channels)
        .rev()
        .flatten()
        .copied()
        .collect();
    Ok((w, h, channels, rows))
}

/// Writes a grid as a 3-channel PFM holding `(x', y', 0)` per cell.
pub fn write_grid_pfm<T: Real>(grid: &SamplingGrid<T>, path: &Path) -> Result<()> {
    let mut data = Vec::with_capacity(grid.out_h() * grid.out_w() * 3);
    for (x, y) in grid.xs().iter().zip(grid.ys()) {
        data.extend([x.as_f64() as f32, y.as_f64() as f32, 0.0]);
    }
    write_pfm(path, grid.out_w(), grid.out_h(), 3, &data)
}
