//! Uniform and grid-driven image resampling by backward mapping.
//!
//! Coordinates are corner-aligned: `(0, 0)` is the center of the top-left
//! pixel and `(W - 1, H - 1)` the center of the bottom-right one. Every output
//! pixel is the bilinear blend of the four source pixels around its grid
//! coordinate. Coordinates outside the source are clamped.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::ndtensor::{BackwardOp, Real, Tensor, Var};

/// Channel-major image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image<T: Real> {
    tensor: Tensor<T>,
}

impl<T: Real> Image<T> {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        Self::from_tensor(Tensor::new(vec![channels, height, width], data)?)
    }

    pub fn from_tensor(tensor: Tensor<T>) -> Result<Self> {
        let s = tensor.shape();
        if s.len() != 3 || s[1] < 2 || s[2] < 2 {
            return Err(Error::dim(format!(
                "image needs C x H x W with H, W >= 2, got {s:?}"
            )));
        }
        if let Some(bad) = tensor
            .data()
            .iter()
            .find(|v| !v.is_finite() || **v < T::zero() || **v > T::one())
        {
            return Err(Error::param(format!("image value {bad} outside [0, 1]")));
        }
        Ok(Self { tensor })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: T) -> Result<Self> {
        Self::from_tensor(Tensor::full(vec![channels, height, width], value))
    }

    pub fn channels(&self) -> usize {
        self.tensor.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.tensor.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.tensor.shape()[2]
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.tensor
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.tensor
    }

    pub fn data(&self) -> &[T] {
        self.tensor.data()
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> T {
        self.tensor.data()[(c * self.height() + y) * self.width() + x]
    }

    pub fn plane(&self, c: usize) -> &[T] {
        let hw = self.height() * self.width();
        &self.tensor.data()[c * hw..(c + 1) * hw]
    }

    pub fn cast<U: Real>(&self) -> Image<U> {
        Image {
            tensor: self.tensor.cast(),
        }
    }
}

/// Source coordinate of cell `i` of an `out`-cell uniform grid spanning
/// `src` pixels.
pub fn uniform_coord<T: Real>(i: usize, out: usize, src: usize) -> T {
    if out <= 1 {
        return T::zero();
    }
    T::lit(i as f64 * (src - 1) as f64 / (out - 1) as f64)
}

/// Per-output-pixel source coordinates into a `src_h x src_w` image.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplingGrid<T: Real> {
    out_h: usize,
    out_w: usize,
    src_h: usize,
    src_w: usize,
    xs: Vec<T>,
    ys: Vec<T>,
}

impl<T: Real> SamplingGrid<T> {
    /// Builds a grid from raw coordinates, clamping them into the source.
    pub fn new(
        out_h: usize,
        out_w: usize,
        src_h: usize,
        src_w: usize,
        mut xs: Vec<T>,
        mut ys: Vec<T>,
    ) -> Result<Self> {
        if xs.len() != out_h * out_w || ys.len() != out_h * out_w {
            return Err(Error::dim(format!(
                "grid {out_h} x {out_w} needs {} coordinate pairs, got {} x and {} y",
                out_h * out_w,
                xs.len(),
                ys.len()
            )));
        }
        if src_h < 2 || src_w < 2 {
            return Err(Error::dim(format!(
                "grid source must be at least 2 x 2, got {src_h} x {src_w}"
            )));
        }
        let (max_x, max_y) = (T::lit((src_w - 1) as f64), T::lit((src_h - 1) as f64));
        for x in &mut xs {
            *x = x.max(T::zero()).min(max_x);
        }
        for y in &mut ys {
            *y = y.max(T::zero()).min(max_y);
        }
        Ok(Self {
            out_h,
            out_w,
            src_h,
            src_w,
            xs,
            ys,
        })
    }

    /// Corner-aligned uniform grid: cell `(x, y)` maps to
    /// `(x (W-1)/(out_w-1), y (H-1)/(out_h-1))`.
    pub fn uniform(out_h: usize, out_w: usize, src_h: usize, src_w: usize) -> Result<Self> {
        if out_h < 2 || out_w < 2 {
            return Err(Error::param(format!(
                "output size must be at least 2 x 2, got {out_h} x {out_w}"
            )));
        }
        let mut xs = Vec::with_capacity(out_h * out_w);
        let mut ys = Vec::with_capacity(out_h * out_w);
        for y in 0..out_h {
            let sy = uniform_coord(y, out_h, src_h);
            for x in 0..out_w {
                xs.push(uniform_coord(x, out_w, src_w));
                ys.push(sy);
            }
        }
        Self::new(out_h, out_w, src_h, src_w, xs, ys)
    }

    /// Uniform grid over the window `[x0, x0 + w - 1] x [y0, y0 + h - 1]`
    /// of the source (used for crops).
    pub fn window(
        out_h: usize,
        out_w: usize,
        src_h: usize,
        src_w: usize,
        x0: f64,
        y0: f64,
        w: f64,
        h: f64,
    ) -> Result<Self> {
        if out_h < 2 || out_w < 2 {
            return Err(Error::param("window grid needs at least 2 x 2 cells"));
        }
        let mut xs = Vec::with_capacity(out_h * out_w);
        let mut ys = Vec::with_capacity(out_h * out_w);
        for y in 0..out_h {
            let sy = T::lit(y0 + y as f64 * (h - 1.0) / (out_h - 1) as f64);
            for x in 0..out_w {
                xs.push(T::lit(x0 + x as f64 * (w - 1.0) / (out_w - 1) as f64));
                ys.push(sy);
            }
        }
        Self::new(out_h, out_w, src_h, src_w, xs, ys)
    }

    pub fn out_h(&self) -> usize {
        self.out_h
    }

    pub fn out_w(&self) -> usize {
        self.out_w
    }

    pub fn src_h(&self) -> usize {
        self.src_h
    }

    pub fn src_w(&self) -> usize {
        self.src_w
    }

    pub fn xs(&self) -> &[T] {
        &self.xs
    }

    pub fn ys(&self) -> &[T] {
        &self.ys
    }

    /// Source coordinate of output cell `(x, y)`.
    pub fn coord(&self, x: usize, y: usize) -> (T, T) {
        let i = y * self.out_w + x;
        (self.xs[i], self.ys[i])
    }

    /// `out_h x out_w x 2` tensor with `(x, y)` in the last axis.
    pub fn to_tensor(&self) -> Tensor<T> {
        let mut data = Vec::with_capacity(2 * self.xs.len());
        for (x, y) in self.xs.iter().zip(&self.ys) {
            data.push(*x);
            data.push(*y);
        }
        Tensor::new(vec![self.out_h, self.out_w, 2], data).expect("grid shape")
    }

    pub fn from_tensor(t: &Tensor<T>, src_h: usize, src_w: usize) -> Result<Self> {
        let s = t.shape();
        if s.len() != 3 || s[2] != 2 {
            return Err(Error::dim(format!("grid tensor must be H x W x 2, got {s:?}")));
        }
        let xs = t.data().iter().step_by(2).copied().collect();
        let ys = t.data().iter().skip(1).step_by(2).copied().collect();
        Self::new(s[0], s[1], src_h, src_w, xs, ys)
    }

    /// Largest coordinate displacement between two grids of equal size.
    pub fn max_distance(&self, other: &Self) -> f64 {
        self.xs
            .iter()
            .zip(&self.ys)
            .zip(other.xs.iter().zip(&other.ys))
            .map(|((x0, y0), (x1, y1))| {
                let (dx, dy) = ((*x0 - *x1).as_f64(), (*y0 - *y1).as_f64());
                (dx * dx + dy * dy).sqrt()
            })
            .fold(0.0, f64::max)
    }
}

/// The four taps of a bilinear lookup.
#[derive(Clone, Copy, Debug)]
struct Taps<T> {
    i00: usize,
    i01: usize,
    i10: usize,
    i11: usize,
    fx: T,
    fy: T,
    /// Coordinate was clamped on the x / y axis.
    clamped_x: bool,
    clamped_y: bool,
}

impl<T: Real> Taps<T> {
    fn new(x: T, y: T, h: usize, w: usize) -> Self {
        let (max_x, max_y) = (T::lit((w - 1) as f64), T::lit((h - 1) as f64));
        let cx = x.max(T::zero()).min(max_x);
        let cy = y.max(T::zero()).min(max_y);
        // the lower tap stays one cell inside so the upper tap is a real pixel
        let x0 = cx.floor().to_usize().unwrap_or(0).min(w - 2);
        let y0 = cy.floor().to_usize().unwrap_or(0).min(h - 2);
        Self {
            i00: y0 * w + x0,
            i01: y0 * w + x0 + 1,
            i10: (y0 + 1) * w + x0,
            i11: (y0 + 1) * w + x0 + 1,
            fx: cx - T::lit(x0 as f64),
            fy: cy - T::lit(y0 as f64),
            clamped_x: cx != x,
            clamped_y: cy != y,
        }
    }

    #[inline]
    fn value(&self, plane: &[T]) -> T {
        let (fx, fy) = (self.fx, self.fy);
        let top = plane[self.i00] * (T::one() - fx) + plane[self.i01] * fx;
        let bottom = plane[self.i10] * (T::one() - fx) + plane[self.i11] * fx;
        top * (T::one() - fy) + bottom * fy
    }

    /// Partial derivatives of [`Taps::value`] w.r.t. the (unclamped) x and y.
    #[inline]
    fn slopes(&self, plane: &[T]) -> (T, T) {
        let (fx, fy) = (self.fx, self.fy);
        let (p00, p01, p10, p11) = (
            plane[self.i00],
            plane[self.i01],
            plane[self.i10],
            plane[self.i11],
        );
        let dx = if self.clamped_x {
            T::zero()
        } else {
            (p01 - p00) * (T::one() - fy) + (p11 - p10) * fy
        };
        let dy = if self.clamped_y {
            T::zero()
        } else {
            (p10 - p00) * (T::one() - fx) + (p11 - p01) * fx
        };
        (dx, dy)
    }

    #[inline]
    fn scatter(&self, plane: &mut [T], g: T) {
        let (fx, fy) = (self.fx, self.fy);
        plane[self.i00] += g * (T::one() - fx) * (T::one() - fy);
        plane[self.i01] += g * fx * (T::one() - fy);
        plane[self.i10] += g * (T::one() - fx) * fy;
        plane[self.i11] += g * fx * fy;
    }
}

/// Bilinear blend of the four pixels around `(x, y)`, one value per channel.
///
/// Integer coordinates return the pixel value exactly.
pub fn bilinear_sample<T: Real>(img: &Image<T>, x: T, y: T) -> Vec<T> {
    debug_assert!(x >= T::zero() && x <= T::lit((img.width() - 1) as f64));
    debug_assert!(y >= T::zero() && y <= T::lit((img.height() - 1) as f64));
    let taps = Taps::new(x, y, img.height(), img.width());
    (0..img.channels())
        .map(|c| taps.value(img.plane(c)))
        .collect()
}

/// `I'(x, y) = I(T^{-1}(x, y))`: samples the source at every grid coordinate.
pub fn apply_grid<T: Real>(img: &Image<T>, grid: &SamplingGrid<T>) -> Result<Image<T>> {
    if grid.src_h != img.height() || grid.src_w != img.width() {
        return Err(Error::dim(format!(
            "grid addresses a {} x {} source but the image is {} x {}",
            grid.src_h,
            grid.src_w,
            img.height(),
            img.width()
        )));
    }
    let cells = grid.out_h * grid.out_w;
    let taps: Vec<Taps<T>> = grid
        .xs
        .iter()
        .zip(&grid.ys)
        .map(|(&x, &y)| Taps::new(x, y, img.height(), img.width()))
        .collect();
    let mut out = Vec::with_capacity(img.channels() * cells);
    for c in 0..img.channels() {
        let plane = img.plane(c);
        out.extend(taps.iter().map(|t| t.value(plane)));
    }
    Image::new(img.channels(), grid.out_h, grid.out_w, out)
}

/// Down-sampling with the corner-aligned uniform grid.
pub fn uniform_downsample<T: Real>(img: &Image<T>, out_h: usize, out_w: usize) -> Result<Image<T>> {
    if out_h < 2 || out_w < 2 {
        return Err(Error::param(format!(
            "down-sampled size must be at least 2 x 2, got {out_h} x {out_w}"
        )));
    }
    if out_h > img.height() || out_w > img.width() {
        return Err(Error::param(format!(
            "cannot down-sample {} x {} to the larger {out_h} x {out_w}",
            img.height(),
            img.width()
        )));
    }
    resize(img, out_h, out_w)
}

/// Uniform-grid resampling to any size of at least 2 x 2.
pub fn resize<T: Real>(img: &Image<T>, out_h: usize, out_w: usize) -> Result<Image<T>> {
    let grid = SamplingGrid::uniform(out_h, out_w, img.height(), img.width())?;
    apply_grid(img, &grid)
}

struct GridSampleBack<T> {
    img: Rc<Tensor<T>>,
    taps: Vec<Taps<T>>,
}

impl<T: Real> BackwardOp<T> for GridSampleBack<T> {
    fn backward(&self, g: &Tensor<T>, needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        let s = self.img.shape();
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let cells = self.taps.len() / n;
        let gd = g.data();
        let mut dimg = needs[0].then(|| Tensor::zeros(s.to_vec()));
        let mut dgrid = needs[1].then(|| vec![T::zero(); n * cells * 2]);
        for b in 0..n {
            let taps = &self.taps[b * cells..(b + 1) * cells];
            for ch in 0..c {
                let gplane = &gd[(b * c + ch) * cells..][..cells];
                if let Some(di) = dimg.as_mut() {
                    let plane = &mut di.data_mut()[(b * c + ch) * h * w..][..h * w];
                    for (t, &gv) in taps.iter().zip(gplane) {
                        t.scatter(plane, gv);
                    }
                }
                if let Some(dg) = dgrid.as_mut() {
                    let plane = &self.img.data()[(b * c + ch) * h * w..][..h * w];
                    for (i, (t, &gv)) in taps.iter().zip(gplane).enumerate() {
                        let (sx, sy) = t.slopes(plane);
                        dg[(b * cells + i) * 2] += gv * sx;
                        dg[(b * cells + i) * 2 + 1] += gv * sy;
                    }
                }
            }
        }
        let grid_shape = vec![n, g.shape()[2], g.shape()[3], 2];
        vec![
            dimg,
            dgrid.map(|d| Tensor::new(grid_shape, d).expect("grid shape")),
        ]
    }
}

/// Differentiable batched [`apply_grid`].
///
/// `img` is `N x C x H x W`; `grid` is `N x Ho x Wo x 2` holding `(x, y)`
/// source coordinates. The result is `N x C x Ho x Wo` and is differentiable
/// w.r.t. both the image and the grid.
pub fn grid_sample<'g, T: Real>(img: &Var<'g, T>, grid: &Var<'g, T>) -> Result<Var<'g, T>> {
    let (iv, gv) = (img.value(), grid.value());
    let (is, gs) = (iv.shape(), gv.shape());
    if is.len() != 4 || gs.len() != 4 || gs[3] != 2 || gs[0] != is[0] || is[2] < 2 || is[3] < 2 {
        return Err(Error::dim(format!(
            "grid_sample: image {is:?} incompatible with grid {gs:?}"
        )));
    }
    let (n, c, h, w) = (is[0], is[1], is[2], is[3]);
    let (ho, wo) = (gs[1], gs[2]);
    let cells = ho * wo;
    let taps: Vec<Taps<T>> = gv
        .data()
        .chunks(2)
        .map(|p| Taps::new(p[0], p[1], h, w))
        .collect();
    let mut out = Vec::with_capacity(n * c * cells);
    for b in 0..n {
        for ch in 0..c {
            let plane = &iv.data()[(b * c + ch) * h * w..][..h * w];
            out.extend(taps[b * cells..(b + 1) * cells].iter().map(|t| t.value(plane)));
        }
    }
    let out = Tensor::new(vec![n, c, ho, wo], out)?;
    img.graph().record(
        "grid_sample",
        out,
        &[*img, *grid],
        GridSampleBack { img: iv, taps },
    )
}

/// Differentiable uniform-grid resize of an `N x C x H x W` variable.
pub fn resize_var<'g, T: Real>(img: &Var<'g, T>, out_h: usize, out_w: usize) -> Result<Var<'g, T>> {
    let s = img.shape();
    if s.len() != 4 {
        return Err(Error::dim(format!("resize_var needs N x C x H x W, got {s:?}")));
    }
    if s[2] == out_h && s[3] == out_w {
        return Ok(*img);
    }
    let grid = SamplingGrid::<T>::uniform(out_h, out_w, s[2], s[3])?.to_tensor();
    let batch: Vec<&Tensor<T>> = std::iter::repeat(&grid).take(s[0]).collect();
    let stacked = Tensor::concat0(&batch)?.reshape(vec![s[0], out_h, out_w, 2])?;
    let grid_var = img.graph().constant(stacked);
    grid_sample(img, &grid_var)
}
