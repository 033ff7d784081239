//! Synthetic small-lesion images, PNG image folders and stratified folds.
//!
//! Every synthetic image shares one background model: a tinted base colour,
//! low-frequency luminance blobs, specular highlights and speckle. Class 1
//! adds a small red disc, class 2 a small yellowish ring or irregular patch.
//! Background pixels never exceed [`LESION_THRESHOLD`] in chroma.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::resampler::{apply_grid, resize, Image, SamplingGrid};
use crate::ndtensor::Tensor;

pub const NUM_CLASSES: usize = 3;
pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["0_normal", "1_vascular", "2_inflammatory"];

/// Chroma (`max - min` over RGB) above which a pixel counts as lesion-like.
pub const LESION_THRESHOLD: f64 = 0.45;

/// Per-channel mean removed from network inputs; measured on the default
/// synthetic dataset and frozen.
pub const CHANNEL_MEAN: [f32; 3] = [0.55, 0.38, 0.32];
/// Inputs are divided by this after centering.
pub const INPUT_STD: f32 = 0.25;

/// Centers and scales a `C x H x W` or `N x C x H x W` image tensor with
/// [`CHANNEL_MEAN`] and [`INPUT_STD`].
pub fn standardize(t: &Tensor<f32>) -> Result<Tensor<f32>> {
    let s = t.shape();
    let (c, hw) = match s.len() {
        3 => (s[0], s[1] * s[2]),
        4 => (s[1], s[2] * s[3]),
        _ => return Err(Error::dim(format!("expected an image tensor, got {s:?}"))),
    };
    if c != CHANNEL_MEAN.len() {
        return Err(Error::dim(format!("expected {} channels, got {c}", CHANNEL_MEAN.len())));
    }
    let data = t.data();
    Ok(Tensor::from_fn(s.to_vec(), |i| (data[i] - CHANNEL_MEAN[(i / hw) % c]) / INPUT_STD))
}

/// Environment variable capping data-generation worker threads.
pub const THREADS_ENV: &str = "DSCL_NUM_THREADS";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub n_per_class: usize,
    /// Side of the square high-resolution images.
    pub resolution: usize,
    /// Lesion diameter range in pixels, inclusive.
    pub lesion_min: usize,
    pub lesion_max: usize,
    /// Amplitude of the luminance clutter.
    pub clutter: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            n_per_class: 300,
            resolution: 64,
            lesion_min: 4,
            lesion_max: 8,
            clutter: 0.15,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_per_class == 0 {
            return Err(Error::param("n_per_class must be positive"));
        }
        if self.resolution < 16 {
            return Err(Error::param("resolution must be at least 16"));
        }
        if self.lesion_min == 0 || self.lesion_min > self.lesion_max {
            return Err(Error::param(format!(
                "bad lesion size range {}..={}",
                self.lesion_min, self.lesion_max
            )));
        }
        if 4 * self.lesion_max >= self.resolution {
            return Err(Error::param(format!(
                "lesions up to {} px are not tiny at resolution {}",
                self.lesion_max, self.resolution
            )));
        }
        if !(0.0..=0.3).contains(&self.clutter) {
            return Err(Error::param("clutter must lie in [0, 0.3]"));
        }
        Ok(())
    }
}

/// Pixel box `[x0, x1) x [y0, y1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    pub image: Image<f32>,
    pub label: usize,
    pub id: usize,
    /// Known lesion extent, if any.
    pub lesion: Option<BBox>,
}

pub fn chroma(r: f64, g: f64, b: f64) -> f64 {
    r.max(g).max(b) - r.min(g).min(b)
}

/// Highest pixel chroma of an RGB image.
pub fn max_chroma(img: &Image<f32>) -> f64 {
    let (r, g, b) = (img.plane(0), img.plane(1), img.plane(2));
    (0..r.len())
        .map(|i| chroma(r[i] as f64, g[i] as f64, b[i] as f64))
        .fold(0.0, f64::max)
}

fn worker_pool() -> Result<rayon::ThreadPool> {
    let threads = std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(0);
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Dataset(format!("thread pool: {e}")))
}

/// `3 * n_per_class` images; ids `0..`, class `id / n_per_class`.
pub fn generate_dataset(spec: &DatasetSpec) -> Result<Vec<LabeledImage>> {
    spec.validate()?;
    let n = NUM_CLASSES * spec.n_per_class;
    worker_pool()?.install(|| (0..n).into_par_iter().map(|id| generate_sample(spec, id)).collect())
}

/// One image, a pure function of `(spec, id)`.
pub fn generate_sample(spec: &DatasetSpec, id: usize) -> Result<LabeledImage> {
    spec.validate()?;
    let label = id / spec.n_per_class;
    if label >= NUM_CLASSES {
        return Err(Error::param(format!("sample id {id} outside the dataset")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(id as u64);
    let res = spec.resolution;
    let mut pixels = background(spec, &mut rng);
    let lesion = match label {
        0 => None,
        1 => Some(paint_disc(&mut pixels, res, spec, &mut rng)),
        _ => Some(paint_inflammation(&mut pixels, res, spec, &mut rng)),
    };
    let data = pixels.into_iter().map(|v| v.clamp(0.0, 1.0) as f32).collect();
    Ok(LabeledImage {
        image: Image::new(3, res, res, data)?,
        label,
        id,
        lesion,
    })
}

/// Planar RGB background with chroma at most `0.36`.
fn background(spec: &DatasetSpec, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let res = spec.resolution;
    let base = [
        0.55 + rng.gen_range(-0.05..0.05),
        0.38 + rng.gen_range(-0.04..0.04),
        0.32 + rng.gen_range(-0.04..0.04),
    ];
    let mut lum = vec![0.0; res * res];
    let scale = res as f64 / 64.0;
    for _ in 0..6 {
        let (cx, cy) = (rng.gen_range(0.0..res as f64), rng.gen_range(0.0..res as f64));
        let s = rng.gen_range(5.0..14.0) * scale;
        let a = rng.gen_range(-1.0..1.0) * spec.clutter;
        add_blob(&mut lum, res, cx, cy, s, a);
    }
    // specular highlights: bright, colourless, lesion-sized
    for _ in 0..rng.gen_range(0..4) {
        let (cx, cy) = (rng.gen_range(0.0..res as f64), rng.gen_range(0.0..res as f64));
        let s = rng.gen_range(1.0..2.5) * scale;
        add_blob(&mut lum, res, cx, cy, s, rng.gen_range(0.15..0.35));
    }
    let mut out = vec![0.0; 3 * res * res];
    for i in 0..res * res {
        let speckle = rng.gen_range(-0.5..0.5) * spec.clutter * 0.4;
        for c in 0..3 {
            out[c * res * res + i] = base[c] + lum[i] + speckle + rng.gen_range(-0.02..0.02);
        }
    }
    out
}

fn add_blob(field: &mut [f64], res: usize, cx: f64, cy: f64, s: f64, a: f64) {
    for y in 0..res {
        for x in 0..res {
            let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
            field[y * res + x] += a * (-d2 / (2.0 * s * s)).exp();
        }
    }
}

/// Alpha-blends `color` with per-pixel coverage from `cover(x, y)`.
fn blend(pixels: &mut [f64], res: usize, color: [f64; 3], cover: impl Fn(f64, f64) -> f64) {
    for y in 0..res {
        for x in 0..res {
            let a = cover(x as f64, y as f64).clamp(0.0, 1.0);
            if a > 0.0 {
                for (c, col) in color.iter().enumerate() {
                    let p = &mut pixels[c * res * res + y * res + x];
                    *p = (1.0 - a) * *p + a * col;
                }
            }
        }
    }
}

/// Center and radius of a lesion that fits with a one-pixel margin.
fn place(res: usize, spec: &DatasetSpec, rng: &mut ChaCha8Rng) -> (f64, f64, f64) {
    let size = rng.gen_range(spec.lesion_min..=spec.lesion_max) as f64;
    let r = size / 2.0;
    let lo = r + 1.0;
    let hi = res as f64 - r - 1.0;
    (rng.gen_range(lo..hi), rng.gen_range(lo..hi), r)
}

fn bbox_around(cx: f64, cy: f64, r: f64, res: usize) -> BBox {
    let lo = |c: f64| (c - r - 1.0).floor().max(0.0) as usize;
    let hi = |c: f64| ((c + r + 1.0).ceil() as usize + 1).min(res);
    BBox {
        x0: lo(cx),
        y0: lo(cy),
        x1: hi(cx),
        y1: hi(cy),
    }
}

fn paint_disc(pixels: &mut [f64], res: usize, spec: &DatasetSpec, rng: &mut ChaCha8Rng) -> BBox {
    let (cx, cy, r) = place(res, spec, rng);
    let color = [
        rng.gen_range(0.78..0.95),
        rng.gen_range(0.05..0.18),
        rng.gen_range(0.08..0.2),
    ];
    let strength = rng.gen_range(0.85..1.0);
    blend(pixels, res, color, |x, y| {
        strength * (r + 0.5 - ((x - cx).powi(2) + (y - cy).powi(2)).sqrt())
    });
    bbox_around(cx, cy, r, res)
}

fn paint_inflammation(pixels: &mut [f64], res: usize, spec: &DatasetSpec, rng: &mut ChaCha8Rng) -> BBox {
    let (cx, cy, r) = place(res, spec, rng);
    let color = [
        rng.gen_range(0.85..0.97),
        rng.gen_range(0.78..0.9),
        rng.gen_range(0.2..0.35),
    ];
    let strength = rng.gen_range(0.85..1.0);
    if rng.gen_bool(0.5) {
        let width = (r / 2.0).max(1.5);
        blend(pixels, res, color, |x, y| {
            let d = ((x - cx).powi(2) + (y - cy).powi(2)).sqrt();
            strength * (width / 2.0 + 0.5 - (d - (r - width / 2.0)).abs())
        });
    } else {
        // irregular patch: union of small discs inside the lesion radius
        let lobes: Vec<(f64, f64, f64)> = (0..3)
            .map(|_| {
                let lr = rng.gen_range(0.45..0.65) * r;
                let off = r - lr;
                (cx + rng.gen_range(-off..=off), cy + rng.gen_range(-off..=off), lr)
            })
            .collect();
        blend(pixels, res, color, |x, y| {
            lobes
                .iter()
                .map(|(lx, ly, lr)| strength * (lr + 0.5 - ((x - lx).powi(2) + (y - ly).powi(2)).sqrt()))
                .fold(0.0, f64::max)
        });
    }
    bbox_around(cx, cy, r, res)
}

/// Reads `root/<class>/*.png`, classes in lexicographic order, files sorted
/// by name; images are center-cropped to square and resized to
/// `resolution`.
pub fn load_image_folder(root: &Path, resolution: usize) -> Result<Vec<LabeledImage>> {
    if resolution < 2 {
        return Err(Error::param("resolution must be at least 2"));
    }
    let mut classes: Vec<PathBuf> = fs::read_dir(root)
        .map_err(|e| Error::Dataset(format!("{}: {e}", root.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    classes.sort();
    if classes.is_empty() {
        return Err(Error::Dataset(format!("{} has no class directories", root.display())));
    }
    let mut files = Vec::new();
    for (label, dir) in classes.iter().enumerate() {
        let mut entries: Vec<PathBuf> = fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .collect();
        if entries.is_empty() {
            return Err(Error::Dataset(format!("class directory {} is empty", dir.display())));
        }
        entries.sort();
        files.extend(entries.into_iter().map(|p| (p, label)));
    }
    worker_pool()?.install(|| {
        files
            .par_iter()
            .enumerate()
            .map(|(id, (path, label))| {
                Ok(LabeledImage {
                    image: read_png(path, resolution)?,
                    label: *label,
                    id,
                    lesion: None,
                })
            })
            .collect()
    })
}

fn read_png(path: &Path, resolution: usize) -> Result<Image<f32>> {
    let fail = |reason: String| Error::Ingestion {
        path: path.to_path_buf(),
        reason,
    };
    let bytes = fs::read(path).map_err(|e| fail(e.to_string()))?;
    let decoded = image::load_from_memory_with_format(&bytes, image::ImageFormat::Png)
        .map_err(|e| fail(e.to_string()))?
        .to_rgb8();
    let (w, h) = (decoded.width() as usize, decoded.height() as usize);
    let side = w.min(h);
    if side < 2 {
        return Err(fail("image smaller than 2 x 2".into()));
    }
    let (x0, y0) = ((w - side) / 2, (h - side) / 2);
    let mut data = vec![0f32; 3 * side * side];
    for y in 0..side {
        for x in 0..side {
            let p = decoded.get_pixel((x0 + x) as u32, (y0 + y) as u32);
            for c in 0..3 {
                data[c * side * side + y * side + x] = p[c] as f32 / 255.0;
            }
        }
    }
    let img = Image::new(3, side, side, data)?;
    if side == resolution {
        Ok(img)
    } else {
        resize(&img, resolution, resolution)
    }
}

pub fn write_png(img: &Image<f32>, path: &Path) -> Result<()> {
    let (h, w) = (img.height(), img.width());
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = [0, 1, 2].map(|c| {
                let v = if img.channels() == 1 { img.get(0, y, x) } else { img.get(c, y, x) };
                (v * 255.0).round().clamp(0.0, 255.0) as u8
            });
            buf.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    buf.save_with_format(path, image::ImageFormat::Png).map_err(|e| Error::Ingestion {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// Writes `root/<class name>/<id>.png`.
pub fn export_image_folder(images: &[LabeledImage], root: &Path) -> Result<()> {
    for name in CLASS_NAMES {
        fs::create_dir_all(root.join(name))?;
    }
    for item in images {
        let name = CLASS_NAMES
            .get(item.label)
            .ok_or_else(|| Error::Label(format!("label {} has no class name", item.label)))?;
        write_png(&item.image, &root.join(name).join(format!("{:06}.png", item.id)))?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Stratified `k`-fold partition of sample indices.
pub fn kfold_split(labels: &[usize], k: usize, seed: u64) -> Result<Vec<Fold>> {
    if k < 2 {
        return Err(Error::param("k must be at least 2"));
    }
    let num_classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut test: Vec<Vec<usize>> = vec![Vec::new(); k];
    let mut offset = 0;
    for class in 0..num_classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if members.is_empty() {
            continue;
        }
        if members.len() < k {
            return Err(Error::param(format!(
                "class {class} has {} samples, fewer than k = {k}",
                members.len()
            )));
        }
        for i in (1..members.len()).rev() {
            members.swap(i, rng.gen_range(0..=i));
        }
        // rotate the start so remainders spread over folds
        for (j, idx) in members.into_iter().enumerate() {
            test[(j + offset) % k].push(idx);
        }
        offset += 1;
    }
    Ok(test
        .into_iter()
        .map(|mut t| {
            t.sort_unstable();
            let train = (0..labels.len()).filter(|i| t.binary_search(i).is_err()).collect();
            Fold { train, test: t }
        })
        .collect())
}

/// Crop window `(x0, y0, w, h)` in pixels.
pub type CropWindow = (usize, usize, usize, usize);

/// Random resized-crop window with area fraction in `scale` and aspect
/// ratio in `ratio`, re-drawn until it contains `keep` (10 attempts, then
/// the full image).
pub fn lesion_preserving_crop(
    rng: &mut impl Rng,
    height: usize,
    width: usize,
    keep: Option<BBox>,
    scale: (f64, f64),
    ratio: (f64, f64),
) -> CropWindow {
    let area = (height * width) as f64;
    for _ in 0..10 {
        let target = area * rng.gen_range(scale.0..=scale.1);
        let log_r = rng.gen_range(ratio.0.ln()..=ratio.1.ln());
        let aspect = log_r.exp();
        let w = ((target * aspect).sqrt().round() as usize).clamp(2, width);
        let h = ((target / aspect).sqrt().round() as usize).clamp(2, height);
        let x0 = rng.gen_range(0..=width - w);
        let y0 = rng.gen_range(0..=height - h);
        let inside = keep.map_or(true, |b| b.x0 >= x0 && b.y0 >= y0 && b.x1 <= x0 + w && b.y1 <= y0 + h);
        if inside {
            return (x0, y0, w, h);
        }
    }
    (0, 0, width, height)
}

/// Strength of the SimCLR-style colour distortion.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimclrParams {
    pub scale_min: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
    pub jitter_prob: f64,
    pub gray_prob: f64,
}

impl Default for SimclrParams {
    fn default() -> Self {
        Self {
            scale_min: 0.08,
            brightness: 0.8,
            contrast: 0.8,
            saturation: 0.8,
            hue: 0.2,
            jitter_prob: 0.8,
            gray_prob: 0.2,
        }
    }
}

/// One random view: lesion-preserving resized crop to `out x out`,
/// horizontal flip, colour jitter and random grayscale.
pub fn simclr_view(item: &LabeledImage, out: usize, params: &SimclrParams, rng: &mut impl Rng) -> Result<Image<f32>> {
    let img = &item.image;
    let (x0, y0, w, h) = lesion_preserving_crop(
        rng,
        img.height(),
        img.width(),
        item.lesion,
        (params.scale_min, 1.0),
        (0.75, 4.0 / 3.0),
    );
    let grid = SamplingGrid::window(out, out, img.height(), img.width(), x0 as f64, y0 as f64, w as f64, h as f64)?;
    let mut view = apply_grid(img, &grid)?.into_tensor();
    let plane = out * out;
    if rng.gen_bool(0.5) {
        for row in view.data_mut().chunks_mut(out) {
            row.reverse();
        }
    }
    let data = view.data_mut();
    if rng.gen_bool(params.jitter_prob) {
        color_jitter(data, plane, params, rng);
    }
    if rng.gen_bool(params.gray_prob) {
        for i in 0..plane {
            let y = 0.299 * data[i] + 0.587 * data[plane + i] + 0.114 * data[2 * plane + i];
            for c in 0..3 {
                data[c * plane + i] = y;
            }
        }
    }
    Image::from_tensor(view)
}

/// Brightness, contrast, saturation and hue jitter in random order.
fn color_jitter(data: &mut [f32], plane: usize, p: &SimclrParams, rng: &mut impl Rng) {
    let factor = |rng: &mut dyn rand::RngCore, s: f64| rng.gen_range((1.0 - s).max(0.0)..=1.0 + s) as f32;
    let mut order = [0, 1, 2, 3];
    for i in (1..4).rev() {
        order.swap(i, rng.gen_range(0..=i));
    }
    for op in order {
        match op {
            0 => {
                let f = factor(rng, p.brightness);
                data.iter_mut().for_each(|v| *v = (*v * f).clamp(0.0, 1.0));
            }
            1 => {
                let f = factor(rng, p.contrast);
                let mean = (0..plane).map(|i| gray(data, plane, i)).sum::<f32>() / plane as f32;
                data.iter_mut().for_each(|v| *v = (mean + (*v - mean) * f).clamp(0.0, 1.0));
            }
            2 => {
                let f = factor(rng, p.saturation);
                for i in 0..plane {
                    let g = gray(data, plane, i);
                    for c in 0..3 {
                        let v = &mut data[c * plane + i];
                        *v = (g + (*v - g) * f).clamp(0.0, 1.0);
                    }
                }
            }
            _ => {
                let shift = rng.gen_range(-p.hue..=p.hue) as f32;
                for i in 0..plane {
                    let (h, s, v) = rgb_to_hsv(data[i], data[plane + i], data[2 * plane + i]);
                    let (r, g, b) = hsv_to_rgb((h + shift).rem_euclid(1.0), s, v);
                    data[i] = r;
                    data[plane + i] = g;
                    data[2 * plane + i] = b;
                }
            }
        }
    }
}

fn gray(data: &[f32], plane: usize, i: usize) -> f32 {
    0.299 * data[i] + 0.587 * data[plane + i] + 0.114 * data[2 * plane + i]
}

fn rgb_to_hsv(r: f32, g: f32, b: f32) -> (f32, f32, f32) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> (f32, f32, f32) {
    let c = v * s;
    let hp = h * 6.0;
    let x = c * (1.0 - (hp.rem_euclid(2.0) - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    (r + m, g + m, b + m)
}
