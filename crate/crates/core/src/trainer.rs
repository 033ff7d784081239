//! Two-stage optimization.
//!
//! Stage 1 trains the saliency augmentor with cross-entropy on its auxiliary
//! head and the feature extractor plus projector with a contrastive loss over
//! five views per image. Stage 2 freezes the extractor and fits the linear
//! classifier on uniform low-resolution views only.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::data::{simclr_view, standardize, Fold, LabeledImage, SimclrParams};
use crate::error::{Error, Result};
use crate::losses::{contrastive_loss, cross_entropy, ContrastiveKind};
use crate::ndtensor::{Graph, Real, Tensor, Var};
use crate::nets::{Bound, ModelBundle, ModelConfig, ParamStore};
use crate::resampler::{grid_sample, uniform_downsample};
use crate::saliency::{default_kernel, make_kernel, saliency_grid, DistanceKernel};

/// Views per image in a contrastive batch.
pub const VIEWS: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Augmentation {
    /// Uniform view plus four saliency-zoomed views.
    Sa,
    /// Five random crops, flips and colour distortions.
    Simclr5,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    Dscl,
    Scl,
    /// Cross-entropy through the classifier head on every view.
    Ce,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub batch_images: usize,
    pub epochs_stage1: usize,
    pub epochs_stage2: usize,
    pub lr_sa: f64,
    pub lr_fe: f64,
    /// Peak learning rate of the stage-2 linear classifier.
    pub lr_cls: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub nesterov: bool,
    pub tau: f64,
    pub tau_o: f64,
    pub augmentation: Augmentation,
    pub loss: LossMode,
    /// Let the extractor loss reach the saliency augmentor through the grids.
    pub joint_gradients: bool,
    /// Zoomed views also act as anchors.
    pub all_views_anchor: bool,
    /// Remove every positive, not just the current one, from denominators.
    pub remove_all_positives: bool,
    /// Distance kernel; `None` uses `sigma = size / 9`, `radius = ceil(3 sigma)`.
    pub kernel_sigma: Option<f64>,
    pub kernel_radius: Option<usize>,
    pub stage2_batch: usize,
    pub simclr: SimclrParams,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            batch_images: 8,
            epochs_stage1: 30,
            epochs_stage2: 10,
            lr_sa: 0.01,
            lr_fe: 0.003,
            lr_cls: 0.1,
            weight_decay: 5e-4,
            momentum: 0.9,
            nesterov: true,
            tau: 0.07,
            tau_o: 0.1,
            augmentation: Augmentation::Sa,
            loss: LossMode::Dscl,
            joint_gradients: false,
            all_views_anchor: false,
            remove_all_positives: false,
            kernel_sigma: None,
            kernel_radius: None,
            stage2_batch: 32,
            simclr: SimclrParams::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [("tau", self.tau), ("tau_o", self.tau_o)];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::param(format!("{name} must be positive, got {v}")));
            }
        }
        let non_negative = [
            ("lr_sa", self.lr_sa),
            ("lr_fe", self.lr_fe),
            ("lr_cls", self.lr_cls),
            ("weight_decay", self.weight_decay),
            ("momentum", self.momentum),
        ];
        for (name, v) in non_negative {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::param(format!("{name} must be non-negative, got {v}")));
            }
        }
        if self.epochs_stage1 == 0 || self.epochs_stage2 == 0 {
            return Err(Error::param("epochs must be at least 1"));
        }
        if self.batch_images < 2 || self.stage2_batch == 0 {
            return Err(Error::param("batch_images must be at least 2"));
        }
        Ok(())
    }

    pub fn contrastive_kind(&self) -> ContrastiveKind {
        match (self.loss, self.remove_all_positives) {
            (LossMode::Scl, _) => ContrastiveKind::Scl,
            (_, true) => ContrastiveKind::DsclAllPositives,
            _ => ContrastiveKind::Dscl,
        }
    }

    pub fn kernel(&self, grid_size: usize) -> Result<DistanceKernel> {
        match (self.kernel_sigma, self.kernel_radius) {
            (None, None) => default_kernel(grid_size),
            (sigma, radius) => {
                let sigma = sigma.unwrap_or(grid_size as f64 / 9.0);
                make_kernel(sigma, radius.unwrap_or((3.0 * sigma).ceil() as usize))
            }
        }
    }
}

/// `0.5 lr_max (1 + cos(pi epoch / total))`.
pub fn cosine_lr(epoch: usize, total_epochs: usize, lr_max: f64) -> f64 {
    assert!(epoch <= total_epochs && total_epochs > 0, "epoch outside schedule");
    0.5 * lr_max * (1.0 + (std::f64::consts::PI * epoch as f64 / total_epochs as f64).cos())
}

/// One SGD update with weight decay and (Nesterov) momentum:
/// `d = g + wd theta`, `v = mu v + d`, `theta -= lr (d + mu v)`; without
/// Nesterov the step is `lr v`.
pub fn sgd_nesterov_step<T: Real>(
    param: &mut Tensor<T>,
    grad: &Tensor<T>,
    velocity: &mut Tensor<T>,
    lr: T,
    momentum: T,
    weight_decay: T,
) -> Result<()> {
    sgd_step(param, grad, velocity, lr, momentum, weight_decay, true)
}

fn sgd_step<T: Real>(
    param: &mut Tensor<T>,
    grad: &Tensor<T>,
    velocity: &mut Tensor<T>,
    lr: T,
    momentum: T,
    weight_decay: T,
    nesterov: bool,
) -> Result<()> {
    if param.shape() != grad.shape() || param.shape() != velocity.shape() {
        return Err(Error::dim(format!(
            "sgd step: parameter {:?}, gradient {:?}, velocity {:?}",
            param.shape(),
            grad.shape(),
            velocity.shape()
        )));
    }
    if lr < T::zero() {
        return Err(Error::param("learning rate must be non-negative"));
    }
    for ((p, g), v) in param
        .data_mut()
        .iter_mut()
        .zip(grad.data())
        .zip(velocity.data_mut())
    {
        let d = *g + weight_decay * *p;
        *v = momentum * *v + d;
        let step = if nesterov { d + momentum * *v } else { *v };
        *p -= lr * step;
    }
    Ok(())
}

/// Momentum buffers keyed by parameter name.
#[derive(Clone, Debug, Default)]
pub struct OptimizerState {
    velocity: BTreeMap<String, Tensor<f32>>,
}

impl OptimizerState {
    pub fn new() -> Self {
        Self::default()
    }

    /// Applies `grads` to `params`; parameters without a gradient are left
    /// untouched.
    pub fn step(
        &mut self,
        params: &mut ParamStore<f32>,
        grads: &BTreeMap<String, Tensor<f32>>,
        lr_for: impl Fn(&str) -> f64,
        cfg: &TrainConfig,
    ) -> Result<()> {
        for (name, g) in grads {
            let p = params
                .get_mut(name)
                .ok_or_else(|| Error::ContractViolation(format!("gradient for unknown parameter {name}")))?;
            let v = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(p.shape().to_vec()));
            sgd_step(
                p,
                g,
                v,
                lr_for(name) as f32,
                cfg.momentum as f32,
                cfg.weight_decay as f32,
                cfg.nesterov,
            )?;
        }
        Ok(())
    }
}

/// Dataset with standardized high-resolution images and cached uniform
/// low-resolution views.
pub struct PreparedData<'a> {
    pub items: &'a [LabeledImage],
    pub high: Vec<Tensor<f32>>,
    pub low: Vec<Tensor<f32>>,
    pub low_size: usize,
}

impl<'a> PreparedData<'a> {
    pub fn new(items: &'a [LabeledImage], low_size: usize) -> Result<Self> {
        let low = items
            .iter()
            .map(|it| standardize(uniform_downsample(&it.image, low_size, low_size)?.tensor()))
            .collect::<Result<Vec<_>>>()?;
        let high = items
            .iter()
            .map(|it| standardize(it.image.tensor()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            items,
            high,
            low,
            low_size,
        })
    }

    pub fn labels(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.items[i].label).collect()
    }

    /// `N x 3 x s x s` uniform views.
    pub fn low_batch(&self, indices: &[usize]) -> Result<Tensor<f32>> {
        stack(indices.iter().map(|&i| &self.low[i]))
    }

    /// `N x 3 x S x S` high-resolution images.
    pub fn high_batch(&self, indices: &[usize]) -> Result<Tensor<f32>> {
        stack(indices.iter().map(|&i| &self.high[i]))
    }
}

fn stack<'t>(parts: impl Iterator<Item = &'t Tensor<f32>>) -> Result<Tensor<f32>> {
    let parts: Vec<&Tensor<f32>> = parts.collect();
    let first = parts
        .first()
        .ok_or_else(|| Error::BatchConstruction("empty batch".into()))?
        .shape()
        .to_vec();
    let mut data = Vec::with_capacity(parts.len() * parts[0].numel());
    for p in &parts {
        data.extend_from_slice(p.data());
    }
    let mut shape = vec![parts.len()];
    shape.extend(first);
    Tensor::new(shape, data)
}

/// Multi-view batch, view-major: rows `v * B + b` hold view `v` of image `b`.
#[derive(Clone, Debug)]
pub struct ContrastiveBatch<T: Real> {
    pub views: Tensor<T>,
    pub labels: Vec<usize>,
    pub anchors: Vec<bool>,
    pub image_ids: Vec<usize>,
}

impl<T: Real> ContrastiveBatch<T> {
    pub fn num_images(&self) -> usize {
        self.image_ids.len()
    }

    pub fn view(&self, v: usize, b: usize) -> Result<Tensor<T>> {
        let n = self.num_images();
        self.views.narrow0(v * n + b, 1)
    }
}

fn check_class_counts(labels: &[usize]) -> Result<()> {
    for &l in labels {
        if labels.iter().filter(|&&m| m == l).count() < 2 {
            return Err(Error::BatchConstruction(format!(
                "class {l} appears once in the batch; re-sample indices"
            )));
        }
    }
    Ok(())
}

fn view_labels_and_anchors(labels: &[usize], all_anchor: bool) -> (Vec<usize>, Vec<bool>) {
    let b = labels.len();
    let mut l = Vec::with_capacity(VIEWS * b);
    let mut a = Vec::with_capacity(VIEWS * b);
    for v in 0..VIEWS {
        l.extend_from_slice(labels);
        a.extend(std::iter::repeat(v == 0 || all_anchor).take(b));
    }
    (l, a)
}

/// Uniform view followed by the four saliency-zoomed views, all `5B x 3 x s x s`.
///
/// Stage maps are used as given; detach them first to stop gradients.
fn sa_views<'g, T: Real>(
    model: &ModelBundle<T>,
    bound: &Bound<'g, T>,
    stages: &[Var<'g, T>],
    low: &Var<'g, T>,
    high: &Var<'g, T>,
    kernel: &DistanceKernel,
    tau_o: T,
) -> Result<Var<'g, T>> {
    let s = low.shape()[2];
    let hs = high.shape();
    let maps = model.saliency_maps(bound, stages, tau_o)?;
    let mut views = vec![*low];
    for map in &maps {
        let grid = saliency_grid(map, kernel, s, s, hs[2], hs[3])?;
        views.push(grid_sample(high, &grid)?);
    }
    Var::concat0(&views)
}

fn simclr_views(data: &PreparedData<'_>, indices: &[usize], cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<Tensor<f32>> {
    let mut views = Vec::with_capacity(VIEWS * indices.len());
    for _ in 0..VIEWS {
        for &i in indices {
            views.push(standardize(simclr_view(&data.items[i], data.low_size, &cfg.simclr, rng)?.tensor())?);
        }
    }
    stack(views.iter())
}

/// Builds the contrastive batch for `indices` without gradient tracking.
pub fn build_batch<T: Real>(
    data: &PreparedData<'_>,
    indices: &[usize],
    model: &ModelBundle<T>,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<ContrastiveBatch<T>> {
    let labels = data.labels(indices);
    check_class_counts(&labels)?;
    let views = match cfg.augmentation {
        Augmentation::Simclr5 => simclr_views(data, indices, cfg, rng)?.cast(),
        Augmentation::Sa => {
            let g = Graph::new();
            let bound = model.params.bind(&g, &["sa."], |_| false);
            let low = g.constant(data.low_batch(indices)?.cast());
            let high = g.constant(data.high_batch(indices)?.cast());
            let out = model.sa_forward(&bound, &low)?;
            let kernel = cfg.kernel(data.low_size)?;
            let v = sa_views(model, &bound, &out.stages, &low, &high, &kernel, T::lit(cfg.tau_o))?;
            let t = (*v.value()).clone();
            t
        }
    };
    let (labels, anchors) = view_labels_and_anchors(&labels, cfg.all_views_anchor);
    Ok(ContrastiveBatch {
        views,
        labels,
        anchors,
        image_ids: indices.iter().map(|&i| data.items[i].id).collect(),
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    /// Cross-entropy of the saliency augmentor's auxiliary head.
    pub ce: f64,
    /// Extractor objective: the contrastive loss, or cross-entropy in CE mode.
    pub extractor: f64,
    pub total: f64,
}

/// Stage-1 losses and parameter gradients for one batch of image indices.
///
/// With `include_extractor_loss` false only the auxiliary cross-entropy is
/// back-propagated.
pub fn stage1_gradients(
    model: &ModelBundle<f32>,
    data: &PreparedData<'_>,
    indices: &[usize],
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
    include_extractor_loss: bool,
) -> Result<(StepLosses, BTreeMap<String, Tensor<f32>>)> {
    let labels = data.labels(indices);
    check_class_counts(&labels)?;
    let g = Graph::new();
    let use_sa = cfg.augmentation == Augmentation::Sa;
    let mut prefixes = vec!["fe."];
    prefixes.push(if cfg.loss == LossMode::Ce { "cls." } else { "proj." });
    if use_sa {
        prefixes.push("sa.");
    }
    let joint = cfg.joint_gradients;
    // saliency projections only ever receive gradients through the grids
    let bound = model
        .params
        .bind(&g, &prefixes, |n| joint || !n.starts_with("sa.sal"));
    let low = g.constant(data.low_batch(indices)?);

    let (ce, views) = if use_sa {
        let high = g.constant(data.high_batch(indices)?);
        let out = model.sa_forward(&bound, &low)?;
        let ce = cross_entropy(&out.logits, &labels)?;
        let stages: Vec<Var<'_, f32>> = if joint {
            out.stages
        } else {
            out.stages.iter().map(Var::detach).collect()
        };
        let kernel = cfg.kernel(data.low_size)?;
        let views = sa_views(model, &bound, &stages, &low, &high, &kernel, cfg.tau_o as f32)?;
        (Some(ce), views)
    } else {
        (None, g.constant(simclr_views(data, indices, cfg, rng)?))
    };

    let (view_labels, anchors) = view_labels_and_anchors(&labels, cfg.all_views_anchor);
    let r = model.extractor_forward(&bound, &views)?;
    let extractor = match cfg.loss {
        LossMode::Ce => cross_entropy(&model.classify(&bound, &r)?, &view_labels)?,
        _ => {
            let z = model.project(&bound, &r)?;
            contrastive_loss(&z, &view_labels, &anchors, cfg.tau as f32, cfg.contrastive_kind())?
        }
    };
    let losses = StepLosses {
        ce: ce.map_or(0.0, |c| c.item() as f64),
        extractor: extractor.item() as f64,
        total: ce.map_or(0.0, |c| c.item() as f64) + extractor.item() as f64,
    };
    let objective = match (ce, include_extractor_loss) {
        (Some(c), true) => c.add(&extractor)?,
        (Some(c), false) => c,
        (None, _) => extractor,
    };
    let grads = g.backward(objective)?;
    let mut out = BTreeMap::new();
    for (name, var) in bound.iter() {
        if let Some(t) = grads.get(&var) {
            out.insert(name.to_string(), t.clone());
        }
    }
    Ok((losses, out))
}

/// Learning rates of the two stage-1 parameter groups.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupRates {
    pub sa: f64,
    pub fe: f64,
}

/// One optimizer step over both parameter groups.
pub fn stage1_step(
    model: &mut ModelBundle<f32>,
    state: &mut OptimizerState,
    data: &PreparedData<'_>,
    indices: &[usize],
    cfg: &TrainConfig,
    rates: GroupRates,
    rng: &mut ChaCha8Rng,
) -> Result<StepLosses> {
    let (losses, grads) = stage1_gradients(model, data, indices, cfg, rng, true)?;
    if !losses.total.is_finite() {
        return Err(Error::NonFinite("stage-1 loss".into()));
    }
    state.step(
        &mut model.params,
        &grads,
        |n| if n.starts_with("sa.") { rates.sa } else { rates.fe },
        cfg,
    )?;
    Ok(losses)
}

/// Class-balanced batches: every class present in a batch contributes at
/// least two images.
pub struct BalancedSampler {
    queues: Vec<Vec<usize>>,
    pools: Vec<Vec<usize>>,
    batch: usize,
    steps: usize,
    next_class: usize,
}

impl BalancedSampler {
    pub fn new(labels: &[usize], indices: &[usize], batch: usize) -> Result<Self> {
        if batch < 2 {
            return Err(Error::param("batch must hold at least two images"));
        }
        let classes = labels.iter().copied().max().map_or(0, |m| m + 1);
        let mut pools = vec![Vec::new(); classes];
        for &i in indices {
            pools[labels[i]].push(i);
        }
        pools.retain(|p| !p.is_empty());
        if pools.iter().any(|p| p.len() < 2) {
            return Err(Error::BatchConstruction(
                "every training class needs at least two images".into(),
            ));
        }
        Ok(Self {
            queues: vec![Vec::new(); pools.len()],
            pools,
            batch,
            steps: (indices.len() / batch).max(1),
            next_class: 0,
        })
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.steps
    }

    /// Next image of `class` not already in `taken`, if the class has one.
    fn draw(&mut self, class: usize, taken: &[usize], rng: &mut ChaCha8Rng) -> Option<usize> {
        let spare = self.pools[class].iter().filter(|i| !taken.contains(i)).count();
        if spare == 0 {
            return None;
        }
        loop {
            if self.queues[class].is_empty() {
                let mut q = self.pools[class].clone();
                for i in (1..q.len()).rev() {
                    q.swap(i, rng.gen_range(0..=i));
                }
                self.queues[class] = q;
            }
            let i = self.queues[class].pop().expect("refilled queue");
            if !taken.contains(&i) {
                return Some(i);
            }
        }
    }

    /// Pairs from classes in rotation; an odd slot goes to a class already
    /// in the batch. The batch is one short if no such class has a spare.
    pub fn next_batch(&mut self, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let mut out: Vec<usize> = Vec::with_capacity(self.batch);
        let mut present = Vec::new();
        while out.len() + 2 <= self.batch {
            let c = self.next_class % self.pools.len();
            self.next_class += 1;
            let Some(a) = self.draw(c, &out, rng) else { break };
            out.push(a);
            match self.draw(c, &out, rng) {
                Some(b) => out.push(b),
                None => {
                    out.pop();
                    break;
                }
            }
            present.push(c);
        }
        if out.len() < self.batch {
            for c in present {
                if let Some(extra) = self.draw(c, &out, rng) {
                    out.push(extra);
                    break;
                }
            }
        }
        out
    }
}

/// Appends one JSON line to a log file.
pub fn append_jsonl(path: &Path, value: &serde_json::Value) -> Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    writeln!(f, "{}", serde_json::to_string(value)?)?;
    Ok(())
}

pub const TRAIN_LOG: &str = "train_log.jsonl";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Stage1Report {
    /// Mean losses per epoch.
    pub epochs: Vec<StepLosses>,
}

fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn train_stage1(
    model: &mut ModelBundle<f32>,
    data: &PreparedData<'_>,
    train_idx: &[usize],
    cfg: &TrainConfig,
    run_dir: Option<&Path>,
) -> Result<Stage1Report> {
    cfg.validate()?;
    let all_labels: Vec<usize> = data.items.iter().map(|it| it.label).collect();
    let mut sampler = BalancedSampler::new(&all_labels, train_idx, cfg.batch_images)?;
    let mut sample_rng = rng_stream(cfg.seed, 1);
    let mut aug_rng = rng_stream(cfg.seed, 2);
    let mut state = OptimizerState::new();
    let mut report = Stage1Report::default();
    let mut best = f64::INFINITY;
    let started = Instant::now();
    for epoch in 0..cfg.epochs_stage1 {
        let rates = GroupRates {
            sa: cosine_lr(epoch, cfg.epochs_stage1, cfg.lr_sa),
            fe: cosine_lr(epoch, cfg.epochs_stage1, cfg.lr_fe),
        };
        let mut sum = StepLosses::default();
        let steps = sampler.steps_per_epoch();
        for step in 0..steps {
            let batch = sampler.next_batch(&mut sample_rng);
            let losses = stage1_step(model, &mut state, data, &batch, cfg, rates, &mut aug_rng)
                .map_err(|e| diverged(e, 1, epoch, step, &batch, data, run_dir))?;
            sum.ce += losses.ce;
            sum.extractor += losses.extractor;
            sum.total += losses.total;
        }
        let mean = StepLosses {
            ce: sum.ce / steps as f64,
            extractor: sum.extractor / steps as f64,
            total: sum.total / steps as f64,
        };
        report.epochs.push(mean);
        if let Some(dir) = run_dir {
            append_jsonl(
                &dir.join(TRAIN_LOG),
                &json!({
                    "stage": 1,
                    "epoch": epoch,
                    "lr_sa": rates.sa,
                    "lr_fe": rates.fe,
                    "loss_ce": mean.ce,
                    "loss_dscl": mean.extractor,
                    "loss_total": mean.total,
                    "wall_time": started.elapsed().as_secs_f64(),
                }),
            )?;
            save_checkpoint(model, &dir.join("stage1_last.ckpt"))?;
            if mean.total < best {
                best = mean.total;
                save_checkpoint(model, &dir.join("stage1_best.ckpt"))?;
            }
        }
    }
    Ok(report)
}

fn diverged(
    err: Error,
    stage: usize,
    epoch: usize,
    step: usize,
    batch: &[usize],
    data: &PreparedData<'_>,
    run_dir: Option<&Path>,
) -> Error {
    if !err.is_numeric() {
        return err;
    }
    let ids: Vec<usize> = batch.iter().map(|&i| data.items[i].id).collect();
    let context = format!("stage {stage} epoch {epoch} batch {step} (image ids {ids:?})");
    if let Some(dir) = run_dir {
        let dump = json!({ "stage": stage, "epoch": epoch, "batch": step, "image_ids": ids, "error": err.to_string() });
        // best effort: the original error is what gets reported
        let _ = fs::write(dir.join("diverged_batch.json"), dump.to_string());
    }
    Error::Diverged {
        context,
        source: Box::new(err),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeEpoch {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub train_accuracy: f64,
    /// Accuracy on the held-out features, when given.
    pub test_accuracy: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Stage2Report {
    pub epochs: Vec<ProbeEpoch>,
    pub extractor_checksum_before: String,
    pub extractor_checksum_after: String,
    /// Parameters placed in the stage-2 graphs.
    pub bound_params: Vec<String>,
}

impl Stage2Report {
    /// Epoch (1-based) of the first maximum of the held-out accuracy.
    pub fn best_epoch(&self) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for e in &self.epochs {
            let acc = e.test_accuracy?;
            if best.map_or(true, |(_, b)| acc > b) {
                best = Some((e.epoch + 1, acc));
            }
        }
        best.map(|(e, _)| e)
    }
}

fn accuracy(logits: &Tensor<f32>, labels: &[usize]) -> f64 {
    let k = logits.shape()[1];
    let hits = logits
        .data()
        .chunks(k)
        .zip(labels)
        .filter(|(row, &y)| argmax(row) == y)
        .count();
    hits as f64 / labels.len() as f64
}

pub fn argmax(row: &[f32]) -> usize {
    row.iter()
        .enumerate()
        .fold(0, |best, (i, v)| if *v > row[best] { i } else { best })
}

fn cls_logits(params: &ParamStore<f32>, features: &Tensor<f32>) -> Result<Tensor<f32>> {
    let g = Graph::new();
    let x = g.constant(features.clone());
    let w = g.constant(params.get("cls.w").expect("classifier").clone());
    let b = g.constant(params.get("cls.b").expect("classifier").clone());
    let out = x.linear(&w, &b)?.value();
    Ok((*out).clone())
}

/// Fits `cls.*` of `params` on fixed features with cross-entropy.
///
/// Returns per-epoch statistics and the names bound into the graphs.
pub fn train_linear_probe(
    params: &mut ParamStore<f32>,
    features: &Tensor<f32>,
    labels: &[usize],
    eval: Option<(&Tensor<f32>, &[usize])>,
    cfg: &TrainConfig,
    epochs: usize,
    mut on_epoch: impl FnMut(&ProbeEpoch, &ParamStore<f32>) -> Result<()>,
) -> Result<(Vec<ProbeEpoch>, Vec<String>)> {
    let n = labels.len();
    if features.shape().len() != 2 || features.shape()[0] != n || n == 0 {
        return Err(Error::dim(format!(
            "probe features {:?} with {n} labels",
            features.shape()
        )));
    }
    let mut rng = rng_stream(cfg.seed, 3);
    let mut state = OptimizerState::new();
    let mut history = Vec::with_capacity(epochs);
    let mut bound_names = Vec::new();
    for epoch in 0..epochs {
        let lr = cosine_lr(epoch, epochs, cfg.lr_cls);
        let mut order: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            order.swap(i, rng.gen_range(0..=i));
        }
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.stage2_batch) {
            let rows: Vec<&[f32]> = chunk
                .iter()
                .map(|&i| &features.data()[i * features.shape()[1]..(i + 1) * features.shape()[1]])
                .collect();
            let x = Tensor::new(vec![chunk.len(), features.shape()[1]], rows.concat())?;
            let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let g = Graph::new();
            let bound = params.bind(&g, &["cls."], |_| true);
            if bound_names.is_empty() {
                bound_names = bound.names().to_vec();
            }
            let logits = g.constant(x).linear(&bound.get("cls.w")?, &bound.get("cls.b")?)?;
            let loss = cross_entropy(&logits, &y)?;
            loss_sum += loss.item() as f64 * chunk.len() as f64;
            let grads = g.backward(loss)?;
            let mut named = BTreeMap::new();
            for (name, var) in bound.iter() {
                if let Some(t) = grads.get(&var) {
                    named.insert(name.to_string(), t.clone());
                }
            }
            state.step(params, &named, |_| lr, cfg)?;
        }
        let record = ProbeEpoch {
            epoch,
            lr,
            loss: loss_sum / n as f64,
            train_accuracy: accuracy(&cls_logits(params, features)?, labels),
            test_accuracy: match eval {
                Some((f, l)) => Some(accuracy(&cls_logits(params, f)?, l)),
                None => None,
            },
        };
        on_epoch(&record, params)?;
        history.push(record);
    }
    Ok((history, bound_names))
}

/// Extractor features of the uniform views of `indices`, in chunks.
pub fn extract_features(model: &ModelBundle<f32>, data: &PreparedData<'_>, indices: &[usize]) -> Result<Tensor<f32>> {
    let mut parts = Vec::new();
    for chunk in indices.chunks(64) {
        parts.push(model.features(&data.low_batch(chunk)?)?);
    }
    Tensor::concat0(&parts.iter().collect::<Vec<_>>())
}

/// Re-initializes the classifier and fits it on frozen extractor features.
pub fn train_stage2(
    model: &mut ModelBundle<f32>,
    data: &PreparedData<'_>,
    train_idx: &[usize],
    test_idx: Option<&[usize]>,
    cfg: &TrainConfig,
    epochs: usize,
    run_dir: Option<&Path>,
) -> Result<Stage2Report> {
    cfg.validate()?;
    let before = model.params.checksum("fe.");
    let fresh = ModelBundle::<f32>::init(model.config.clone(), cfg.seed ^ 0x5eed)?;
    for name in ["cls.w", "cls.b"] {
        model.params.insert(name, fresh.params.get(name).expect("classifier").clone());
    }
    let train_f = extract_features(model, data, train_idx)?;
    let train_y = data.labels(train_idx);
    let test = match test_idx {
        Some(idx) => Some((extract_features(model, data, idx)?, data.labels(idx))),
        None => None,
    };
    let started = Instant::now();
    let mut best = f64::INFINITY;
    let mut probe = model.params.clone();
    let config = model.config.clone();
    let (epochs_log, bound) = train_linear_probe(
        &mut probe,
        &train_f,
        &train_y,
        test.as_ref().map(|(f, y)| (f, y.as_slice())),
        cfg,
        epochs,
        |rec, params| {
            if let Some(dir) = run_dir {
                append_jsonl(
                    &dir.join(TRAIN_LOG),
                    &json!({
                        "stage": 2,
                        "epoch": rec.epoch,
                        "lr_cls": rec.lr,
                        "loss_ce": rec.loss,
                        "train_accuracy": rec.train_accuracy,
                        "test_accuracy": rec.test_accuracy,
                        "wall_time": started.elapsed().as_secs_f64(),
                    }),
                )?;
                let snapshot = ModelBundle::from_params(config.clone(), params.clone());
                save_checkpoint(&snapshot, &dir.join("stage2_last.ckpt"))?;
                if rec.loss < best {
                    best = rec.loss;
                    save_checkpoint(&snapshot, &dir.join("stage2_best.ckpt"))?;
                }
            }
            Ok(())
        },
    )
    .map_err(|e| if e.is_numeric() {
        Error::Diverged { context: "stage 2 probe".into(), source: Box::new(e) }
    } else {
        e
    })?;
    for name in ["cls.w", "cls.b"] {
        model.params.insert(name, probe.get(name).expect("classifier").clone());
    }
    let after = model.params.checksum("fe.");
    if before != after {
        return Err(Error::ContractViolation("stage 2 modified extractor parameters".into()));
    }
    Ok(Stage2Report {
        epochs: epochs_log,
        extractor_checksum_before: before,
        extractor_checksum_after: after,
        bound_params: bound,
    })
}

/// Stage 1 then stage 2 on one train/test split.
pub fn train_two_stage(
    model_cfg: &ModelConfig,
    data: &PreparedData<'_>,
    fold: &Fold,
    cfg: &TrainConfig,
    run_dir: Option<&Path>,
) -> Result<(ModelBundle<f32>, Stage1Report, Stage2Report)> {
    let mut model = ModelBundle::init(model_cfg.clone(), cfg.seed)?;
    let s1 = train_stage1(&mut model, data, &fold.train, cfg, run_dir)?;
    let s2 = train_stage2(&mut model, data, &fold.train, Some(&fold.test), cfg, cfg.epochs_stage2, run_dir)?;
    Ok((model, s1, s2))
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DSCL0001";

#[derive(Serialize, Deserialize)]
struct CheckpointEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the data section.
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    config: ModelConfig,
    params: Vec<CheckpointEntry>,
}

/// `DSCL0001`, u64 LE header length, JSON header, LE f32 data.
pub fn save_checkpoint(model: &ModelBundle<f32>, path: &Path) -> Result<()> {
    let mut entries = Vec::with_capacity(model.params.len());
    let mut offset = 0;
    for (name, t) in model.params.iter() {
        entries.push(CheckpointEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset,
        });
        offset += 4 * t.numel();
    }
    let header = serde_json::to_vec(&CheckpointHeader {
        config: model.config.clone(),
        params: entries,
    })?;
    let mut buf = Vec::with_capacity(16 + header.len() + offset);
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header);
    for (_, t) in model.params.iter() {
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    // write then rename so a crash never leaves a torn checkpoint
    let tmp = path.with_extension("tmp");
    File::create(&tmp)?.write_all(&buf)?;
    fs::rename(tmp, path)?;
    Ok(())
}

/// Loads a checkpoint and checks it against `config`.
pub fn load_checkpoint(path: &Path, config: &ModelConfig) -> Result<ModelBundle<f32>> {
    if !path.exists() {
        return Err(Error::MissingCheckpoint(path.to_path_buf()));
    }
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    let corrupt = |m: &str| Error::CorruptCheckpoint(format!("{}: {m}", path.display()));
    if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(corrupt("bad magic bytes"));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(16..).ok_or_else(|| corrupt("truncated"))?;
    if body.len() < len {
        return Err(corrupt("truncated header"));
    }
    let header: CheckpointHeader =
        serde_json::from_slice(&body[..len]).map_err(|e| corrupt(&format!("bad header: {e}")))?;
    let data = &body[len..];
    let mut params = ParamStore::new();
    for e in &header.params {
        let numel: usize = e.shape.iter().product();
        let raw = data
            .get(e.offset..e.offset + 4 * numel)
            .ok_or_else(|| corrupt(&format!("truncated data for {}", e.name)))?;
        let values = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        params.insert(e.name.clone(), Tensor::new(e.shape.clone(), values).map_err(|_| corrupt("bad shape"))?);
    }
    let expected: usize = header.params.iter().map(|e| 4 * e.shape.iter().product::<usize>()).sum();
    if data.len() != expected {
        return Err(corrupt("data section length does not match header"));
    }
    ModelBundle::validate_params(config, &params)?;
    Ok(ModelBundle::from_params(config.clone(), params))
}

/// Reads a JSONL log, dropping the named keys from each line.
pub fn read_log_without(path: &Path, drop: &[&str]) -> Result<Vec<serde_json::Value>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .map(|l| {
            let mut v: serde_json::Value = serde_json::from_str(l)?;
            if let Some(obj) = v.as_object_mut() {
                for k in drop {
                    obj.remove(*k);
                }
            }
            Ok(v)
        })
        .collect()
}

/// Default run-directory file names.
pub fn checkpoint_path(run_dir: &Path, stage: usize, which: &str) -> PathBuf {
    run_dir.join(format!("stage{stage}_{which}.ckpt"))
}
