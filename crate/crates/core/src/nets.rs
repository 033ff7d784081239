//! The networks: saliency augmentor (backbone, auxiliary head, saliency
//! projections), feature extractor, projector and linear classifier.
//!
//! Parameters live in one ordered [`ParamStore`] under the prefixes `sa.`,
//! `fe.`, `proj.` and `cls.`. A forward pass binds the parameters it needs
//! into a [`Graph`]; anything not bound is absent from that graph.

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::ndtensor::{Graph, Real, Tensor, Var};
use crate::saliency::saliency_var;

pub const NUM_STAGES: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    /// Output channels of the four stages.
    pub channels: Vec<usize>,
    /// 3x3 conv + relu layers per stage, followed by a 2x2 max pool.
    pub blocks_per_stage: usize,
    /// Side of the square low-resolution input.
    pub input_size: usize,
    pub in_channels: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            channels: vec![8, 16, 32, 64],
            blocks_per_stage: 2,
            input_size: 32,
            in_channels: 3,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.len() != NUM_STAGES {
            return Err(Error::param(format!(
                "backbone needs exactly {NUM_STAGES} stages, got {}",
                self.channels.len()
            )));
        }
        if self.channels.contains(&0) || self.blocks_per_stage == 0 || self.in_channels == 0 {
            return Err(Error::param("backbone channels and blocks must be positive"));
        }
        // the final stage map feeds a saliency grid and needs at least 2 x 2
        if self.input_size < 32 || self.input_size % 16 != 0 {
            return Err(Error::param(format!(
                "input size {} must be a multiple of 16 and at least 32",
                self.input_size
            )));
        }
        Ok(())
    }

    /// Channels of the pooled final stage.
    pub fn feature_dim(&self) -> usize {
        self.channels[NUM_STAGES - 1]
    }

    /// `(channels, side)` of each stage output.
    pub fn stage_shapes(&self) -> Vec<(usize, usize)> {
        (0..NUM_STAGES)
            .map(|s| (self.channels[s], self.input_size >> (s + 1)))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub proj_dim: usize,
    pub num_classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            proj_dim: 16,
            num_classes: 3,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.proj_dim == 0 || self.proj_dim >= self.backbone.feature_dim() {
            return Err(Error::param(format!(
                "projection dim {} must lie in [1, {})",
                self.proj_dim,
                self.backbone.feature_dim()
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::param("need at least two classes"));
        }
        Ok(())
    }

    /// Names and shapes of every parameter, in storage order.
    pub fn param_layout(&self) -> Vec<(String, Vec<usize>)> {
        let bb = &self.backbone;
        let mut out = Vec::new();
        for net in ["sa", "fe"] {
            let mut cin = bb.in_channels;
            for (s, &cout) in bb.channels.iter().enumerate() {
                for b in 0..bb.blocks_per_stage {
                    out.push((format!("{net}.s{s}.conv{b}.w"), vec![cout, cin, 3, 3]));
                    out.push((format!("{net}.s{s}.conv{b}.b"), vec![cout]));
                    cin = cout;
                }
            }
            if net == "sa" {
                out.push(("sa.head.w".into(), vec![self.num_classes, bb.feature_dim()]));
                out.push(("sa.head.b".into(), vec![self.num_classes]));
                for (s, &c) in bb.channels.iter().enumerate() {
                    out.push((format!("sa.sal{s}.w"), vec![1, c, 1, 1]));
                }
            }
        }
        out.push(("proj.w".into(), vec![self.proj_dim, bb.feature_dim()]));
        out.push(("proj.b".into(), vec![self.proj_dim]));
        out.push(("cls.w".into(), vec![self.num_classes, bb.feature_dim()]));
        out.push(("cls.b".into(), vec![self.num_classes]));
        out
    }
}

/// Named tensors in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T: Real> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        let name = name.into();
        match self.index.get(&name) {
            Some(&i) => self.tensors[i] = value,
            None => {
                self.index.insert(name.clone(), self.names.len());
                self.names.push(name);
                self.tensors.push(value);
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for (n, t) in self.iter() {
            out.insert(n, t.cast());
        }
        out
    }

    /// SHA-256 over names, shapes and little-endian values of the parameters
    /// whose names start with `prefix`.
    pub fn checksum(&self, prefix: &str) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.iter().filter(|(n, _)| n.starts_with(prefix)) {
            h.update(name.as_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.as_f64().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Places every parameter whose name starts with one of `prefixes` into
    /// `graph`; those selected by `trainable` become gradient leaves.
    pub fn bind<'g>(
        &self,
        graph: &'g Graph<T>,
        prefixes: &[&str],
        trainable: impl Fn(&str) -> bool,
    ) -> Bound<'g, T> {
        let mut vars = HashMap::new();
        let mut order = Vec::new();
        for (name, t) in self.iter() {
            if prefixes.iter().any(|p| name.starts_with(p)) {
                let v = graph.leaf(t.clone(), trainable(name));
                vars.insert(name.to_string(), v);
                order.push(name.to_string());
            }
        }
        Bound { vars, order }
    }
}

/// Parameters placed in one graph.
pub struct Bound<'g, T: Real> {
    vars: HashMap<String, Var<'g, T>>,
    order: Vec<String>,
}

impl<'g, T: Real> Bound<'g, T> {
    pub fn get(&self, name: &str) -> Result<Var<'g, T>> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::ContractViolation(format!("parameter {name} is not bound")))
    }

    pub fn names(&self) -> &[String] {
        &self.order
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var<'g, T>)> + '_ {
        self.order.iter().map(|n| (n.as_str(), self.vars[n]))
    }
}

/// Saliency-augmentor output.
pub struct SaOutput<'g, T: Real> {
    pub stages: Vec<Var<'g, T>>,
    pub logits: Var<'g, T>,
}

/// Network configuration, parameters and call instrumentation.
#[derive(Debug)]
pub struct ModelBundle<T: Real> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    sa_calls: AtomicUsize,
}

impl<T: Real> Clone for ModelBundle<T> {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            params: self.params.clone(),
            sa_calls: AtomicUsize::new(self.sa_calls()),
        }
    }
}

impl<T: Real> ModelBundle<T> {
    /// Seeded initialization: conv weights He-uniform, linear weights
    /// uniform in `+-1/sqrt(fan_in)`, biases zero, saliency projections
    /// `1/C` so that initial saliency follows mean activation.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for (name, shape) in config.param_layout() {
            let numel: usize = shape.iter().product();
            let t = if name.ends_with(".b") {
                Tensor::zeros(shape)
            } else if name.starts_with("sa.sal") {
                Tensor::full(shape.clone(), T::lit(1.0 / shape[1] as f64))
            } else {
                let fan_in = (numel / shape[0]) as f64;
                let bound = if shape.len() == 4 {
                    (6.0 / fan_in).sqrt()
                } else {
                    1.0 / fan_in.sqrt()
                };
                Tensor::from_fn(shape, |_| T::lit(rng.gen_range(-bound..bound)))
            };
            params.insert(name, t);
        }
        Ok(Self::from_params(config, params))
    }

    pub fn from_params(config: ModelConfig, params: ParamStore<T>) -> Self {
        Self {
            config,
            params,
            sa_calls: AtomicUsize::new(0),
        }
    }

    /// Checks that `params` holds exactly the layout of `config`.
    pub fn validate_params(config: &ModelConfig, params: &ParamStore<T>) -> Result<()> {
        for (name, shape) in config.param_layout() {
            match params.get(&name) {
                None => {
                    return Err(Error::ParamShape {
                        name,
                        expected: shape,
                        found: vec![],
                    })
                }
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(Error::ParamShape {
                        name,
                        expected: shape,
                        found: t.shape().to_vec(),
                    })
                }
                Some(_) => {}
            }
        }
        if params.len() != config.param_layout().len() {
            return Err(Error::CorruptCheckpoint("unexpected extra parameters".into()));
        }
        Ok(())
    }

    pub fn sa_calls(&self) -> usize {
        self.sa_calls.load(Ordering::Relaxed)
    }

    pub fn reset_sa_calls(&self) {
        self.sa_calls.store(0, Ordering::Relaxed);
    }

    fn check_input(&self, x: &Var<'_, T>) -> Result<()> {
        let bb = &self.config.backbone;
        let s = x.shape();
        if s.len() != 4 || s[1] != bb.in_channels || s[2] != bb.input_size || s[3] != bb.input_size {
            return Err(Error::dim(format!(
                "expected N x {} x {} x {} input, got {s:?}",
                bb.in_channels, bb.input_size, bb.input_size
            )));
        }
        Ok(())
    }

    fn backbone<'g>(&self, bound: &Bound<'g, T>, net: &str, x: &Var<'g, T>) -> Result<Vec<Var<'g, T>>> {
        self.check_input(x)?;
        let mut h = *x;
        let mut stages = Vec::with_capacity(NUM_STAGES);
        for s in 0..NUM_STAGES {
            for b in 0..self.config.backbone.blocks_per_stage {
                let w = bound.get(&format!("{net}.s{s}.conv{b}.w"))?;
                let bias = bound.get(&format!("{net}.s{s}.conv{b}.b"))?;
                h = h.conv2d(&w, 1, 1)?.add_channel_bias(&bias)?.relu()?;
            }
            h = h.max_pool2()?;
            stages.push(h);
        }
        Ok(stages)
    }

    /// Four stage maps of the saliency backbone and its auxiliary logits.
    pub fn sa_forward<'g>(&self, bound: &Bound<'g, T>, x: &Var<'g, T>) -> Result<SaOutput<'g, T>> {
        self.sa_calls.fetch_add(1, Ordering::Relaxed);
        let stages = self.backbone(bound, "sa", x)?;
        let pooled = stages[NUM_STAGES - 1].global_avg_pool()?;
        let logits = pooled.linear(&bound.get("sa.head.w")?, &bound.get("sa.head.b")?)?;
        Ok(SaOutput { stages, logits })
    }

    /// `N x 1 x h x w` saliency maps of each stage.
    pub fn saliency_maps<'g>(
        &self,
        bound: &Bound<'g, T>,
        stages: &[Var<'g, T>],
        tau_o: T,
    ) -> Result<Vec<Var<'g, T>>> {
        stages
            .iter()
            .enumerate()
            .map(|(s, f)| saliency_var(f, &bound.get(&format!("sa.sal{s}.w"))?, tau_o))
            .collect()
    }

    /// Pooled final-stage features `N x D`.
    pub fn extractor_forward<'g>(&self, bound: &Bound<'g, T>, x: &Var<'g, T>) -> Result<Var<'g, T>> {
        let stages = self.backbone(bound, "fe", x)?;
        stages[NUM_STAGES - 1].global_avg_pool()
    }

    /// Unit-norm projections `N x d`.
    pub fn project<'g>(&self, bound: &Bound<'g, T>, r: &Var<'g, T>) -> Result<Var<'g, T>> {
        r.linear(&bound.get("proj.w")?, &bound.get("proj.b")?)?
            .l2_normalize(1)
    }

    pub fn classify<'g>(&self, bound: &Bound<'g, T>, r: &Var<'g, T>) -> Result<Var<'g, T>> {
        r.linear(&bound.get("cls.w")?, &bound.get("cls.b")?)
    }

    /// Extractor features of a batch, without gradient tracking.
    pub fn features(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let g = Graph::new();
        let bound = self.params.bind(&g, &["fe."], |_| false);
        let x = g.constant(images.clone());
        Ok((*self.extractor_forward(&bound, &x)?.value()).clone())
    }

    /// Classifier logits of a batch of low-resolution images.
    pub fn predict_logits(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let g = Graph::new();
        let bound = self.params.bind(&g, &["fe.", "cls."], |_| false);
        let x = g.constant(images.clone());
        let r = self.extractor_forward(&bound, &x)?;
        Ok((*self.classify(&bound, &r)?.value()).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndtensor::grad_check;

    fn model(seed: u64) -> ModelBundle<f64> {
        ModelBundle::init(ModelConfig::default(), seed).unwrap()
    }

    #[test]
    fn stage_shapes_halve() {
        let m = model(0);
        let g = Graph::new();
        let bound = m.params.bind(&g, &["sa."], |_| false);
        let x = g.constant(Tensor::from_fn(vec![2, 3, 32, 32], |i| (i % 7) as f64 / 7.0));
        let out = m.sa_forward(&bound, &x).unwrap();
        let shapes: Vec<Vec<usize>> = out.stages.iter().map(|s| s.shape()).collect();
        assert_eq!(
            shapes,
            vec![vec![2, 8, 16, 16], vec![2, 16, 8, 8], vec![2, 32, 4, 4], vec![2, 64, 2, 2]]
        );
        assert_eq!(out.logits.shape(), vec![2, 3]);
        assert_eq!(m.sa_calls(), 1);
        let wrong = g.constant(Tensor::zeros(vec![1, 3, 16, 16]));
        assert!(matches!(m.sa_forward(&bound, &wrong), Err(Error::Dimension(_))));
    }

    #[test]
    fn zero_input_gives_equal_logits_and_zero_features() {
        let m = model(1);
        let g = Graph::new();
        let bound = m.params.bind(&g, &["sa.", "fe."], |_| false);
        let x = g.constant(Tensor::zeros(vec![1, 3, 32, 32]));
        let logits = m.sa_forward(&bound, &x).unwrap().logits.value();
        assert!(logits.data().iter().all(|&v| v == logits.data()[0]));
        let r = m.extractor_forward(&bound, &x).unwrap().value();
        assert_eq!(r.shape(), &[1, 64]);
        assert!(r.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_is_bit_identical_across_calls() {
        let m = model(2);
        let x = Tensor::from_fn(vec![2, 3, 32, 32], |i| ((i * 31) % 17) as f64 / 17.0);
        assert_eq!(m.features(&x).unwrap(), m.features(&x).unwrap());
    }

    #[test]
    fn init_is_seeded_and_networks_are_disjoint() {
        let (a, b, c) = (model(5), model(5), model(6));
        assert_eq!(a.params, b.params);
        assert_ne!(a.params, c.params);
        for (name, t) in a.params.iter().filter(|(n, _)| n.starts_with("sa.") && n.contains(".conv")) {
            let twin = a.params.get(&name.replacen("sa.", "fe.", 1)).unwrap();
            assert_eq!(t.shape(), twin.shape());
            if name.ends_with(".w") {
                assert_ne!(t, twin);
            }
        }
        let layout = ModelConfig::default().param_layout();
        assert!(layout.iter().all(|(n, _)| ["sa.", "fe.", "proj.", "cls."]
            .iter()
            .any(|p| n.starts_with(p))));
    }

    #[test]
    fn projector_matches_linear_then_normalize() {
        let m = model(3);
        let r = Tensor::from_fn(vec![4, 64], |i| ((i * 13) % 11) as f64 / 11.0 - 0.4);
        let g = Graph::new();
        let bound = m.params.bind(&g, &["proj."], |_| false);
        let z = m.project(&bound, &g.constant(r.clone())).unwrap().value();
        let (w, b) = (m.params.get("proj.w").unwrap(), m.params.get("proj.b").unwrap());
        for n in 0..4 {
            let lin: Vec<f64> = (0..16)
                .map(|k| b.data()[k] + (0..64).map(|d| w.data()[k * 64 + d] * r.data()[n * 64 + d]).sum::<f64>())
                .collect();
            let norm = lin.iter().map(|v| v * v).sum::<f64>().sqrt();
            for k in 0..16 {
                assert!((z.data()[n * 16 + k] - lin[k] / norm).abs() < 1e-12);
            }
            let zn: f64 = z.data()[n * 16..(n + 1) * 16].iter().map(|v| v * v).sum();
            assert!((zn.sqrt() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn identity_projector_returns_unit_input() {
        let cfg = ModelConfig {
            backbone: BackboneConfig {
                channels: vec![2, 2, 4, 4],
                ..BackboneConfig::default()
            },
            proj_dim: 3,
            num_classes: 3,
        };
        let m = ModelBundle::<f64>::init(cfg.clone(), 0).unwrap();
        // square identity needs d = D, which the configuration forbids; bind by hand
        let g = Graph::new();
        let mut params = m.params.clone();
        params.insert("proj.w", Tensor::from_fn(vec![4, 4], |i| if i % 5 == 0 { 1.0 } else { 0.0 }));
        params.insert("proj.b", Tensor::zeros(vec![4]));
        let bound = params.bind(&g, &["proj."], |_| false);
        let r = Tensor::new(vec![1, 4], vec![0.5, 0.5, 0.5, 0.5]).unwrap();
        let z = m.project(&bound, &g.constant(r.clone())).unwrap().value();
        assert_eq!(z.data(), r.data());
        let zero = g.constant(Tensor::zeros(vec![1, 4]));
        assert!(matches!(m.project(&bound, &zero), Err(Error::DegenerateVector { .. })));
    }

    #[test]
    fn classifier_is_affine() {
        let m = model(4);
        let g = Graph::new();
        let bound = m.params.bind(&g, &["cls."], |_| false);
        let logits = m.classify(&bound, &g.constant(Tensor::zeros(vec![1, 64]))).unwrap();
        assert_eq!(logits.value().data(), m.params.get("cls.b").unwrap().data());
        let wrong = g.constant(Tensor::zeros(vec![1, 63]));
        assert!(matches!(m.classify(&bound, &wrong), Err(Error::Dimension(_))));
    }

    #[test]
    fn extractor_first_layer_gradient_matches_finite_differences() {
        let cfg = ModelConfig {
            backbone: BackboneConfig {
                channels: vec![2, 3, 3, 4],
                blocks_per_stage: 1,
                input_size: 32,
                in_channels: 3,
            },
            proj_dim: 2,
            num_classes: 3,
        };
        let m = ModelBundle::<f64>::init(cfg, 7).unwrap();
        let x = Tensor::from_fn(vec![2, 3, 32, 32], |i| ((i * 7919) % 101) as f64 / 101.0);
        let head = Tensor::from_fn(vec![1, 4], |i| 0.3 + i as f64 * 0.2);
        let w0 = m.params.get("fe.s0.conv0.w").unwrap().clone();
        let err = grad_check(
            |g, v| {
                let mut params = m.params.clone();
                params.insert("fe.s0.conv0.w", Tensor::zeros(vec![2, 3, 3, 3]));
                let mut bound = params.bind(g, &["fe."], |_| false);
                bound.vars.insert("fe.s0.conv0.w".into(), v[0]);
                let r = m.extractor_forward(&bound, &g.constant(x.clone()))?;
                r.linear(&g.constant(head.clone()), &g.constant(Tensor::zeros(vec![1])))?
                    .sum()
            },
            &[w0],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn checksum_tracks_prefix_contents() {
        let mut m = model(8);
        let fe = m.params.checksum("fe.");
        let all = m.params.checksum("");
        m.params.get_mut("cls.w").unwrap().data_mut()[0] += 1.0;
        assert_eq!(fe, m.params.checksum("fe."));
        assert_ne!(all, m.params.checksum(""));
    }

    #[test]
    fn config_validation() {
        let mut cfg = ModelConfig::default();
        cfg.backbone.channels.pop();
        assert!(matches!(cfg.validate(), Err(Error::Parameter(_))));
        let mut cfg = ModelConfig::default();
        cfg.backbone.input_size = 40;
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::default();
        cfg.proj_dim = 64;
        assert!(cfg.validate().is_err());
    }
}
