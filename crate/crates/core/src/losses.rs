//! Cross-entropy and the supervised contrastive objectives.
//!
//! For an anchor `i` with positives `P(i)` (same label, `j != i`) and
//! similarities `s_ij = z_i . z_j / tau`, each contrastive variant computes
//!
//! ```text
//! L_i = -1/|P(i)| sum_{p in P(i)} [ s_ip - log sum_{a in D(i,p)} exp(s_ia) ]
//! ```
//!
//! and averages over anchors. The variants differ only in the denominator
//! set `D(i,p)`: all other samples (SCL), all other samples except `p`
//! (DSCL), or all other samples except every positive.

use crate::error::{Error, Result};
use crate::ndtensor::{BackwardOp, Real, Tensor, Var};

/// Denominator set of the contrastive objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContrastiveKind {
    /// Every sample except the anchor.
    Scl,
    /// Every sample except the anchor and the current positive.
    Dscl,
    /// Every sample except the anchor and all of its positives.
    DsclAllPositives,
}

/// Unit-norm embeddings with labels and anchor flags.
#[derive(Clone, Debug)]
pub struct EmbeddingBatch<T: Real> {
    embeddings: Tensor<T>,
    labels: Vec<usize>,
    anchors: Vec<bool>,
}

impl<T: Real> EmbeddingBatch<T> {
    pub fn new(embeddings: Tensor<T>, labels: Vec<usize>, anchors: Vec<bool>) -> Result<Self> {
        let s = embeddings.shape();
        if s.len() != 2 || s[0] != labels.len() || s[0] != anchors.len() {
            return Err(Error::dim(format!(
                "embeddings {s:?} with {} labels and {} anchor flags",
                labels.len(),
                anchors.len()
            )));
        }
        for (i, row) in embeddings.data().chunks(s[1]).enumerate() {
            let norm = row.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-6 {
                return Err(Error::param(format!("embedding {i} has norm {norm}, not 1")));
            }
        }
        if !anchors.iter().any(|a| *a) {
            return Err(Error::BatchConstruction("batch has no anchor".into()));
        }
        Ok(Self {
            embeddings,
            labels,
            anchors,
        })
    }

    /// Every sample acts as an anchor.
    pub fn all_anchors(embeddings: Tensor<T>, labels: Vec<usize>) -> Result<Self> {
        let n = labels.len();
        Self::new(embeddings, labels, vec![true; n])
    }

    pub fn embeddings(&self) -> &Tensor<T> {
        &self.embeddings
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn anchors(&self) -> &[bool] {
        &self.anchors
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

pub fn scl_loss<T: Real>(batch: &EmbeddingBatch<T>, tau: T) -> Result<T> {
    contrastive_value(batch, tau, ContrastiveKind::Scl)
}

pub fn dscl_loss<T: Real>(batch: &EmbeddingBatch<T>, tau: T) -> Result<T> {
    contrastive_value(batch, tau, ContrastiveKind::Dscl)
}

pub fn contrastive_value<T: Real>(batch: &EmbeddingBatch<T>, tau: T, kind: ContrastiveKind) -> Result<T> {
    let plan = ContrastivePlan::new(&batch.labels, &batch.anchors, kind)?;
    Ok(plan.forward(&batch.embeddings, tau)?.0)
}

/// Differentiable contrastive loss of `N x d` embeddings.
pub fn contrastive_loss<'g, T: Real>(
    z: &Var<'g, T>,
    labels: &[usize],
    anchors: &[bool],
    tau: T,
    kind: ContrastiveKind,
) -> Result<Var<'g, T>> {
    let s = z.shape();
    if s.len() != 2 || s[0] != labels.len() || s[0] != anchors.len() {
        return Err(Error::dim(format!(
            "embeddings {s:?} with {} labels and {} anchor flags",
            labels.len(),
            anchors.len()
        )));
    }
    let plan = ContrastivePlan::new(labels, anchors, kind)?;
    let zv = z.value();
    let (loss, weights) = plan.forward(&zv, tau)?;
    z.graph().record(
        "contrastive_loss",
        Tensor::scalar(loss),
        &[*z],
        ContrastiveBack {
            z: (*zv).clone(),
            weights,
            tau,
        },
    )
}

/// Anchor/positive structure, validated once per batch.
struct ContrastivePlan {
    n: usize,
    kind: ContrastiveKind,
    labels: Vec<usize>,
    /// `(anchor, positives)` pairs.
    terms: Vec<(usize, Vec<usize>)>,
}

impl ContrastivePlan {
    fn new(labels: &[usize], anchors: &[bool], kind: ContrastiveKind) -> Result<Self> {
        let n = labels.len();
        let mut terms = Vec::new();
        for i in (0..n).filter(|&i| anchors[i]) {
            let pos: Vec<usize> = (0..n).filter(|&j| j != i && labels[j] == labels[i]).collect();
            if pos.is_empty() {
                return Err(Error::BatchConstruction(format!(
                    "anchor {i} (class {}) has no positive",
                    labels[i]
                )));
            }
            let denominator_empty = match kind {
                ContrastiveKind::Scl => false,
                ContrastiveKind::Dscl => n < 3,
                ContrastiveKind::DsclAllPositives => pos.len() + 1 == n,
            };
            if denominator_empty {
                return Err(Error::DegenerateBatch(format!(
                    "anchor {i} leaves an empty denominator once positives are removed"
                )));
            }
            terms.push((i, pos));
        }
        if terms.is_empty() {
            return Err(Error::BatchConstruction("batch has no anchor".into()));
        }
        Ok(Self {
            n,
            kind,
            labels: labels.to_vec(),
            terms,
        })
    }

    fn in_denominator(&self, i: usize, p: usize, a: usize) -> bool {
        a != i
            && match self.kind {
                ContrastiveKind::Scl => true,
                ContrastiveKind::Dscl => a != p,
                ContrastiveKind::DsclAllPositives => self.labels[a] != self.labels[i],
            }
    }

    /// Loss and `dL/ds_ij` as a dense `n x n` matrix.
    fn forward<T: Real>(&self, z: &Tensor<T>, tau: T) -> Result<(T, Vec<T>)> {
        if !(tau > T::zero()) {
            return Err(Error::param(format!("temperature must be positive, got {tau}")));
        }
        let n = self.n;
        let d = z.shape()[1];
        let zd = z.data();
        let mut sim = vec![T::zero(); n * n];
        crate::ndtensor::gemm(n, d, n, zd, false, zd, true, T::zero(), &mut sim);
        for v in &mut sim {
            *v = *v / tau;
        }
        let scale = T::one() / T::lit(self.terms.len() as f64);
        let mut loss = T::zero();
        let mut weights = vec![T::zero(); n * n];
        let mut soft = vec![T::zero(); n];
        for (i, pos) in &self.terms {
            let row = &sim[i * n..(i + 1) * n];
            let w = scale / T::lit(pos.len() as f64);
            for &p in pos {
                let mut m = T::neg_infinity();
                for a in (0..n).filter(|&a| self.in_denominator(*i, p, a)) {
                    m = m.max(row[a]);
                }
                let mut total = T::zero();
                for a in 0..n {
                    soft[a] = if self.in_denominator(*i, p, a) {
                        (row[a] - m).exp()
                    } else {
                        T::zero()
                    };
                    total += soft[a];
                }
                loss += w * (m + total.ln() - row[p]);
                let wrow = &mut weights[i * n..(i + 1) * n];
                wrow[p] -= w;
                for a in 0..n {
                    wrow[a] += w * soft[a] / total;
                }
            }
        }
        if !loss.is_finite() {
            return Err(Error::NonFinite("contrastive loss".into()));
        }
        Ok((loss, weights))
    }
}

struct ContrastiveBack<T: Real> {
    z: Tensor<T>,
    weights: Vec<T>,
    tau: T,
}

impl<T: Real> BackwardOp<T> for ContrastiveBack<T> {
    fn backward(&self, g: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        let s = self.z.shape();
        let (n, d) = (s[0], s[1]);
        let scale = g.data()[0] / self.tau;
        let w: Vec<T> = self.weights.iter().map(|v| *v * scale).collect();
        // dz = (W + W^T) z
        let zd = self.z.data();
        let mut dz = vec![T::zero(); n * d];
        crate::ndtensor::gemm(n, n, d, &w, false, zd, false, T::zero(), &mut dz);
        crate::ndtensor::gemm(n, n, d, &w, true, zd, false, T::one(), &mut dz);
        vec![Some(Tensor::new(s.to_vec(), dz).expect("shape"))]
    }
}

/// Mean `-log softmax(logits)[label]` over an `N x K` batch.
pub fn cross_entropy<'g, T: Real>(logits: &Var<'g, T>, labels: &[usize]) -> Result<Var<'g, T>> {
    let s = logits.shape();
    if s.len() != 2 || s[0] != labels.len() {
        return Err(Error::dim(format!(
            "logits {s:?} with {} labels",
            labels.len()
        )));
    }
    let (n, k) = (s[0], s[1]);
    if let Some(bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Label(format!("label {bad} outside [0, {k})")));
    }
    let lv = logits.value();
    let inv_n = T::one() / T::lit(n as f64);
    let mut probs = Vec::with_capacity(n * k);
    let mut loss = T::zero();
    for (row, &y) in lv.data().chunks(k).zip(labels) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let total: T = row.iter().map(|v| (*v - m).exp()).sum();
        loss += (m + total.ln() - row[y]) * inv_n;
        probs.extend(row.iter().map(|v| (*v - m).exp() / total));
    }
    logits.graph().record(
        "cross_entropy",
        Tensor::scalar(loss),
        &[*logits],
        CrossEntropyBack {
            probs: Tensor::new(vec![n, k], probs)?,
            labels: labels.to_vec(),
        },
    )
}

struct CrossEntropyBack<T: Real> {
    probs: Tensor<T>,
    labels: Vec<usize>,
}

impl<T: Real> BackwardOp<T> for CrossEntropyBack<T> {
    fn backward(&self, g: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        let k = self.probs.shape()[1];
        let scale = g.data()[0] / T::lit(self.labels.len() as f64);
        let mut d = self.probs.clone();
        for (row, &y) in d.data_mut().chunks_mut(k).zip(&self.labels) {
            row[y] -= T::one();
            for v in row.iter_mut() {
                *v *= scale;
            }
        }
        vec![Some(d)]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndtensor::{grad_check, Graph};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_rows(rows: Vec<Vec<f64>>) -> Tensor<f64> {
        let d = rows[0].len();
        let n = rows.len();
        let data = rows
            .into_iter()
            .flat_map(|r| {
                let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
                r.into_iter().map(move |v| v / norm)
            })
            .collect();
        Tensor::new(vec![n, d], data).unwrap()
    }

    fn ce_value(logits: Tensor<f64>, labels: &[usize]) -> Result<f64> {
        let g = Graph::new();
        let l = g.constant(logits);
        Ok(cross_entropy(&l, labels)?.item())
    }

    #[test]
    fn cross_entropy_examples() {
        let uniform = ce_value(Tensor::zeros(vec![2, 3]), &[0, 2]).unwrap();
        assert!((uniform - 3f64.ln()).abs() < 1e-15);
        let peaked = ce_value(Tensor::new(vec![1, 3], vec![10.0, 0.0, 0.0]).unwrap(), &[0]).unwrap();
        let closed = (1.0 + 2.0 * (-10f64).exp()).ln();
        assert!((peaked - closed).abs() < 1e-15);
        assert!((peaked - 9.1e-5).abs() < 1e-6);
        assert!(matches!(
            ce_value(Tensor::zeros(vec![1, 3]), &[3]),
            Err(Error::Label(_))
        ));
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let logits = Tensor::from_fn(vec![4, 3], |_| rng.gen_range(-3.0..3.0));
            let labels: Vec<usize> = (0..4).map(|_| rng.gen_range(0..3)).collect();
            let err = grad_check(|_, v| cross_entropy(&v[0], &labels), &[logits], 1e-5).unwrap();
            assert!(err < 1e-6, "{err}");
        }
    }

    #[test]
    fn orthogonal_triplet_examples() {
        let z = unit_rows(vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]);
        let batch = EmbeddingBatch::new(z, vec![0, 0, 1], vec![true, false, false]).unwrap();
        assert!((scl_loss(&batch, 1.0).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert!(dscl_loss(&batch, 1.0).unwrap().abs() < 1e-15);
    }

    #[test]
    fn single_negative_closed_form() {
        let angle = |c: f64| vec![c, (1.0 - c * c).sqrt(), 0.0];
        // anchor e1, positive at cosine 0.9, negative at cosine 0.1 from the anchor
        let neg = vec![0.1, -(1.0 - 0.01f64).sqrt() * 0.6, (1.0 - 0.01f64).sqrt() * 0.8];
        let z = unit_rows(vec![vec![1.0, 0.0, 0.0], angle(0.9), neg]);
        let batch = EmbeddingBatch::new(z, vec![0, 0, 1], vec![true, false, false]).unwrap();
        let loss = dscl_loss(&batch, 0.07).unwrap();
        assert!((loss - (0.1 - 0.9) / 0.07).abs() < 1e-9);
        assert!((loss + 11.4286).abs() < 1e-4);
    }

    #[test]
    fn identical_embeddings_give_log_n_minus_one() {
        let n = 6;
        let z = unit_rows(vec![vec![0.3, -0.4, 0.5]; n]);
        let batch = EmbeddingBatch::all_anchors(z, vec![0, 0, 0, 1, 1, 1]).unwrap();
        assert!((scl_loss(&batch, 0.5).unwrap() - ((n - 1) as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn error_cases() {
        let z = unit_rows(vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        let pair = EmbeddingBatch::new(z.clone(), vec![0, 0], vec![true, false]).unwrap();
        assert!(matches!(dscl_loss(&pair, 0.1), Err(Error::DegenerateBatch(_))));
        assert!(scl_loss(&pair, 0.1).is_ok());
        let lonely = EmbeddingBatch::new(z.clone(), vec![0, 1], vec![true, false]).unwrap();
        assert!(matches!(scl_loss(&lonely, 0.1), Err(Error::BatchConstruction(_))));
        assert!(matches!(
            EmbeddingBatch::new(z.clone(), vec![0, 0], vec![false, false]),
            Err(Error::BatchConstruction(_))
        ));
        let long = Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap();
        assert!(matches!(
            EmbeddingBatch::new(long, vec![0], vec![true]),
            Err(Error::Parameter(_))
        ));
        let z3 = unit_rows(vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]]);
        let same = EmbeddingBatch::all_anchors(z3, vec![0, 0, 0]).unwrap();
        assert!(matches!(
            contrastive_value(&same, 0.1, ContrastiveKind::DsclAllPositives),
            Err(Error::DegenerateBatch(_))
        ));
        assert!(matches!(scl_loss(&pair, 0.0), Err(Error::Parameter(_))));
    }

    #[test]
    fn removing_all_positives_only_changes_multi_positive_terms() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let rows: Vec<Vec<f64>> = (0..4).map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let batch = EmbeddingBatch::all_anchors(unit_rows(rows), vec![0, 0, 1, 1]).unwrap();
        let a = dscl_loss(&batch, 0.2).unwrap();
        let b = contrastive_value(&batch, 0.2, ContrastiveKind::DsclAllPositives).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn losses_are_permutation_and_rotation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let n = rng.gen_range(4..10);
            let d = rng.gen_range(2..6);
            let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
            let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
            let anchors: Vec<bool> = (0..n).map(|i| i % 3 != 2).collect();
            let batch = EmbeddingBatch::new(unit_rows(rows.clone()), labels.clone(), anchors.clone()).unwrap();

            let mut order: Vec<usize> = (0..n).collect();
            for i in (1..n).rev() {
                order.swap(i, rng.gen_range(0..=i));
            }
            let permuted = EmbeddingBatch::new(
                unit_rows(order.iter().map(|&i| rows[i].clone()).collect()),
                order.iter().map(|&i| labels[i]).collect(),
                order.iter().map(|&i| anchors[i]).collect(),
            )
            .unwrap();

            let q = random_rotation(d, &mut rng);
            let rotated: Vec<Vec<f64>> = rows
                .iter()
                .map(|r| (0..d).map(|a| (0..d).map(|b| q[a * d + b] * r[b]).sum()).collect())
                .collect();
            let rotated = EmbeddingBatch::new(unit_rows(rotated), labels, anchors).unwrap();

            for kind in [ContrastiveKind::Scl, ContrastiveKind::Dscl] {
                let base = contrastive_value(&batch, 0.3, kind).unwrap();
                assert!((base - contrastive_value(&permuted, 0.3, kind).unwrap()).abs() < 1e-9);
                assert!((base - contrastive_value(&rotated, 0.3, kind).unwrap()).abs() < 1e-9);
            }
        }
    }

    /// Orthogonal matrix from Gram-Schmidt on a random square matrix.
    fn random_rotation(d: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let mut q: Vec<Vec<f64>> = Vec::new();
        while q.len() < d {
            let mut v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            for u in &q {
                let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                for (a, b) in v.iter_mut().zip(u) {
                    *a -= dot * b;
                }
            }
            let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            if norm > 1e-3 {
                q.push(v.into_iter().map(|a| a / norm).collect());
            }
        }
        q.concat()
    }

    #[test]
    fn graph_loss_equals_value_api() {
        let z = unit_rows(vec![vec![1.0, 0.2], vec![0.3, 1.0], vec![-1.0, 0.5], vec![0.1, -1.0]]);
        let labels = [0, 0, 1, 1];
        let anchors = [true, false, true, false];
        let batch = EmbeddingBatch::new(z.clone(), labels.to_vec(), anchors.to_vec()).unwrap();
        let g = Graph::new();
        let v = g.constant(z);
        let loss = contrastive_loss(&v, &labels, &anchors, 0.1, ContrastiveKind::Dscl).unwrap();
        assert_eq!(loss.item(), dscl_loss(&batch, 0.1).unwrap());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn decoupling_lowers_the_loss(seed in any::<u64>(), tau in 0.05f64..2.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = rng.gen_range(3..10);
            let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
            let labels: Vec<usize> = (0..n).map(|i| if i < 2 { 0 } else { rng.gen_range(0..2) }).collect();
            let batch = EmbeddingBatch::new(unit_rows(rows), labels, (0..n).map(|i| i == 0).collect()).unwrap();
            prop_assert!(dscl_loss(&batch, tau).unwrap() < scl_loss(&batch, tau).unwrap());
        }
    }
}
