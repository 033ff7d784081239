//! Confusion matrices, recalls, Cohen's kappa, cosine-similarity statistics,
//! inference timing and embedding export.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndtensor::{Real, Tensor, NORM_EPS};
use crate::nets::ModelBundle;
use crate::trainer::{argmax, extract_features, PreparedData};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<u64>>,
    pub recalls: Vec<f64>,
    pub overall_accuracy: f64,
}

pub fn evaluate(predictions: &[usize], labels: &[usize], k: usize) -> Result<Evaluation> {
    if predictions.len() != labels.len() {
        return Err(Error::Evaluation(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::Evaluation("no samples".into()));
    }
    let mut confusion = vec![vec![0u64; k]; k];
    for (&p, &y) in predictions.iter().zip(labels) {
        if p >= k || y >= k {
            return Err(Error::Label(format!("class outside [0, {k}): label {y}, prediction {p}")));
        }
        confusion[y][p] += 1;
    }
    let mut recalls = Vec::with_capacity(k);
    for (c, row) in confusion.iter().enumerate() {
        let total: u64 = row.iter().sum();
        if total == 0 {
            return Err(Error::Evaluation(format!("class {c} has no samples; recall undefined")));
        }
        recalls.push(row[c] as f64 / total as f64);
    }
    let trace: u64 = (0..k).map(|c| confusion[c][c]).sum();
    Ok(Evaluation {
        overall_accuracy: trace as f64 / labels.len() as f64,
        confusion,
        recalls,
    })
}

/// `(p_o - p_e) / (1 - p_e)` of a square count matrix.
pub fn cohens_kappa(confusion: &[Vec<u64>]) -> Result<f64> {
    let k = confusion.len();
    if confusion.iter().any(|r| r.len() != k) {
        return Err(Error::dim("confusion matrix must be square"));
    }
    let total: u64 = confusion.iter().flatten().sum();
    if total == 0 {
        return Err(Error::Evaluation("empty confusion matrix".into()));
    }
    let n = total as f64;
    let p_o = (0..k).map(|c| confusion[c][c]).sum::<u64>() as f64 / n;
    let p_e = (0..k)
        .map(|c| {
            let row: u64 = confusion[c].iter().sum();
            let col: u64 = confusion.iter().map(|r| r[c]).sum();
            row as f64 * col as f64
        })
        .sum::<f64>()
        / (n * n);
    if (1.0 - p_e).abs() < 1e-15 {
        return Err(Error::UndefinedKappa);
    }
    Ok((p_o - p_e) / (1.0 - p_e))
}

/// Mean cosine similarity over same-class pairs and over cross-class pairs.
pub fn similarity_stats<T: Real>(x: &Tensor<T>, labels: &[usize]) -> Result<(f64, f64)> {
    let s = x.shape();
    if s.len() != 2 || s[0] != labels.len() {
        return Err(Error::dim(format!("{s:?} rows with {} labels", labels.len())));
    }
    if s[0] < 2 {
        return Err(Error::Evaluation("need at least two vectors".into()));
    }
    let d = s[1];
    let unit: Vec<Vec<f64>> = x
        .data()
        .chunks(d)
        .map(|row| {
            let norm = row.iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt();
            if norm < NORM_EPS {
                return Err(Error::DegenerateVector { norm, eps: NORM_EPS });
            }
            Ok(row.iter().map(|v| v.as_f64() / norm).collect())
        })
        .collect::<Result<_>>()?;
    let (mut intra, mut n_intra, mut inter, mut n_inter) = (0.0, 0u64, 0.0, 0u64);
    for i in 0..unit.len() {
        for j in i + 1..unit.len() {
            let c: f64 = unit[i].iter().zip(&unit[j]).map(|(a, b)| a * b).sum();
            if labels[i] == labels[j] {
                intra += c;
                n_intra += 1;
            } else {
                inter += c;
                n_inter += 1;
            }
        }
    }
    if n_intra == 0 || n_inter == 0 {
        return Err(Error::Evaluation(
            "similarity statistics need a same-class pair and two classes".into(),
        ));
    }
    Ok((intra / n_intra as f64, inter / n_inter as f64))
}

/// Which vectors feed the similarity statistics.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilaritySource {
    #[default]
    Logits,
    Features,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub ms_per_image: f64,
    pub warmup: usize,
    pub reps: usize,
    pub batch: usize,
    /// Per-rep batch times in milliseconds.
    pub samples_ms: Vec<f64>,
    pub sa_calls: usize,
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

fn timed(reps: usize, warmup: usize, mut f: impl FnMut() -> Result<()>) -> Result<Vec<f64>> {
    for _ in 0..warmup {
        f()?;
    }
    let mut out = Vec::with_capacity(reps);
    for _ in 0..reps {
        let t = Instant::now();
        f()?;
        out.push(t.elapsed().as_secs_f64() * 1e3);
    }
    Ok(out)
}

fn timing(samples: Vec<f64>, warmup: usize, batch: usize, sa_calls: usize) -> Timing {
    Timing {
        ms_per_image: median(&samples) / batch as f64,
        warmup,
        reps: samples.len(),
        batch,
        samples_ms: samples,
        sa_calls,
    }
}

/// Median wall time per image of the deployed path: extractor then linear
/// classifier. Fails if the saliency augmentor runs.
pub fn time_inference(model: &ModelBundle<f32>, images: &Tensor<f32>, warmup: usize, reps: usize) -> Result<Timing> {
    if reps == 0 {
        return Err(Error::param("reps must be at least 1"));
    }
    let before = model.sa_calls();
    let samples = timed(reps, warmup, || model.predict_logits(images).map(drop))?;
    let calls = model.sa_calls() - before;
    if calls != 0 {
        return Err(Error::ContractViolation(format!(
            "saliency augmentor ran {calls} times during timing"
        )));
    }
    Ok(timing(samples, warmup, images.shape()[0], calls))
}

/// Times the full inference path and the extractor alone, interleaving reps
/// so both see the same machine state.
pub fn compare_inference_paths(
    model: &ModelBundle<f32>,
    images: &Tensor<f32>,
    warmup: usize,
    reps: usize,
) -> Result<(Timing, Timing)> {
    if reps == 0 {
        return Err(Error::param("reps must be at least 1"));
    }
    let before = model.sa_calls();
    for _ in 0..warmup {
        model.predict_logits(images)?;
        model.features(images)?;
    }
    let (mut full, mut bare) = (Vec::with_capacity(reps), Vec::with_capacity(reps));
    for _ in 0..reps {
        let t = Instant::now();
        model.predict_logits(images)?;
        full.push(t.elapsed().as_secs_f64() * 1e3);
        let t = Instant::now();
        model.features(images)?;
        bare.push(t.elapsed().as_secs_f64() * 1e3);
    }
    let calls = model.sa_calls() - before;
    if calls != 0 {
        return Err(Error::ContractViolation(format!(
            "saliency augmentor ran {calls} times during timing"
        )));
    }
    let n = images.shape()[0];
    Ok((timing(full, warmup, n, calls), timing(bare, warmup, n, calls)))
}

/// CSV with header `id,label,d0,..`; values carry 9 significant digits.
pub fn export_embeddings<T: Real>(embeddings: &Tensor<T>, labels: &[usize], ids: &[usize], path: &Path) -> Result<()> {
    let s = embeddings.shape();
    if s.len() != 2 || s[0] != labels.len() || s[0] != ids.len() {
        return Err(Error::dim(format!(
            "embeddings {s:?} with {} labels and {} ids",
            labels.len(),
            ids.len()
        )));
    }
    let mut w = csv::Writer::from_path(path).map_err(csv_error)?;
    let mut header = vec!["id".to_string(), "label".to_string()];
    header.extend((0..s[1]).map(|d| format!("d{d}")));
    w.write_record(&header).map_err(csv_error)?;
    for (r, row) in embeddings.data().chunks(s[1]).enumerate() {
        let mut rec = vec![ids[r].to_string(), labels[r].to_string()];
        rec.extend(row.iter().map(|v| format!("{:.8e}", v.as_f64())));
        w.write_record(&rec).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingRows {
    pub ids: Vec<usize>,
    pub labels: Vec<usize>,
    pub values: Vec<Vec<f64>>,
}

pub fn read_embeddings(path: &Path) -> Result<EmbeddingRows> {
    let mut r = csv::Reader::from_path(path).map_err(csv_error)?;
    let mut out = EmbeddingRows {
        ids: Vec::new(),
        labels: Vec::new(),
        values: Vec::new(),
    };
    let bad = |m: String| Error::Ingestion {
        path: path.to_path_buf(),
        reason: m,
    };
    for rec in r.records() {
        let rec = rec.map_err(csv_error)?;
        let field = |i: usize| rec.get(i).ok_or_else(|| bad(format!("short row {rec:?}")));
        out.ids.push(field(0)?.parse().map_err(|e| bad(format!("{e}")))?);
        out.labels.push(field(1)?.parse().map_err(|e| bad(format!("{e}")))?);
        out.values.push(
            rec.iter()
                .skip(2)
                .map(|v| v.parse::<f64>().map_err(|e| bad(format!("{e}"))))
                .collect::<Result<_>>()?,
        );
    }
    Ok(out)
}

fn csv_error(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub confusion: Vec<Vec<u64>>,
    pub recalls: Vec<f64>,
    pub n_rec: f64,
    pub v_rec: f64,
    pub i_rec: f64,
    pub overall_accuracy: f64,
    pub cohens_kappa: f64,
    pub intra_class_similarity: f64,
    pub inter_class_similarity: f64,
    pub similarity_source: SimilaritySource,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ms_per_image: Option<f64>,
}

impl MetricsReport {
    pub fn from_parts(eval: Evaluation, kappa: f64, similarity: (f64, f64), source: SimilaritySource) -> Self {
        let recall = |c: usize| eval.recalls.get(c).copied().unwrap_or(f64::NAN);
        Self {
            n_rec: recall(0),
            v_rec: recall(1),
            i_rec: recall(2),
            confusion: eval.confusion,
            recalls: eval.recalls,
            overall_accuracy: eval.overall_accuracy,
            cohens_kappa: kappa,
            intra_class_similarity: similarity.0,
            inter_class_similarity: similarity.1,
            similarity_source: source,
            ms_per_image: None,
        }
    }
}

/// Outputs of the deployed path on a set of samples.
pub struct ModelOutputs {
    pub features: Tensor<f32>,
    pub logits: Tensor<f32>,
    pub labels: Vec<usize>,
    pub ids: Vec<usize>,
}

pub fn model_outputs(model: &ModelBundle<f32>, data: &PreparedData<'_>, indices: &[usize]) -> Result<ModelOutputs> {
    let features = extract_features(model, data, indices)?;
    let k = model.config.num_classes;
    let w = model.params.get("cls.w").expect("classifier");
    let b = model.params.get("cls.b").expect("classifier");
    let d = features.shape()[1];
    let logits = Tensor::from_fn(vec![indices.len(), k], |i| {
        let (n, c) = (i / k, i % k);
        b.data()[c] + (0..d).map(|j| w.data()[c * d + j] * features.data()[n * d + j]).sum::<f32>()
    });
    Ok(ModelOutputs {
        features,
        logits,
        labels: data.labels(indices),
        ids: indices.iter().map(|&i| data.items[i].id).collect(),
    })
}

/// Full report of a trained model on `indices`.
pub fn evaluate_model(
    model: &ModelBundle<f32>,
    data: &PreparedData<'_>,
    indices: &[usize],
    source: SimilaritySource,
) -> Result<(MetricsReport, ModelOutputs)> {
    let out = model_outputs(model, data, indices)?;
    let k = model.config.num_classes;
    let preds: Vec<usize> = out.logits.data().chunks(k).map(argmax).collect();
    let eval = evaluate(&preds, &out.labels, k)?;
    let kappa = cohens_kappa(&eval.confusion)?;
    let sim = match source {
        SimilaritySource::Logits => similarity_stats(&out.logits, &out.labels)?,
        SimilaritySource::Features => similarity_stats(&out.features, &out.labels)?,
    };
    Ok((MetricsReport::from_parts(eval, kappa, sim, source), out))
}

/// Mean and sample standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}
