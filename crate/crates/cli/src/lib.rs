//! Subcommand implementations behind the `dscl` binary.

use std::fs;
use std::path::{Path, PathBuf};

use dscl_core::data::{export_image_folder, generate_dataset, kfold_split, load_image_folder, Fold, LabeledImage};
use dscl_core::error::Error;
use dscl_core::metrics::{
    compare_inference_paths, evaluate_model, export_embeddings, mean_std, MetricsReport, ModelOutputs,
};
use dscl_core::nets::ModelBundle;
use dscl_core::trainer::{
    checkpoint_path, load_checkpoint, train_stage1, train_stage2, PreparedData, TRAIN_LOG,
};
use serde_json::json;
use sha2::{Digest, Sha256};

pub mod config;

pub use config::RunConfig;

pub const METRICS_FILE: &str = "metrics.json";
pub const EMBEDDINGS_FILE: &str = "embeddings.csv";
pub const RESOLVED_CONFIG: &str = "resolved_config.json";
pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] Error),
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl CliError {
    /// 2 config, 3 data, 4 numeric failure, 5 contract violation.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Core(e) => match e {
                Error::Parameter(_) | Error::Json(_) => 2,
                Error::NonFinite(_) | Error::DegenerateVector { .. } | Error::Diverged { .. } | Error::UndefinedKappa => 4,
                Error::ContractViolation(_)
                | Error::MissingCheckpoint(_)
                | Error::CorruptCheckpoint(_)
                | Error::ParamShape { .. } => 5,
                _ => 3,
            },
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Content hash of the binary version string, in git blob form.
pub fn version_hash() -> String {
    let version = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));
    let mut h = Sha256::new();
    h.update(format!("blob {}\0{version}", version.len()));
    format!("{:x}", h.finalize())
}

pub fn machine_descriptor() -> String {
    let cpus = std::thread::available_parallelism().map_or(1, |n| n.get());
    format!(
        "{}-{} cpus={cpus} {} {}",
        std::env::consts::ARCH,
        std::env::consts::OS,
        env!("CARGO_PKG_NAME"),
        env!("CARGO_PKG_VERSION")
    )
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn is_non_empty_dir(path: &Path) -> bool {
    fs::read_dir(path).map(|mut d| d.next().is_some()).unwrap_or(false)
}

/// Writes the synthetic dataset in image-folder layout plus a manifest.
pub fn cmd_generate(cfg: &RunConfig, out_dir: &Path, force: bool) -> CliResult<usize> {
    if is_non_empty_dir(out_dir) {
        if !force {
            return Err(CliError::Config(format!(
                "{} is not empty; pass --force to overwrite",
                out_dir.display()
            )));
        }
        fs::remove_dir_all(out_dir)?;
    }
    fs::create_dir_all(out_dir)?;
    let images = generate_dataset(&cfg.dataset)?;
    export_image_folder(&images, out_dir)?;
    let mut counts = [0usize; dscl_core::data::NUM_CLASSES];
    for it in &images {
        counts[it.label] += 1;
    }
    write_json(
        &out_dir.join(MANIFEST),
        &json!({
            "dataset": cfg.dataset,
            "seed": cfg.dataset.seed,
            "class_names": dscl_core::data::CLASS_NAMES,
            "class_counts": counts,
            "version_hash": version_hash(),
        }),
    )?;
    Ok(images.len())
}

pub fn load_data(cfg: &RunConfig) -> CliResult<Vec<LabeledImage>> {
    Ok(match &cfg.paths.data_dir {
        Some(dir) => load_image_folder(dir, cfg.dataset.resolution)?,
        None => generate_dataset(&cfg.dataset)?,
    })
}

fn folds(cfg: &RunConfig, data: &[LabeledImage]) -> CliResult<Vec<Fold>> {
    let labels: Vec<usize> = data.iter().map(|d| d.label).collect();
    Ok(kfold_split(&labels, cfg.eval.folds, cfg.eval.fold_seed)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    One,
    Two,
    Both,
}

fn write_outputs(dir: &Path, report: &MetricsReport, out: &ModelOutputs) -> CliResult<()> {
    write_json(&dir.join(METRICS_FILE), report)?;
    export_embeddings(&out.features, &out.labels, &out.ids, &dir.join(EMBEDDINGS_FILE))?;
    Ok(())
}

/// Trains one fold into `run_dir` and returns the held-out report when stage 2 ran.
pub fn cmd_train(cfg: &RunConfig, run_dir: &Path, stage: Stage) -> CliResult<Option<MetricsReport>> {
    fs::create_dir_all(run_dir)?;
    let data = load_data(cfg)?;
    let fold = folds(cfg, &data)?.swap_remove(cfg.eval.fold);
    run_fold(cfg, &data, &fold, run_dir, stage)
}

fn run_fold(
    cfg: &RunConfig,
    data: &[LabeledImage],
    fold: &Fold,
    run_dir: &Path,
    stage: Stage,
) -> CliResult<Option<MetricsReport>> {
    fs::create_dir_all(run_dir)?;
    write_json(
        &run_dir.join(RESOLVED_CONFIG),
        &json!({ "config": cfg, "seed": cfg.train.seed, "version_hash": version_hash() }),
    )?;
    let prepared = PreparedData::new(data, cfg.model.backbone.input_size)?;
    let mut model = match stage {
        Stage::Two => load_checkpoint(&checkpoint_path(run_dir, 1, "last"), &cfg.model)?,
        _ => {
            let log = run_dir.join(TRAIN_LOG);
            if log.exists() {
                fs::remove_file(log)?;
            }
            ModelBundle::init(cfg.model.clone(), cfg.train.seed)?
        }
    };
    if stage != Stage::Two {
        train_stage1(&mut model, &prepared, &fold.train, &cfg.train, Some(run_dir))?;
    }
    if stage == Stage::One {
        return Ok(None);
    }
    train_stage2(
        &mut model,
        &prepared,
        &fold.train,
        Some(&fold.test),
        &cfg.train,
        cfg.train.epochs_stage2,
        Some(run_dir),
    )?;
    let (report, out) = evaluate_model(&model, &prepared, &fold.test, cfg.eval.similarity_source)?;
    write_outputs(run_dir, &report, &out)?;
    Ok(Some(report))
}

/// Evaluates a checkpoint on the configured test fold.
pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path, out_dir: &Path) -> CliResult<MetricsReport> {
    let model = load_checkpoint(checkpoint, &cfg.model)?;
    let data = load_data(cfg)?;
    let fold = folds(cfg, &data)?.swap_remove(cfg.eval.fold);
    let prepared = PreparedData::new(&data, cfg.model.backbone.input_size)?;
    let (report, out) = evaluate_model(&model, &prepared, &fold.test, cfg.eval.similarity_source)?;
    fs::create_dir_all(out_dir)?;
    write_outputs(out_dir, &report, &out)?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Aggregate {
    pub folds: usize,
    pub overall_accuracy: Vec<f64>,
    pub oa_mean: f64,
    pub oa_std: f64,
    pub kappa_mean: f64,
    pub kappa_std: f64,
    pub intra_mean: f64,
    pub inter_mean: f64,
    /// `mean±std` of the overall accuracy in percent.
    pub summary: String,
}

pub fn aggregate(reports: &[MetricsReport]) -> Aggregate {
    let col = |f: fn(&MetricsReport) -> f64| reports.iter().map(f).collect::<Vec<_>>();
    let oa = col(|r| r.overall_accuracy);
    let (oa_mean, oa_std) = mean_std(&oa);
    let (kappa_mean, kappa_std) = mean_std(&col(|r| r.cohens_kappa));
    Aggregate {
        folds: reports.len(),
        summary: format!("{:.2}±{:.2}", 100.0 * oa_mean, 100.0 * oa_std),
        overall_accuracy: oa,
        oa_mean,
        oa_std,
        kappa_mean,
        kappa_std,
        intra_mean: mean_std(&col(|r| r.intra_class_similarity)).0,
        inter_mean: mean_std(&col(|r| r.inter_class_similarity)).0,
    }
}

/// Trains and evaluates every fold sequentially under `out_dir/fold_<i>`.
pub fn cmd_eval_kfold(cfg: &RunConfig, out_dir: &Path) -> CliResult<Aggregate> {
    let data = load_data(cfg)?;
    let mut reports = Vec::new();
    for (i, fold) in folds(cfg, &data)?.iter().enumerate() {
        let dir = out_dir.join(format!("fold_{i}"));
        let report = run_fold(cfg, &data, fold, &dir, Stage::Both)?.expect("stage 2 ran");
        reports.push(report);
    }
    let agg = aggregate(&reports);
    write_json(&out_dir.join("aggregate.json"), &agg)?;
    Ok(agg)
}

/// Times the deployed path and the bare extractor on the first images.
pub fn cmd_bench(cfg: &RunConfig, checkpoint: &Path) -> CliResult<serde_json::Value> {
    let model = load_checkpoint(checkpoint, &cfg.model)?;
    let data = load_data(cfg)?;
    let prepared = PreparedData::new(&data, cfg.model.backbone.input_size)?;
    let n = cfg.bench.batch.min(data.len());
    let images = prepared.low_batch(&(0..n).collect::<Vec<_>>())?;
    let (full, bare) = compare_inference_paths(&model, &images, cfg.bench.warmup, cfg.bench.reps)?;
    Ok(json!({
        "ms_per_image": full.ms_per_image,
        "extractor_ms_per_image": bare.ms_per_image,
        "warmup": full.warmup,
        "reps": full.reps,
        "batch": full.batch,
        "samples_ms": full.samples_ms,
        "sa_calls": full.sa_calls,
        "includes_preprocessing": false,
        "machine": machine_descriptor(),
        "version_hash": version_hash(),
    }))
}

/// Writes extractor features of every sample.
pub fn cmd_export_embeddings(cfg: &RunConfig, checkpoint: &Path, out: &Path) -> CliResult<usize> {
    let model = load_checkpoint(checkpoint, &cfg.model)?;
    let data = load_data(cfg)?;
    let prepared = PreparedData::new(&data, cfg.model.backbone.input_size)?;
    let all: Vec<usize> = (0..data.len()).collect();
    let features = dscl_core::trainer::extract_features(&model, &prepared, &all)?;
    let ids: Vec<usize> = data.iter().map(|d| d.id).collect();
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    export_embeddings(&features, &prepared.labels(&all), &ids, out)?;
    Ok(data.len())
}

pub fn default_checkpoint(cfg: &RunConfig) -> PathBuf {
    checkpoint_path(&cfg.paths.run_dir, 2, "last")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn aggregate_matches_hand_mean() {
        let base = MetricsReport {
            confusion: vec![],
            recalls: vec![],
            n_rec: 0.0,
            v_rec: 0.0,
            i_rec: 0.0,
            overall_accuracy: 0.0,
            cohens_kappa: 0.5,
            intra_class_similarity: 0.0,
            inter_class_similarity: 0.0,
            similarity_source: Default::default(),
            ms_per_image: None,
        };
        let oas = [0.91, 0.93, 0.925, 0.90, 0.94];
        let reports: Vec<_> = oas
            .iter()
            .map(|&o| MetricsReport { overall_accuracy: o, ..base.clone() })
            .collect();
        let agg = aggregate(&reports);
        let hand = (0.91 + 0.93 + 0.925 + 0.90 + 0.94) / 5.0;
        assert!((agg.oa_mean - hand).abs() < 1e-12);
        assert_eq!(agg.folds, 5);
        assert_eq!(agg.kappa_std, 0.0);
    }

    #[test]
    fn version_hash_is_stable_hex() {
        assert_eq!(version_hash(), version_hash());
        assert_eq!(version_hash().len(), 64);
    }
}
