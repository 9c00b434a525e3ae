//! Leave-one-subject-out evaluation, ablations, the λ_mmd sweep and reports.

mod metrics;
mod report;

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datapipe::WindowedDataset;
use crate::error::{Error, Result};
use crate::kernels::{median_heuristic_bank, multi_domain_mmd, EmbeddingBatch, DEFAULT_BANDWIDTH_FACTORS};
use crate::losses::{domain_loss, Reduction};
use crate::nets::{argmax_rows, build_discriminator, windows_to_act, Mode, ModelConfig, NetworkHandle};
use crate::trainer::{
    adam_step, derive_seed, embed, embed_features, predict, run_variant, AdamParams, AdamState, TrainConfig, TrainData,
    TrainOptions, Variant,
};

pub use metrics::{format_mean_std, metrics, metrics_with, quantiles, MacroAverage, Metrics, Quantiles};
pub use report::{emit_report, render_box_plot_svg, ReportFiles, SummaryEntry};

pub const DEFAULT_LAMBDA_GRID: [f64; 6] = [0.01, 0.05, 0.1, 0.5, 1.0, 5.0];

/// One training/evaluation run of the LOSO protocol.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSpec {
    pub test_subject: i32,
    pub train_subjects: Vec<i32>,
    pub repeat: usize,
    pub repeats: usize,
}

impl FoldSpec {
    /// Seed of this run; depends only on the base seed, subject and repeat,
    /// so every variant sees the same randomness per fold.
    pub fn seed(&self, base: u64) -> u64 {
        derive_seed(derive_seed(base, self.test_subject as u32 as u64 + 1), self.repeat as u64 + 1)
    }
}

/// One fold per subject and repeat, subject-major.
pub fn loso_folds(ds: &WindowedDataset, repeats: usize) -> Result<Vec<FoldSpec>> {
    if ds.subject_ids.len() < 2 {
        return Err(Error::Invalid(format!(
            "leave-one-subject-out needs at least 2 subjects, found {}",
            ds.subject_ids.len()
        )));
    }
    if repeats == 0 {
        return Err(Error::Config("repeats must be at least 1".into()));
    }
    Ok(ds
        .subject_ids
        .iter()
        .flat_map(|&test| {
            let train: Vec<i32> = ds.subject_ids.iter().copied().filter(|&s| s != test).collect();
            (0..repeats).map(move |repeat| FoldSpec {
                test_subject: test,
                train_subjects: train.clone(),
                repeat,
                repeats,
            })
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub subject: i32,
    pub repeat: usize,
    pub variant: String,
    pub acc: f64,
    pub f_weighted: f64,
    pub f_macro: f64,
    /// SHA-256 of the fold's test window indices.
    pub test_index_hash: String,
    /// Present when training or evaluation of this fold failed.
    #[serde(default)]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    /// Report label: the variant name, or e.g. `lambda_mmd=0.1` in sweeps.
    pub label: String,
    pub variant: Variant,
    pub per_fold: Vec<FoldResult>,
    /// Metric name → mean and (population) std over successful folds × repeats.
    pub aggregate: BTreeMap<String, MeanStd>,
    /// Only accuracy is meaningful (F columns suppressed in outputs).
    pub acc_only: bool,
    pub incomplete: bool,
    pub leakage_checks: usize,
    pub config: serde_json::Value,
}

pub const METRIC_NAMES: [&str; 3] = ["acc", "f_weighted", "f_macro"];

impl FoldResult {
    pub fn metric(&self, name: &str) -> f64 {
        match name {
            "acc" => self.acc,
            "f_weighted" => self.f_weighted,
            "f_macro" => self.f_macro,
            other => panic!("unknown metric {other}"),
        }
    }
}

impl FoldReport {
    pub fn metric_names(&self) -> &'static [&'static str] {
        if self.acc_only {
            &METRIC_NAMES[..1]
        } else {
            &METRIC_NAMES
        }
    }

    pub fn values(&self, metric: &str) -> Vec<f64> {
        self.per_fold.iter().filter(|f| f.error.is_none()).map(|f| f.metric(metric)).collect()
    }

    fn recompute_aggregate(&mut self) {
        self.aggregate = self
            .metric_names()
            .iter()
            .map(|&m| (m.to_string(), mean_std(&self.values(m))))
            .collect();
        self.incomplete = self.per_fold.iter().any(|f| f.error.is_some());
    }
}

pub fn mean_std(values: &[f64]) -> MeanStd {
    if values.is_empty() {
        return MeanStd { mean: f64::NAN, std: f64::NAN };
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    MeanStd { mean, std: var.sqrt() }
}

#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub repeats: usize,
    /// Worker threads for independent folds (1 = sequential).
    pub jobs: usize,
    pub acc_only: bool,
    pub macro_average: MacroAverage,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            repeats: 2,
            jobs: 1,
            acc_only: false,
            macro_average: MacroAverage::AllClasses,
        }
    }
}

fn index_hash(indices: &[usize]) -> String {
    let mut h = Sha256::new();
    for i in indices {
        h.update((*i as u64).to_le_bytes());
    }
    hex::encode(h.finalize())
}

/// Splits `ds` for `fold`: labeled source windows and the held-out windows.
/// Returns the source set, the label-free target copy, and the test indices.
pub fn split_fold(ds: &WindowedDataset, fold: &FoldSpec) -> Result<(WindowedDataset, WindowedDataset, Vec<usize>)> {
    let test_idx = ds.indices_of_subject(fold.test_subject);
    let train_idx: Vec<usize> = (0..ds.len()).filter(|&i| fold.train_subjects.contains(&ds.s[i])).collect();
    let source = ds.subset(&train_idx);
    if source.subject_ids.contains(&fold.test_subject) {
        return Err(Error::Invalid(format!("test subject {} leaked into the labeled set", fold.test_subject)));
    }
    let mut target = ds.subset(&test_idx);
    // the trainer never reads target labels; blank them regardless
    target.y.iter_mut().for_each(|y| *y = 0);
    Ok((source, target, test_idx))
}

fn run_fold(
    ds: &WindowedDataset,
    fold: &FoldSpec,
    cfg: &TrainConfig,
    model: &ModelConfig,
    opts: &EvalOptions,
) -> FoldResult {
    let test_idx = ds.indices_of_subject(fold.test_subject);
    let mut result = FoldResult {
        subject: fold.test_subject,
        repeat: fold.repeat,
        variant: cfg.variant.as_str().to_string(),
        acc: f64::NAN,
        f_weighted: f64::NAN,
        f_macro: f64::NAN,
        test_index_hash: index_hash(&test_idx),
        error: None,
    };
    let (source, target, test_idx) = match split_fold(ds, fold) {
        Ok(v) => v,
        Err(e) => {
            result.error = Some(e.to_string());
            return result;
        }
    };
    let run_cfg = TrainConfig {
        seed: fold.seed(cfg.seed),
        ..cfg.clone()
    };
    let outcome = run_variant(
        &run_cfg,
        model,
        TrainData {
            source: &source,
            target: Some(&target),
        },
        &TrainOptions::default(),
    )
    .and_then(|state| {
        let test = ds.subset(&test_idx);
        let pred = state.predict(&test)?;
        metrics_with(&pred, &test.y, ds.n_a, opts.macro_average)
    });
    match outcome {
        Ok(m) => {
            result.acc = m.acc;
            result.f_weighted = m.f_weighted;
            result.f_macro = m.f_macro;
        }
        Err(e) => {
            log::error!("fold subject {} repeat {} failed: {e}", fold.test_subject, fold.repeat);
            result.error = Some(e.to_string());
        }
    }
    result
}

fn config_snapshot(cfg: &TrainConfig, model: &ModelConfig) -> serde_json::Value {
    serde_json::json!({
        "train": cfg,
        "model": model,
        "discriminator": cfg.variant.has_discriminator(),
        "aggregation": "mean ± population std pooled over all folds × repeats",
    })
}

/// Trains and scores every LOSO fold for `cfg.variant`.
pub fn run_loso(ds: &WindowedDataset, cfg: &TrainConfig, model: &ModelConfig, opts: &EvalOptions) -> Result<FoldReport> {
    run_loso_labeled(ds, cfg, model, opts, cfg.variant.as_str().to_string())
}

fn run_loso_labeled(
    ds: &WindowedDataset,
    cfg: &TrainConfig,
    model: &ModelConfig,
    opts: &EvalOptions,
    label: String,
) -> Result<FoldReport> {
    cfg.validate()?;
    let folds = loso_folds(ds, opts.repeats)?;
    // leakage is checked before any training starts
    for fold in &folds {
        split_fold(ds, fold)?;
    }
    let work = |fold: &FoldSpec| run_fold(ds, fold, cfg, model, opts);
    let per_fold: Vec<FoldResult> = if opts.jobs > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(opts.jobs)
            .build()
            .map_err(|e| Error::Invalid(format!("thread pool: {e}")))?;
        pool.install(|| folds.par_iter().map(work).collect())
    } else {
        folds.iter().map(work).collect()
    };
    let mut report = FoldReport {
        label,
        variant: cfg.variant,
        per_fold,
        aggregate: BTreeMap::new(),
        acc_only: opts.acc_only,
        incomplete: false,
        leakage_checks: folds.len(),
        config: config_snapshot(cfg, model),
    };
    report.recompute_aggregate();
    Ok(report)
}

/// The five variants on identical folds and seeds.
pub fn run_ablation_suite(
    ds: &WindowedDataset,
    base: &TrainConfig,
    model: &ModelConfig,
    opts: &EvalOptions,
) -> Result<Vec<FoldReport>> {
    Variant::ALL
        .iter()
        .map(|&variant| run_loso(ds, &TrainConfig { variant, ..base.clone() }, model, opts))
        .collect()
}

/// One report per `λ_mmd` value, everything else fixed.
pub fn lambda_mmd_sweep(
    ds: &WindowedDataset,
    base: &TrainConfig,
    model: &ModelConfig,
    values: &[f64],
    opts: &EvalOptions,
) -> Result<Vec<FoldReport>> {
    values
        .iter()
        .map(|&lambda| {
            let mut cfg = base.clone();
            cfg.weights.lambda_mmd = lambda;
            run_loso_labeled(ds, &cfg, model, opts, format!("lambda_mmd={lambda}"))
        })
        .collect()
}

/// Multi-domain MMD between the per-subject pooled embeddings of `ds`,
/// using a median-heuristic bank fitted to those embeddings.
pub fn embedding_mmd(q: &NetworkHandle, ds: &WindowedDataset) -> Result<f64> {
    let pooled = embed(q, ds)?;
    let dim = q.config.latent();
    let all = EmbeddingBatch::new(pooled.clone(), dim, -1)?;
    let bank = median_heuristic_bank(&all, &DEFAULT_BANDWIDTH_FACTORS)?;
    let batches = ds
        .subject_ids
        .iter()
        .map(|&s| {
            let rows: Vec<f64> = ds
                .indices_of_subject(s)
                .iter()
                .flat_map(|&i| pooled[i * dim..(i + 1) * dim].to_vec())
                .collect();
            EmbeddingBatch::new(rows, dim, s)
        })
        .collect::<Result<Vec<_>>>()?;
    multi_domain_mmd(&batches, &bank)
}

/// Trains a fresh discriminator to identify subjects from frozen Q features
/// of `train`, and returns its subject accuracy on `test`.
pub fn probe_subject_accuracy(
    q: &NetworkHandle,
    train: &WindowedDataset,
    test: &WindowedDataset,
    iterations: usize,
    seed: u64,
) -> Result<f64> {
    let subjects: Vec<i32> = train.subject_ids.clone();
    let class_of = |s: i32| subjects.binary_search(&s).map_err(|_| Error::Invalid(format!("probe: unseen subject {s}")));
    let mut cfg = q.config.clone();
    cfg.n_subjects_out = subjects.len();
    cfg.init_seed = seed;
    let mut d = build_discriminator(&cfg)?;
    let mut st = AdamState::for_network(&d);
    let hp = AdamParams {
        lr: 1e-3,
        beta1: 0.9,
        beta2: 0.99,
        eps: 1e-8,
    };
    let features = embed_features(q, train)?;
    let labels: Vec<usize> = train.s.iter().map(|&s| class_of(s)).collect::<Result<_>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..iterations {
        d.zero_grad();
        let logits = d.forward(features.clone(), Mode::Train, &mut rng)?;
        let (_, g) = domain_loss(&logits, &labels, Reduction::Mean)?;
        d.backward(g);
        adam_step(&mut d, &mut st, &hp)?;
    }
    let test_features = embed_features(q, test)?;
    let pred = argmax_rows(&d.infer(&test_features)?);
    let truth: Vec<usize> = test.s.iter().map(|&s| class_of(s)).collect::<Result<_>>()?;
    Ok(pred.iter().zip(&truth).filter(|(a, b)| a == b).count() as f64 / truth.len() as f64)
}

/// Predicted activities of `ds` (helper for callers holding loaded networks).
pub fn predict_dataset(q: &NetworkHandle, c: &NetworkHandle, ds: &WindowedDataset) -> Result<Vec<usize>> {
    predict(q, c, ds)
}

/// Network input for a subset of windows (exposed for probes and tests).
pub fn batch_input(ds: &WindowedDataset, indices: &[usize], n_w_model: usize) -> Result<crate::nets::Act> {
    windows_to_act(ds, indices, n_w_model)
}
