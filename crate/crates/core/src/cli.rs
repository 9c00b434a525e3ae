//! `harnest` command-line surface.
//!
//! ```text
//! harnest prepare --recipe r.json [--raw-root DIR] --out data.harw
//! harnest train   --dataset data.harw [--train-config t.json] [--model-config m.json] --out run/
//! harnest eval    --dataset data.harw --variant proposed --out eval/
//! harnest ablate  --dataset data.harw --out ablate/
//! harnest sweep   --dataset data.harw [--lambdas 0.01,0.1,1] --out sweep/
//! harnest report  --input eval/ --input ablate/ --out combined/
//! ```
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or config error.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::datapipe::{load_recipe, read_container, write_container, DatasetName, DatasetRecipe, WindowedDataset};
use crate::error::Error;
use crate::eval::{
    emit_report, lambda_mmd_sweep, run_ablation_suite, run_loso, split_fold, EvalOptions, FoldReport, FoldSpec,
    DEFAULT_LAMBDA_GRID,
};
use crate::nets::{ModelConfig, Role};
use crate::trainer::{Outcome, TrainConfig, TrainData, TrainOptions, TrainState, Variant};

pub const DATA_ROOT_ENV: &str = "HARNEST_DATA_ROOT";
pub const RUN_MANIFEST: &str = "run_manifest.json";
pub const REPORTS_FILE: &str = "reports.json";
const LOCK_FILE: &str = ".harnest.lock";

#[derive(Debug, Parser)]
#[command(name = "harnest", version, about = "Subject-independent activity recognition toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Window a raw dataset (or generate a synthetic one) into a container file.
    Prepare(PrepareArgs),
    /// Train one variant on a prepared dataset.
    Train(TrainArgs),
    /// Leave-one-subject-out evaluation of one variant.
    Eval(EvalArgs),
    /// All five variants on identical folds.
    Ablate(EvalArgs),
    /// λ_mmd sensitivity sweep.
    Sweep(SweepArgs),
    /// Re-render report files from earlier eval/ablate/sweep outputs.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Args)]
pub struct PrepareArgs {
    #[arg(long)]
    pub recipe: PathBuf,
    /// Raw data root; not needed for synthetic recipes.
    #[arg(long, env = DATA_ROOT_ENV)]
    pub raw_root: Option<PathBuf>,
    /// Container file to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the synthetic generator seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Args)]
pub struct ExperimentArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub train_config: Option<PathBuf>,
    #[arg(long)]
    pub model_config: Option<PathBuf>,
    #[arg(long)]
    pub variant: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub exp: ExperimentArgs,
    /// Subject whose unlabeled windows serve as the target domain.
    #[arg(long)]
    pub target_subject: Option<i32>,
    /// Continue from the checkpoint in `--out`.
    #[arg(long)]
    pub resume: bool,
    #[arg(long, default_value_t = 0)]
    pub checkpoint_every: u64,
    /// Checkpoint and exit once this many iterations have run.
    #[arg(long)]
    pub stop_after: Option<u64>,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub exp: ExperimentArgs,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    #[arg(long, default_value_t = 2)]
    pub repeats: usize,
    #[arg(long)]
    pub no_plots: bool,
}

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub eval: EvalArgs,
    #[arg(long, value_delimiter = ',')]
    pub lambdas: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Args)]
pub struct ReportArgs {
    /// Output directories of earlier eval/ablate/sweep runs.
    #[arg(long, required = true)]
    pub input: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub no_plots: bool,
}

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = if matches!(e, Error::Config(_)) { 2 } else { 1 };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Written before a command starts work and rewritten when it ends.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_paths: BTreeMap<String, PathBuf>,
    pub dataset_recipe: Option<DatasetRecipe>,
    pub seed: Option<u64>,
    pub output: PathBuf,
    pub toolkit_version: String,
    pub started_at: String,
    pub finished_at: Option<String>,
    /// `running`, `completed`, `stopped` or `failed`.
    pub status: String,
    pub exit_code: Option<i32>,
    pub message: Option<String>,
}

impl RunManifest {
    fn write(&self, path: &Path) -> CliResult<()> {
        let bytes = serde_json::to_vec_pretty(self).map_err(Error::from)?;
        std::fs::write(path, bytes).map_err(|e| Error::Io { path: path.into(), source: e }.into())
    }
}

/// Sidecar written next to a container by `prepare`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub recipe: DatasetRecipe,
    pub windows: usize,
    pub n_c: usize,
    pub n_w: usize,
    pub n_a: usize,
    pub subjects: BTreeMap<i32, usize>,
}

pub fn meta_path(container: &Path) -> PathBuf {
    let mut name = container.as_os_str().to_owned();
    name.push(".meta.json");
    PathBuf::from(name)
}

/// Exclusive per-directory lock, released on drop.
#[derive(Debug)]
struct DirLock(PathBuf);

impl DirLock {
    fn acquire(dir: &Path) -> CliResult<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.into(), source: e })?;
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self(path))
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(CliError {
                code: 1,
                message: format!("{} is locked by another harnest process (remove {} if stale)", dir.display(), path.display()),
            }),
            Err(e) => Err(Error::Io { path, source: e }.into()),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.0);
    }
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339()
}

/// Locks `lock_dir`, records the run, executes `work`, and records its outcome.
fn tracked<T>(
    mut manifest: RunManifest,
    lock_dir: &Path,
    manifest_path: &Path,
    work: impl FnOnce() -> CliResult<(T, &'static str)>,
) -> CliResult<T> {
    let _lock = DirLock::acquire(lock_dir)?;
    manifest.write(manifest_path)?;
    let result = work();
    manifest.finished_at = Some(now());
    match &result {
        Ok((_, status)) => {
            manifest.status = status.to_string();
            manifest.exit_code = Some(0);
        }
        Err(e) => {
            manifest.status = "failed".into();
            manifest.exit_code = Some(e.code);
            manifest.message = Some(e.message.clone());
        }
    }
    manifest.write(manifest_path)?;
    result.map(|(v, _)| v)
}

fn new_manifest(command: &str, output: &Path, seed: Option<u64>) -> RunManifest {
    RunManifest {
        command: command.into(),
        config_paths: BTreeMap::new(),
        dataset_recipe: None,
        seed,
        output: output.into(),
        toolkit_version: env!("CARGO_PKG_VERSION").into(),
        started_at: now(),
        finished_at: None,
        status: "running".into(),
        exit_code: None,
        message: None,
    }
}

fn load_json<T: DeserializeOwned>(path: &Path, what: &str) -> CliResult<T> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::usage(format!("cannot read {what} {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::usage(format!("invalid {what} {}: {e}", path.display())))
}

/// Everything a training-type command needs, validated before any compute.
struct Experiment {
    dataset: WindowedDataset,
    meta: Option<DatasetMeta>,
    train: TrainConfig,
    model: ModelConfig,
    manifest: RunManifest,
}

fn load_experiment(command: &str, args: &ExperimentArgs) -> CliResult<Experiment> {
    if !args.dataset.is_file() {
        return Err(CliError::usage(format!("dataset not found: {}", args.dataset.display())));
    }
    let mpath = meta_path(&args.dataset);
    let meta: Option<DatasetMeta> = mpath.is_file().then(|| load_json(&mpath, "dataset metadata")).transpose()?;
    let mut train = match &args.train_config {
        Some(p) => load_json(p, "train config")?,
        None => TrainConfig::for_dataset(meta.as_ref().map_or(DatasetName::Synthetic, |m| m.recipe.name)),
    };
    if let Some(v) = &args.variant {
        train.variant = v.parse()?;
    }
    if let Some(seed) = args.seed {
        train.seed = seed;
    }
    train.validate()?;
    let model: ModelConfig = match &args.model_config {
        Some(p) => load_json(p, "model config")?,
        None => ModelConfig::new(0, 0, 0, 0),
    };
    let dataset = read_container(&args.dataset)?;
    // data-dependent sizes are filled in per run; check the architecture now
    model.resolved(&dataset, dataset.subject_ids.len() + 1).validate()?;

    let mut manifest = new_manifest(command, &args.out, Some(train.seed));
    manifest.config_paths.insert("dataset".into(), args.dataset.clone());
    if let Some(p) = &args.train_config {
        manifest.config_paths.insert("train_config".into(), p.clone());
    }
    if let Some(p) = &args.model_config {
        manifest.config_paths.insert("model_config".into(), p.clone());
    }
    manifest.dataset_recipe = meta.as_ref().map(|m| m.recipe.clone());
    Ok(Experiment {
        dataset,
        meta,
        train,
        model,
        manifest,
    })
}

pub fn cmd_prepare(args: &PrepareArgs) -> CliResult<DatasetMeta> {
    if !args.recipe.is_file() {
        return Err(CliError::usage(format!("recipe not found: {}", args.recipe.display())));
    }
    let mut recipe: DatasetRecipe = load_json(&args.recipe, "recipe")?;
    if let (Some(seed), Some(spec)) = (args.seed, recipe.synthetic.as_mut()) {
        spec.seed = seed;
    }
    recipe.validate()?;
    let lock_dir = match args.out.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let mut manifest = new_manifest("prepare", &args.out, args.seed);
    manifest.config_paths.insert("recipe".into(), args.recipe.clone());
    if let Some(root) = &args.raw_root {
        manifest.config_paths.insert("raw_root".into(), root.clone());
    }
    manifest.dataset_recipe = Some(recipe.clone());
    let mut run_path = args.out.as_os_str().to_owned();
    run_path.push(".run.json");
    tracked(manifest, &lock_dir, Path::new(&run_path), || {
        let ds = load_recipe(&recipe, args.raw_root.as_deref())?;
        write_container(&ds, &args.out)?;
        let meta = DatasetMeta {
            recipe: recipe.clone(),
            windows: ds.len(),
            n_c: ds.n_c,
            n_w: ds.n_w,
            n_a: ds.n_a,
            subjects: ds.subject_histogram(),
        };
        let mpath = meta_path(&args.out);
        std::fs::write(&mpath, serde_json::to_vec_pretty(&meta).map_err(Error::from)?)
            .map_err(|e| Error::Io { path: mpath, source: e })?;
        println!("n = {}  n_c = {}  n_w = {}  n_a = {}", meta.windows, meta.n_c, meta.n_w, meta.n_a);
        println!("subjects ({}):", meta.subjects.len());
        for (s, count) in &meta.subjects {
            println!("  {s:>4}  {count}");
        }
        Ok((meta, "completed"))
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub completed: bool,
    pub iteration: u64,
    pub variant: Variant,
    /// SHA-256 of each trained network.
    pub hashes: BTreeMap<Role, String>,
}

fn source_and_target(ds: &WindowedDataset, target_subjects: &[i32]) -> CliResult<(WindowedDataset, Option<WindowedDataset>)> {
    match target_subjects {
        [] => Ok((ds.clone(), None)),
        [t] => {
            if !ds.subject_ids.contains(t) {
                return Err(CliError::usage(format!("target subject {t} is not in the dataset")));
            }
            let fold = FoldSpec {
                test_subject: *t,
                train_subjects: ds.subject_ids.iter().copied().filter(|s| s != t).collect(),
                repeat: 0,
                repeats: 1,
            };
            let (source, target, _) = split_fold(ds, &fold)?;
            Ok((source, Some(target)))
        }
        many => Err(CliError::usage(format!("expected one target subject, found {many:?}"))),
    }
}

pub fn cmd_train(args: &TrainArgs) -> CliResult<TrainSummary> {
    let exp = load_experiment("train", &args.exp)?;
    let out = args.exp.out.clone();
    let mut manifest = exp.manifest;
    manifest.command = if args.resume { "train --resume" } else { "train" }.into();
    tracked(manifest, &out, &out.join(RUN_MANIFEST), || {
        let mut state = if args.resume {
            if args.exp.train_config.is_some() || args.exp.variant.is_some() || args.exp.seed.is_some() {
                log::warn!("resuming: configuration comes from the checkpoint, overrides are ignored");
            }
            TrainState::resume(&out)?
        } else {
            let targets: Vec<i32> = args.target_subject.into_iter().collect();
            let (source, target) = source_and_target(&exp.dataset, &targets)?;
            let data = TrainData {
                source: &source,
                target: target.as_ref(),
            };
            TrainState::new(&exp.train, &exp.model, data)?
        };
        let (source, target) = source_and_target(&exp.dataset, &state.target_subjects)?;
        let data = TrainData {
            source: &source,
            target: target.as_ref(),
        };
        let opts = TrainOptions {
            checkpoint_dir: Some(out.clone()),
            checkpoint_every: args.checkpoint_every,
            stop_after: args.stop_after,
            ..TrainOptions::default()
        };
        let outcome = state.train(data, &opts)?;
        let summary = TrainSummary {
            completed: outcome == Outcome::Completed,
            iteration: state.iteration,
            variant: state.variant(),
            hashes: state.networks().into_iter().map(|n| (n.role, n.hash())).collect(),
        };
        let status = if summary.completed { "completed" } else { "stopped" };
        println!("{} {status} at iteration {}", summary.variant, summary.iteration);
        if let Some(last) = state.history.last() {
            println!(
                "last losses: rec {:.6}  cls {:.6}  dom {:.6}  mmd {:.6}  objective {:.6}",
                last.rec, last.cls, last.dom, last.mmd, last.objective
            );
        }
        if state.diagnostics.downgraded {
            println!("note: no target subject given, ran as only_supervised");
        }
        Ok((summary, status))
    })
}

fn eval_options(args: &EvalArgs, meta: Option<&DatasetMeta>) -> EvalOptions {
    EvalOptions {
        repeats: args.repeats,
        jobs: args.jobs.max(1),
        acc_only: meta.is_some_and(|m| m.recipe.name == DatasetName::Mocapaci),
        ..EvalOptions::default()
    }
}

fn write_reports(reports: &[FoldReport], out: &Path, plots: bool) -> CliResult<()> {
    let path = out.join(REPORTS_FILE);
    std::fs::write(&path, serde_json::to_vec_pretty(reports).map_err(Error::from)?).map_err(|e| Error::Io { path, source: e })?;
    let files = emit_report(reports, out, plots)?;
    let table = std::fs::read_to_string(&files.summary_table).map_err(|e| Error::Io {
        path: files.summary_table.clone(),
        source: e,
    })?;
    print!("{table}");
    for r in reports {
        if let Some(f) = r.per_fold.iter().find(|f| f.error.is_some()) {
            log::warn!("{}: fold {} failed: {}", r.label, f.subject, f.error.as_deref().unwrap_or_default());
        }
    }
    Ok(())
}

fn run_reports(
    command: &str,
    args: &EvalArgs,
    run: impl FnOnce(&WindowedDataset, &TrainConfig, &ModelConfig, &EvalOptions) -> crate::Result<Vec<FoldReport>>,
) -> CliResult<Vec<FoldReport>> {
    let exp = load_experiment(command, &args.exp)?;
    if args.repeats == 0 {
        return Err(CliError::usage("--repeats must be at least 1"));
    }
    let opts = eval_options(args, exp.meta.as_ref());
    let out = args.exp.out.clone();
    tracked(exp.manifest, &out, &out.join(RUN_MANIFEST), || {
        let reports = run(&exp.dataset, &exp.train, &exp.model, &opts)?;
        write_reports(&reports, &out, !args.no_plots)?;
        if reports.iter().any(|r| r.per_fold.iter().any(|f| f.error.is_some())) {
            return Err(CliError {
                code: 1,
                message: "some folds failed; see per_fold.csv".into(),
            });
        }
        Ok((reports, "completed"))
    })
}

pub fn cmd_eval(args: &EvalArgs) -> CliResult<FoldReport> {
    let mut reports = run_reports("eval", args, |ds, cfg, model, opts| Ok(vec![run_loso(ds, cfg, model, opts)?]))?;
    Ok(reports.remove(0))
}

pub fn cmd_ablate(args: &EvalArgs) -> CliResult<Vec<FoldReport>> {
    if args.exp.variant.is_some() {
        return Err(CliError::usage("ablate runs every variant; drop --variant"));
    }
    run_reports("ablate", args, run_ablation_suite)
}

pub fn cmd_sweep(args: &SweepArgs) -> CliResult<Vec<FoldReport>> {
    let lambdas = args.lambdas.clone().unwrap_or_else(|| DEFAULT_LAMBDA_GRID.to_vec());
    if lambdas.is_empty() || lambdas.iter().any(|l| !(*l >= 0.0 && l.is_finite())) {
        return Err(CliError::usage(format!("λ_mmd values must be finite and non-negative, got {lambdas:?}")));
    }
    run_reports("sweep", &args.eval, |ds, cfg, model, opts| lambda_mmd_sweep(ds, cfg, model, &lambdas, opts))
}

pub fn cmd_report(args: &ReportArgs) -> CliResult<Vec<FoldReport>> {
    let mut reports = Vec::new();
    for dir in &args.input {
        let path = dir.join(REPORTS_FILE);
        if !path.is_file() {
            return Err(CliError::usage(format!("no {REPORTS_FILE} in {}", dir.display())));
        }
        reports.extend(load_json::<Vec<FoldReport>>(&path, "reports")?);
    }
    let mut manifest = new_manifest("report", &args.out, None);
    for (i, dir) in args.input.iter().enumerate() {
        manifest.config_paths.insert(format!("input{i}"), dir.clone());
    }
    tracked(manifest, &args.out, &args.out.join(RUN_MANIFEST), || {
        write_reports(&reports, &args.out, !args.no_plots)?;
        Ok((reports, "completed"))
    })
}

/// Parses `args` (including the program name) and runs the command; returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let result = match &cli.command {
        Command::Prepare(a) => cmd_prepare(a).map(drop),
        Command::Train(a) => cmd_train(a).map(drop),
        Command::Eval(a) => cmd_eval(a).map(drop),
        Command::Ablate(a) => cmd_ablate(a).map(drop),
        Command::Sweep(a) => cmd_sweep(a).map(drop),
        Command::Report(a) => cmd_report(a).map(drop),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.code
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_flags() {
        let cli = Cli::try_parse_from([
            "harnest", "sweep", "--dataset", "d.harw", "--out", "o", "--lambdas", "0.01,5", "--jobs", "3", "--no-plots",
        ])
        .unwrap();
        let Command::Sweep(a) = cli.command else { panic!() };
        assert_eq!(a.lambdas, Some(vec![0.01, 5.0]));
        assert_eq!(a.eval.jobs, 3);
        assert!(a.eval.no_plots);
        assert_eq!(a.eval.repeats, 2);
    }

    #[test]
    fn usage_errors_exit_2() {
        for args in [&["harnest", "train"][..], &["harnest", "frobnicate"]] {
            assert!(Cli::try_parse_from(args).unwrap_err().use_stderr());
        }
        assert_eq!(run(["harnest", "train", "--dataset", "/nonexistent/x.harw", "--out", "/tmp/never"]), 2);
    }

    #[test]
    fn config_error_maps_to_2() {
        assert_eq!(CliError::from(Error::Config("x".into())).code, 2);
        assert_eq!(CliError::from(Error::NonFinite("x".into())).code, 1);
    }

    #[test]
    fn lock_is_exclusive() {
        let dir = tempfile::tempdir().unwrap();
        let first = DirLock::acquire(dir.path()).unwrap();
        assert_eq!(DirLock::acquire(dir.path()).unwrap_err().code, 1);
        drop(first);
        assert!(DirLock::acquire(dir.path()).is_ok());
    }
}
