use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use harnest::cli::{meta_path, DatasetMeta, RunManifest};
use harnest::datapipe::{DatasetName, DatasetRecipe, SynthSpec};
use harnest::nets::ModelConfig;
use harnest::trainer::{Budget, TrainConfig};
use tempfile::TempDir;

fn harnest(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_harnest"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

struct Fixture {
    dir: TempDir,
    dataset: PathBuf,
    train: PathBuf,
    model: PathBuf,
}

impl Fixture {
    fn new(subjects: usize) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let recipe = DatasetRecipe::synthetic(SynthSpec::new(subjects, 3, 2, 16, 3, 2));
        let recipe_path = dir.path().join("recipe.json");
        std::fs::write(&recipe_path, serde_json::to_vec(&recipe).unwrap()).unwrap();
        let dataset = dir.path().join("syn.harw");
        let o = harnest(&["prepare", "--recipe", s(&recipe_path), "--out", s(&dataset)]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        let cfg = TrainConfig {
            batch_size: 8,
            stage1: Budget::Iterations(3),
            stage2: Budget::Iterations(3),
            stage3: Budget::Iterations(3),
            ..TrainConfig::default()
        };
        let train = dir.path().join("train.json");
        std::fs::write(&train, serde_json::to_vec(&cfg).unwrap()).unwrap();
        let mut m = ModelConfig::new(0, 0, 0, 0).with_base_filters(2);
        m.hidden_units = 4;
        let model = dir.path().join("model.json");
        std::fs::write(&model, serde_json::to_vec(&m).unwrap()).unwrap();
        Self {
            dir,
            dataset,
            train,
            model,
        }
    }

    fn out(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn run(&self, command: &str, out: &Path, extra: &[&str]) -> Output {
        let mut args = vec![
            command,
            "--dataset",
            s(&self.dataset),
            "--train-config",
            s(&self.train),
            "--model-config",
            s(&self.model),
            "--out",
            s(out),
        ];
        args.extend_from_slice(extra);
        harnest(&args)
    }
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read(p: &Path) -> String {
    std::fs::read_to_string(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn prepare_prints_summary_and_sidecar() {
    let dir = tempfile::tempdir().unwrap();
    let recipe = DatasetRecipe::synthetic(SynthSpec::new(3, 4, 2, 16, 2, 1));
    let recipe_path = dir.path().join("r.json");
    std::fs::write(&recipe_path, serde_json::to_vec(&recipe).unwrap()).unwrap();
    let out = dir.path().join("d.harw");
    let o = harnest(&["prepare", "--recipe", s(&recipe_path), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    assert!(text.contains("n = 24  n_c = 2  n_w = 16  n_a = 4"), "{text}");
    assert!(text.contains("subjects (3)"));
    let meta: DatasetMeta = serde_json::from_str(&read(&meta_path(&out))).unwrap();
    assert_eq!(meta.subjects.values().sum::<usize>(), 24);
}

#[test]
fn prepare_needs_raw_root_for_real_datasets() {
    let dir = tempfile::tempdir().unwrap();
    let recipe_path = dir.path().join("r.json");
    std::fs::write(&recipe_path, serde_json::to_vec(&DatasetRecipe::pamap2()).unwrap()).unwrap();
    let out = dir.path().join("d.harw");
    let o = Command::new(env!("CARGO_BIN_EXE_harnest"))
        .args(["prepare", "--recipe", s(&recipe_path), "--out", s(&out)])
        .env_remove("HARNEST_DATA_ROOT")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    let o = Command::new(env!("CARGO_BIN_EXE_harnest"))
        .args(["prepare", "--recipe", s(&recipe_path), "--out", s(&out)])
        .env("HARNEST_DATA_ROOT", dir.path().join("nowhere"))
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
}

#[test]
fn missing_dataset_exits_2_with_path() {
    let f = Fixture::new(3);
    let o = harnest(&["train", "--dataset", "/no/such/data.harw", "--out", s(&f.out("t"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("/no/such/data.harw"));
}

#[test]
fn bad_variant_and_bad_config_exit_2() {
    let f = Fixture::new(3);
    let o = f.run("train", &f.out("t"), &["--variant", "bogus"]);
    assert_eq!(o.status.code(), Some(2));
    let bad = f.out("bad.json");
    std::fs::write(&bad, r#"{"batch_size": 0}"#).unwrap();
    let o = harnest(&["train", "--dataset", s(&f.dataset), "--train-config", s(&bad), "--out", s(&f.out("t2"))]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(!f.out("t2").join("manifest.json").exists(), "no compute before config validation");
}

#[test]
fn corrupt_container_is_a_checksum_error() {
    let f = Fixture::new(3);
    let mut bytes = std::fs::read(&f.dataset).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    std::fs::write(&f.dataset, bytes).unwrap();
    let o = f.run("train", &f.out("t"), &[]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("checksum"), "{}", stderr(&o));
}

#[test]
fn train_no_adv_writes_checkpoint_and_manifest() {
    let f = Fixture::new(3);
    let out = f.out("t");
    let o = f.run("train", &out, &["--variant", "no_adv"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("no_adv completed at iteration 6"));
    assert!(!out.join("D.params.bin").exists());
    let m: RunManifest = serde_json::from_str(&read(&out.join("run_manifest.json"))).unwrap();
    assert_eq!((m.status.as_str(), m.exit_code), ("completed", Some(0)));
    assert!(m.finished_at.is_some());
    assert_eq!(read(&out.join("loss_history.csv")).lines().count(), 1 + 6);
    assert!(!out.join(".harnest.lock").exists());
}

#[test]
fn resume_continues_iteration_counter_exactly() {
    let f = Fixture::new(3);
    let straight = f.out("straight");
    assert_eq!(f.run("train", &straight, &["--target-subject", "3"]).status.code(), Some(0));

    let split = f.out("split");
    let o = f.run("train", &split, &["--target-subject", "3", "--stop-after", "4"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("stopped at iteration 4"));
    let m: RunManifest = serde_json::from_str(&read(&split.join("run_manifest.json"))).unwrap();
    assert_eq!(m.status, "stopped");
    let o = f.run("train", &split, &["--resume"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("proposed completed at iteration 9"));
    for file in ["Q.params.bin", "P.params.bin", "C.params.bin", "D.params.bin", "loss_history.csv"] {
        assert_eq!(std::fs::read(straight.join(file)).unwrap(), std::fs::read(split.join(file)).unwrap(), "{file}");
    }
}

#[test]
fn lock_file_blocks_a_second_process() {
    let f = Fixture::new(3);
    let out = f.out("t");
    std::fs::create_dir_all(&out).unwrap();
    std::fs::write(out.join(".harnest.lock"), "1").unwrap();
    let o = f.run("train", &out, &[]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("locked"));
}

#[test]
fn eval_is_rerunnable_and_job_count_independent() {
    let f = Fixture::new(3);
    let (a, b) = (f.out("a"), f.out("b"));
    let o = f.run("eval", &a, &["--repeats", "1", "--no-plots"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("| proposed |"));
    assert_eq!(f.run("eval", &b, &["--repeats", "1", "--no-plots", "--jobs", "2"]).status.code(), Some(0));
    assert_eq!(read(&a.join("per_fold.csv")), read(&b.join("per_fold.csv")));
    assert_eq!(read(&a.join("per_fold.csv")).lines().count(), 1 + 3);
    assert!(!a.join("box_acc.svg").exists());
}

#[test]
fn eval_on_mocapaci_suppresses_f_columns() {
    let f = Fixture::new(3);
    let meta_file = meta_path(&f.dataset);
    let mut meta: DatasetMeta = serde_json::from_str(&read(&meta_file)).unwrap();
    meta.recipe.name = DatasetName::Mocapaci;
    std::fs::write(&meta_file, serde_json::to_vec(&meta).unwrap()).unwrap();
    let out = f.out("e");
    let o = f.run("eval", &out, &["--repeats", "1"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = read(&out.join("per_fold.csv"));
    assert!(csv.starts_with("subject,repeat,variant,acc,label"), "{csv}");
    assert!(!csv.contains("f_macro"));
    assert!(out.join("box_acc.svg").exists());
    assert!(!out.join("box_f_macro.svg").exists());
}

#[test]
fn ablate_emits_five_variants_and_report_recombines() {
    let f = Fixture::new(3);
    let out = f.out("ab");
    let o = f.run("ablate", &out, &["--repeats", "1", "--no-plots"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let summary: serde_json::Value = serde_json::from_str(&read(&out.join("summary.json"))).unwrap();
    let labels: Vec<&String> = summary.as_object().unwrap().keys().collect();
    assert_eq!(labels, ["no_adv", "no_mmd", "one_stage", "only_supervised", "proposed"]);
    assert_eq!(f.run("ablate", &f.out("ab2"), &["--variant", "proposed"]).status.code(), Some(2));

    let combined = f.out("combined");
    let o = harnest(&["report", "--input", s(&out), "--out", s(&combined)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(read(&combined.join("per_fold.csv")), read(&out.join("per_fold.csv")));
    assert!(combined.join("box_f_weighted.svg").exists());
}

#[test]
fn sweep_default_grid_spans_001_to_5() {
    let f = Fixture::new(3);
    let out = f.out("sw");
    let o = f.run("sweep", &out, &["--repeats", "1", "--no-plots", "--variant", "no_mmd"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let summary: serde_json::Value = serde_json::from_str(&read(&out.join("summary.json"))).unwrap();
    let map = summary.as_object().unwrap();
    assert_eq!(map.len(), 6);
    assert!(map.contains_key("lambda_mmd=0.01") && map.contains_key("lambda_mmd=5"));
    let o = f.run("sweep", &f.out("sw2"), &["--lambdas", "0.5,-1"]);
    assert_eq!(o.status.code(), Some(2));
}
