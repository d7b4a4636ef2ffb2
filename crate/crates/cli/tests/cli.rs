use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use maskdistill::tensor::Checkpoint;
use maskdistill_cli::commands::SampleRecord;
use maskdistill_cli::config::{flatten, ExperimentConfig, FlatConfig};
use proptest::prelude::*;
use serde_json::{json, Value};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_maskdistill"));
    c.env_remove("MASKDISTILL_OUTPUT_ROOT").env("RUST_LOG", "warn");
    c
}

fn base_config() -> Value {
    json!({
        "dataset.kind": "markov_chain",
        "dataset.vocab": 5,
        "dataset.seq_len": 3,
        "dataset.classes": 2,
        "dataset.seed": 4,
        "model.d_model": 8,
        "model.n_heads": 2,
        "model.n_blocks": 1,
        "teacher.iterations": 40,
        "teacher.batch_size": 16,
        "distill.iterations": 6,
        "distill.batch_size": 8,
        "distill.checkpoint_every": 2,
        "eval.samples_per_class": 50,
        "eval.n_init": 4,
        "eval.steps_grid": [1, 2],
        "eval.temperatures": [0.5, 1.0],
        "seed": 9,
        "output_dir": "run"
    })
}

struct Env {
    _tmp: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
}

fn setup(cfg: Value) -> Env {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().to_path_buf();
    let config = root.join("config.json");
    fs::write(&config, serde_json::to_vec_pretty(&cfg).unwrap()).unwrap();
    Env { _tmp: tmp, root, config }
}

fn run(env: &Env, args: &[&str]) -> Output {
    bin().current_dir(&env.root).args(args).arg("--config").arg(&env.config).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn read_jsonl(path: &Path) -> Vec<SampleRecord> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn missing_dataset_key_is_a_config_error() {
    let mut cfg = base_config();
    cfg.as_object_mut().unwrap().retain(|k, _| !k.starts_with("dataset."));
    let env = setup(cfg);
    let out = run(&env, &["train-teacher"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("dataset"), "{}", stderr(&out));
}

#[test]
fn unknown_key_is_a_config_error() {
    let mut cfg = base_config();
    cfg["distill.r_init"] = json!(0.5);
    let env = setup(cfg);
    let out = run(&env, &["train-teacher"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("r_init"), "{}", stderr(&out));
}

#[test]
fn grad_check_exits_zero_when_oracles_pass() {
    let out = bin().args(["grad-check", "--pairs", "20"]).output().unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("jeffrey(beta=-0.2)") && !text.contains("FAIL"), "{text}");
}

#[test]
fn full_pipeline_writes_artifacts() {
    let env = setup(base_config());
    let run_dir = env.root.join("out/run");
    let root_env = |mut c: Command| {
        c.env("MASKDISTILL_OUTPUT_ROOT", env.root.join("out"));
        c
    };
    let go = |args: &[&str]| {
        let mut c = root_env(bin());
        c.current_dir(&env.root).args(args).arg("--config").arg(&env.config);
        let o = c.output().unwrap();
        assert!(o.status.success(), "{args:?}: {}", stderr(&o));
        o
    };
    go(&["train-teacher"]);
    go(&["distill"]);
    for f in ["config.json", "version.json", "teacher/manifest.json", "teacher_metrics.csv", "student/manifest.json", "distill_metrics.csv"] {
        assert!(run_dir.join(f).exists(), "missing {f}");
    }
    let written: FlatConfig = serde_json::from_slice(&fs::read(run_dir.join("config.json")).unwrap()).unwrap();
    let parsed = ExperimentConfig::from_flat(&written).unwrap();
    assert_eq!(parsed.to_flat(), written);
    let version: Value = serde_json::from_slice(&fs::read(run_dir.join("version.json")).unwrap()).unwrap();
    assert_eq!(version["code_version"].as_str().unwrap().len(), 16);

    let header = fs::read_to_string(run_dir.join("distill_metrics.csv")).unwrap();
    assert!(header.starts_with("iter,surrogate_loss,aux_loss,w_t,t,L_M,entropy_estimate,wall_ms"));
    assert_eq!(header.lines().count(), 7);

    let student = run_dir.join("student");
    let teacher = run_dir.join("teacher");
    go(&["sample", "--checkpoint", student.to_str().unwrap(), "--steps", "1", "-n", "3", "-o", "s.jsonl"]);
    go(&["sample", "--checkpoint", teacher.to_str().unwrap(), "--steps", "16", "-n", "3", "--unconditional", "-o", "t.jsonl"]);
    let s = read_jsonl(&env.root.join("s.jsonl"));
    let t = read_jsonl(&env.root.join("t.jsonl"));
    assert_eq!(s.len(), 6);
    assert_eq!(t.len(), 9);
    assert!(s.iter().all(|r| r.steps == 1 && r.tokens.len() == 3 && r.tokens.iter().all(|&x| x < 5)));
    assert!(t.iter().all(|r| r.steps == 16 && r.tokens.len() == 3 && r.tokens.iter().all(|&x| x < 5)));
    assert_eq!(t.iter().filter(|r| r.cond.is_none()).count(), 3);
    let keys = |path: &str| -> Vec<String> {
        let line = fs::read_to_string(env.root.join(path)).unwrap();
        let v: Value = serde_json::from_str(line.lines().next().unwrap()).unwrap();
        v.as_object().unwrap().keys().cloned().collect()
    };
    assert_eq!(keys("s.jsonl"), keys("t.jsonl"));

    go(&["eval"]);
    for f in ["summary.json", "classes.csv", "temperature.csv", "support.csv", "steps.csv"] {
        assert!(run_dir.join("eval").join(f).exists(), "missing eval/{f}");
    }
}

#[test]
fn student_rejects_multistep_sampling() {
    let env = setup(base_config());
    assert!(run(&env, &["train-teacher"]).status.success());
    assert!(run(&env, &["distill"]).status.success());
    let student = env.root.join("run/student");
    let out = run(&env, &["sample", "--checkpoint", student.to_str().unwrap(), "--steps", "4", "-o", "x.jsonl"]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
}

#[test]
fn grid_runs_land_in_subdirectories_and_feed_the_ablation_table() {
    let env = setup(base_config());
    assert!(run(&env, &["train-teacher"]).status.success());
    let grid = ["--grid", "distill.init.r_init=[0, 0.6, 1]"];
    let out = run(&env, &[&["distill"][..], &grid].concat());
    assert!(out.status.success(), "{}", stderr(&out));
    for v in ["0", "0.6", "1"] {
        let dir = env.root.join(format!("run/distill.init.r_init={v}"));
        assert!(dir.join("student/manifest.json").exists(), "{v}");
        let flat: FlatConfig = serde_json::from_slice(&fs::read(dir.join("config.json")).unwrap()).unwrap();
        assert_eq!(flat["distill.init.r_init"].as_f64(), v.parse().ok());
    }
    let out = run(&env, &[&["eval"][..], &grid].concat());
    assert!(out.status.success(), "{}", stderr(&out));
    let mut rdr = csv::Reader::from_path(env.root.join("run/ablation.csv")).unwrap();
    let headers = rdr.headers().unwrap().clone();
    for col in ["axis", "value", "marginal_tv", "student_entropy"] {
        assert!(headers.iter().any(|h| h == col), "{col}");
    }
    let rows: Vec<_> = rdr.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 3);
    assert_eq!(&rows[1][2], "0.6");
    assert!(env.root.join("run/distill.init.r_init=0.6/eval/summary.json").exists());
}

#[test]
fn nan_abort_keeps_last_good_state() {
    let mut cfg = base_config();
    cfg["distill.generator_optimizer"] = json!({"lr": 1e306, "warmup": 0});
    cfg["distill.checkpoint_every"] = json!(1);
    let env = setup(cfg);
    assert!(run(&env, &["train-teacher"]).status.success());
    let out = run(&env, &["distill"]);
    assert_eq!(out.status.code(), Some(1), "{}", stderr(&out));
    assert!(stderr(&out).contains("non-finite"), "{}", stderr(&out));
    let state = Checkpoint::read(&env.root.join("run/distill_state")).unwrap();
    let iter = state.meta["iter"].as_u64().unwrap();
    assert!((1..6).contains(&iter));
    assert!(!env.root.join("run/student").exists());
    let metrics = fs::read_to_string(env.root.join("run/distill_metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count() as u64, iter + 1);
}

#[test]
fn schedule_mismatch_warns() {
    let env = setup(base_config());
    assert!(run(&env, &["train-teacher"]).status.success());
    let out = run(&env, &["distill", "--set", "schedule=arccos"]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stderr(&out).contains("schedule"), "{}", stderr(&out));
}

#[test]
fn incompatible_checkpoint_version_names_both_versions() {
    let env = setup(base_config());
    assert!(run(&env, &["train-teacher"]).status.success());
    let manifest = env.root.join("run/teacher/manifest.json");
    let mut m: Value = serde_json::from_slice(&fs::read(&manifest).unwrap()).unwrap();
    m["meta"]["artifact_version"] = json!(99);
    fs::write(&manifest, serde_json::to_vec(&m).unwrap()).unwrap();
    let out = run(&env, &["distill"]);
    assert_eq!(out.status.code(), Some(1));
    let e = stderr(&out);
    assert!(e.contains("99") && e.contains("version 1"), "{e}");
}

#[test]
fn set_overrides_config_keys() {
    let env = setup(base_config());
    let out = run(&env, &["train-teacher", "--set", "teacher.iterations=5", "--set", "output_dir=other"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let lines = fs::read_to_string(env.root.join("other/teacher_metrics.csv")).unwrap();
    assert_eq!(lines.lines().count(), 6);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn config_round_trips_through_flat_json(
        r_init in 0.0f64..=1.0,
        sigma in 0.0f64..=1.0,
        beta in -1.0f64..2.0,
        lr in 1e-6f64..1e-1,
        seed in any::<u64>(),
        steps in prop::collection::vec(1usize..32, 1..5),
    ) {
        let mut v = base_config();
        v["distill.init.r_init"] = json!(r_init);
        v["distill.init.sigma_init"] = json!(sigma);
        v["distill.divergence"] = json!({"kind": "jeffrey", "beta": beta});
        v["distill.generator_optimizer.lr"] = json!(lr);
        v["seed"] = json!(seed);
        v["eval.steps_grid"] = json!(steps);
        let cfg = ExperimentConfig::from_flat(&flatten(&v).unwrap()).unwrap();
        let text = serde_json::to_string(&cfg.to_flat()).unwrap();
        let back: FlatConfig = serde_json::from_str(&text).unwrap();
        let again = ExperimentConfig::from_flat(&back).unwrap();
        prop_assert_eq!(&again, &cfg);
        prop_assert_eq!(serde_json::to_string(&again.to_flat()).unwrap(), text);
    }
}
