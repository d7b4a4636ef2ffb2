//! The subcommands, callable as library functions.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use maskdistill::diffusion::{sample_multistep, MaskSchedule};
use maskdistill::distill::{generate_onestep, DistillState, InitStrategy, IterationLog};
use maskdistill::eval::{diagnostics, DiagnosticsReport, SampleSource, SampleStats};
use maskdistill::gradcheck::{jeffrey_consistency, run_oracle_suite, OracleConfig, OracleResult};
use maskdistill::rng::streams;
use maskdistill::teacher::{SyntheticDataset, TeacherTrainer};
use maskdistill::tensor::Checkpoint;
use maskdistill::{Condition, ModelConfig, ModelParams, StreamRng};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};

/// Version stamped into every checkpoint this tool writes.
pub const ARTIFACT_VERSION: u64 = 1;
pub const CODE_VERSION: &str = env!("MASKDISTILL_CODE_VERSION");

/// File layout of one run directory.
#[derive(Clone, Debug)]
pub struct RunPaths {
    pub root: PathBuf,
}

impl RunPaths {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }
    pub fn config(&self) -> PathBuf {
        self.root.join("config.json")
    }
    pub fn version(&self) -> PathBuf {
        self.root.join("version.json")
    }
    pub fn teacher(&self) -> PathBuf {
        self.root.join("teacher")
    }
    pub fn teacher_metrics(&self) -> PathBuf {
        self.root.join("teacher_metrics.csv")
    }
    pub fn distill_state(&self) -> PathBuf {
        self.root.join("distill_state")
    }
    pub fn student(&self) -> PathBuf {
        self.root.join("student")
    }
    pub fn distill_metrics(&self) -> PathBuf {
        self.root.join("distill_metrics.csv")
    }
    pub fn eval(&self) -> PathBuf {
        self.root.join("eval")
    }
}

/// Writes the resolved config and the code version next to the artifacts.
pub fn write_run_metadata(out: &Path, cfg: &ExperimentConfig) -> CliResult<()> {
    fs::create_dir_all(out)?;
    let paths = RunPaths::new(out);
    fs::write(paths.config(), serde_json::to_vec_pretty(&cfg.to_flat())?)?;
    fs::write(
        paths.version(),
        serde_json::to_vec_pretty(&json!({
            "code_version": CODE_VERSION,
            "package_version": env!("CARGO_PKG_VERSION"),
            "artifact_version": ARTIFACT_VERSION,
        }))?,
    )?;
    Ok(())
}

fn wall_ms(cfg: &ExperimentConfig, start: Instant) -> u64 {
    if cfg.log.wall_clock {
        start.elapsed().as_millis() as u64
    } else {
        0
    }
}

fn progress(cfg: &ExperimentConfig, iter: u64) -> bool {
    cfg.log.every > 0 && iter.is_multiple_of(cfg.log.every)
}

/// A model checkpoint written by this tool.
pub struct LoadedModel {
    pub kind: String,
    pub params: ModelParams,
    pub meta: Value,
}

impl LoadedModel {
    pub fn schedule(&self) -> Option<MaskSchedule> {
        serde_json::from_value(self.meta.get("schedule")?.clone()).ok()
    }

    pub fn init(&self) -> Option<InitStrategy> {
        serde_json::from_value(self.meta.get("init")?.clone()).ok()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Weights {
    /// The exponential moving average of the trained weights.
    #[default]
    Ema,
    /// The weights as of the last optimizer step.
    Raw,
}

pub fn load_model(dir: &Path, weights: Weights) -> CliResult<LoadedModel> {
    let ck = Checkpoint::read(dir).map_err(|e| CliError::Runtime(format!("cannot read checkpoint {}: {e}", dir.display())))?;
    let meta = ck.meta.clone();
    let version = meta.get("artifact_version").and_then(Value::as_u64);
    if version != Some(ARTIFACT_VERSION) {
        return Err(CliError::Runtime(format!(
            "checkpoint {} has artifact version {}, this build reads version {ARTIFACT_VERSION}",
            dir.display(),
            version.map_or("none".to_string(), |v| v.to_string())
        )));
    }
    let kind = meta.get("kind").and_then(Value::as_str).unwrap_or_default().to_string();
    let model: ModelConfig = serde_json::from_value(meta.get("model").cloned().unwrap_or(Value::Null))
        .map_err(|e| CliError::Runtime(format!("checkpoint {} lacks a model config: {e}", dir.display())))?;
    let prefix = match (kind.as_str(), weights) {
        ("teacher", Weights::Ema) | ("student", Weights::Ema) => "ema",
        ("teacher", Weights::Raw) => "params",
        ("student", Weights::Raw) => "theta",
        _ => return Err(CliError::Runtime(format!("checkpoint {} is neither a teacher nor a student", dir.display()))),
    };
    let params = ModelParams::read_from(&ck, prefix, model)?;
    Ok(LoadedModel { kind, params, meta })
}

#[derive(Debug, Serialize)]
struct TeacherRow {
    iter: u64,
    loss: f64,
    masked: usize,
    null_conds: usize,
    lr: f64,
    wall_ms: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TeacherSummary {
    pub iterations: u64,
    pub final_loss: f64,
    pub checkpoint: PathBuf,
}

pub fn train_teacher(cfg: &ExperimentConfig, out: &Path) -> CliResult<TeacherSummary> {
    let dataset = cfg.dataset.build().map_err(|e| CliError::Config(format!("dataset: {e}")))?;
    let paths = RunPaths::new(out);
    write_run_metadata(out, cfg)?;
    let tcfg = cfg.teacher_config();
    let mut trainer = TeacherTrainer::new(&dataset, cfg.model_config(), tcfg.clone())?;
    let mut csv = csv::Writer::from_path(paths.teacher_metrics())?;
    let start = Instant::now();
    let mut last = f64::NAN;
    while trainer.iter < tcfg.iterations {
        let log = trainer.step()?;
        if !log.loss.is_finite() {
            return Err(CliError::Runtime(format!("non-finite teacher loss at iteration {}", log.iter)));
        }
        last = log.loss;
        csv.serialize(TeacherRow {
            iter: log.iter,
            loss: log.loss,
            masked: log.masked,
            null_conds: log.null_conds,
            lr: log.lr,
            wall_ms: wall_ms(cfg, start),
        })?;
        if progress(cfg, log.iter) {
            log::info!("teacher iter {} loss {:.4}", log.iter, log.loss);
        }
    }
    csv.flush()?;
    let mut ck = Checkpoint::new(json!({
        "kind": "teacher",
        "artifact_version": ARTIFACT_VERSION,
        "code_version": CODE_VERSION,
        "model": trainer.params.config(),
        "schedule": cfg.schedule,
        "dataset": cfg.dataset,
        "iterations": trainer.iter,
    }));
    trainer.params.write_into(&mut ck, "params");
    trainer.ema.write_into(&mut ck, "ema");
    ck.write(&paths.teacher())?;
    Ok(TeacherSummary {
        iterations: trainer.iter,
        final_loss: last,
        checkpoint: paths.teacher(),
    })
}

#[derive(Debug, Serialize)]
struct DistillRow {
    iter: u64,
    surrogate_loss: f64,
    aux_loss: f64,
    w_t: f64,
    t: f64,
    #[serde(rename = "L_M")]
    l_m: f64,
    entropy_estimate: f64,
    wall_ms: u64,
    skipped: usize,
}

impl DistillRow {
    fn new(log: &IterationLog, wall_ms: u64) -> Self {
        Self {
            iter: log.iter,
            surrogate_loss: log.surrogate_loss,
            aux_loss: log.aux_loss,
            w_t: log.w_t,
            t: log.t,
            l_m: log.l_m,
            entropy_estimate: log.entropy_estimate,
            wall_ms,
            skipped: log.skipped,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct DistillOptions {
    /// Teacher checkpoint; defaults to the run's own `teacher/`.
    pub teacher: Option<PathBuf>,
    /// Continue from the run's resumable state if one exists.
    pub resume: bool,
    /// Stop (with a resumable state) once this iteration is reached.
    pub stop_after: Option<u64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DistillSummary {
    pub iter: u64,
    pub finished: bool,
    pub resumed_from: Option<u64>,
    pub warnings: Vec<String>,
}

/// Replaces the resumable state so that a crash never leaves it half written.
fn write_state(state: &DistillState, dir: &Path) -> CliResult<()> {
    let fresh = dir.with_extension("new");
    let stale = dir.with_extension("old");
    if fresh.exists() {
        fs::remove_dir_all(&fresh)?;
    }
    let mut ck = state.save();
    if let Value::Object(meta) = &mut ck.meta {
        meta.insert("artifact_version".into(), json!(ARTIFACT_VERSION));
    }
    ck.write(&fresh)?;
    if dir.exists() {
        if stale.exists() {
            fs::remove_dir_all(&stale)?;
        }
        fs::rename(dir, &stale)?;
    }
    fs::rename(&fresh, dir)?;
    if stale.exists() {
        fs::remove_dir_all(&stale)?;
    }
    Ok(())
}

fn read_state(dir: &Path) -> CliResult<Option<Checkpoint>> {
    for candidate in [dir.to_path_buf(), dir.with_extension("old")] {
        if candidate.join(maskdistill::tensor::checkpoint::MANIFEST_FILE).exists() {
            let ck = Checkpoint::read(&candidate)?;
            let version = ck.meta.get("artifact_version").and_then(Value::as_u64);
            if version != Some(ARTIFACT_VERSION) {
                return Err(CliError::Runtime(format!(
                    "distill state {} has artifact version {version:?}, this build reads version {ARTIFACT_VERSION}",
                    candidate.display()
                )));
            }
            return Ok(Some(ck));
        }
    }
    Ok(None)
}

/// Keeps the metric rows up to `iter` and reopens the log for appending.
fn reopen_metrics(path: &Path, iter: u64) -> CliResult<csv::Writer<fs::File>> {
    let mut kept = Vec::new();
    if path.exists() {
        let mut reader = csv::Reader::from_path(path)?;
        kept.push(reader.headers()?.clone());
        for record in reader.records() {
            let record = record?;
            let n: u64 = record.get(0).and_then(|s| s.parse().ok()).unwrap_or(u64::MAX);
            if n <= iter {
                kept.push(record);
            }
        }
    }
    let file = fs::File::create(path)?;
    let mut builder = csv::WriterBuilder::new();
    if !kept.is_empty() {
        builder.has_headers(false);
    }
    let mut w = builder.from_writer(file);
    for r in &kept {
        w.write_record(r)?;
    }
    Ok(w)
}

fn params_finite(p: &ModelParams) -> bool {
    p.params().iter().all(|q| q.value.data().iter().all(|v| v.is_finite()))
}

pub fn distill(cfg: &ExperimentConfig, out: &Path, opts: &DistillOptions) -> CliResult<DistillSummary> {
    let paths = RunPaths::new(out);
    let teacher_dir = opts.teacher.clone().unwrap_or_else(|| paths.teacher());
    let teacher = load_model(&teacher_dir, Weights::Ema)?;
    if teacher.kind != "teacher" {
        return Err(CliError::Runtime(format!("{} is not a teacher checkpoint", teacher_dir.display())));
    }
    let expected = cfg.model_config();
    let found = teacher.params.config();
    if (found.vocab, found.seq_len, found.classes) != (expected.vocab, expected.seq_len, expected.classes) {
        return Err(CliError::Config(format!(
            "teacher dims (V={}, L={}, C={}) differ from the dataset's (V={}, L={}, C={})",
            found.vocab, found.seq_len, found.classes, expected.vocab, expected.seq_len, expected.classes
        )));
    }
    let mut warnings = cfg.warnings();
    if let Some(s) = teacher.schedule() {
        if s != cfg.schedule {
            warnings.push(format!(
                "teacher was trained with the {} schedule but distillation uses {}",
                s.name(),
                cfg.schedule.name()
            ));
        }
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    write_run_metadata(out, cfg)?;
    let dcfg = cfg.distill_config();

    let mut resumed_from = None;
    let mut state = match (opts.resume, read_state(&paths.distill_state())?) {
        (true, Some(ck)) => {
            let s = DistillState::restore(&teacher.params, dcfg.clone(), &ck)?;
            resumed_from = Some(s.iter);
            s
        }
        _ => DistillState::new(&teacher.params, dcfg.clone())?,
    };
    let mut csv = reopen_metrics(&paths.distill_metrics(), state.iter)?;
    let start = Instant::now();
    let every = cfg.distill.checkpoint_every;
    let stop = opts.stop_after.unwrap_or(dcfg.iterations).min(dcfg.iterations);
    while state.iter < stop {
        let log = state.step()?;
        let finite = [log.surrogate_loss, log.aux_loss, log.w_t, log.entropy_estimate]
            .iter()
            .all(|v| v.is_finite())
            && params_finite(&state.theta)
            && params_finite(&state.psi);
        if !finite {
            csv.flush()?;
            return Err(CliError::Runtime(format!(
                "non-finite values at distillation iteration {}; last good state kept in {}",
                log.iter,
                paths.distill_state().display()
            )));
        }
        csv.serialize(DistillRow::new(&log, wall_ms(cfg, start)))?;
        if progress(cfg, log.iter) {
            log::info!(
                "distill iter {} surrogate {:.4e} aux {:.4} entropy {:.4}",
                log.iter,
                log.surrogate_loss,
                log.aux_loss,
                log.entropy_estimate
            );
        }
        if every > 0 && state.iter % every == 0 && state.iter < stop {
            csv.flush()?;
            write_state(&state, &paths.distill_state())?;
        }
    }
    csv.flush()?;
    if !state.teacher_unchanged() {
        return Err(CliError::Runtime("teacher parameters changed during distillation".into()));
    }
    write_state(&state, &paths.distill_state())?;
    let finished = state.iter >= dcfg.iterations;
    if finished {
        let mut ck = Checkpoint::new(json!({
            "kind": "student",
            "artifact_version": ARTIFACT_VERSION,
            "code_version": CODE_VERSION,
            "model": state.theta.config(),
            "schedule": cfg.schedule,
            "init": dcfg.init,
            "divergence": dcfg.divergence,
            "iterations": state.iter,
            "teacher_digest": state.phi.digest(),
        }));
        state.theta.write_into(&mut ck, "theta");
        state.ema_theta.write_into(&mut ck, "ema");
        ck.write(&paths.student())?;
    }
    Ok(DistillSummary {
        iter: state.iter,
        finished,
        resumed_from,
        warnings,
    })
}

/// One line of a sample dump.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub cond: Option<usize>,
    pub tokens: Vec<usize>,
    pub seed: u64,
    pub steps: usize,
    pub temperature: f64,
}

#[derive(Clone, Debug)]
pub struct SampleOptions {
    pub checkpoint: PathBuf,
    pub weights: Weights,
    pub steps: usize,
    pub per_class: usize,
    /// Classes to sample; all classes when empty.
    pub classes: Vec<usize>,
    pub unconditional: bool,
    pub temperature: f64,
    pub seed: u64,
    pub output: PathBuf,
}

pub fn sample(cfg: &ExperimentConfig, opts: &SampleOptions) -> CliResult<usize> {
    if opts.steps == 0 || !(opts.temperature > 0.0) {
        return Err(CliError::Config("steps and temperature must be positive".into()));
    }
    let model = load_model(&opts.checkpoint, opts.weights)?;
    let n_classes = model.params.config().classes;
    let mut conds = Vec::new();
    let classes: Vec<usize> = if opts.classes.is_empty() { (0..n_classes).collect() } else { opts.classes.clone() };
    for &c in &classes {
        if c >= n_classes {
            return Err(CliError::Config(format!("class {c} out of range (model has {n_classes})")));
        }
        conds.extend(std::iter::repeat_n(Condition::Class(c), opts.per_class));
    }
    if opts.unconditional {
        conds.extend(std::iter::repeat_n(Condition::Null, opts.per_class));
    }
    let mut rng = StreamRng::new(opts.seed, streams::SAMPLE);
    let seqs = if model.kind == "student" {
        if opts.steps != 1 {
            return Err(CliError::Config(format!("a one-step student samples with --steps 1, not {}", opts.steps)));
        }
        let init = model
            .init()
            .ok_or_else(|| CliError::Runtime("student checkpoint lacks its init strategy".into()))?;
        generate_onestep(&model.params, &init, &conds, opts.temperature, &mut rng)?
    } else {
        let sampler = cfg.teacher_sampler(opts.steps, opts.temperature);
        sample_multistep(&model.params, &conds, &sampler, &mut rng)?
    };
    if let Some(parent) = opts.output.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut w = std::io::BufWriter::new(fs::File::create(&opts.output)?);
    for (cond, seq) in conds.iter().zip(&seqs) {
        let rec = SampleRecord {
            cond: match cond {
                Condition::Class(c) => Some(*c),
                Condition::Null => None,
            },
            tokens: seq.0.clone(),
            seed: opts.seed,
            steps: opts.steps,
            temperature: opts.temperature,
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(seqs.len())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepsRow {
    pub steps: usize,
    pub class: usize,
    pub data_marginal_tv: f64,
    pub sample_entropy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub marginal_tv: f64,
    pub joint_tv: Option<f64>,
    pub student_entropy: f64,
    pub teacher_entropy: f64,
    pub entropy_ratio: f64,
    pub student_support_count1: usize,
    pub teacher_support_count1: usize,
    pub report: DiagnosticsReport,
    pub teacher_steps: Vec<StepsRow>,
}

fn mean_joint_tv(report: &DiagnosticsReport) -> Option<f64> {
    let vals: Option<Vec<f64>> = report.classes.iter().map(|c| c.joint_tv).collect();
    vals.map(|v| v.iter().sum::<f64>() / v.len() as f64)
}

/// Teacher N-step samples against the data law, for each configured step count.
fn steps_table(cfg: &ExperimentConfig, teacher: &ModelParams, dataset: &SyntheticDataset) -> CliResult<Vec<StepsRow>> {
    let mut rows = Vec::new();
    let base = StreamRng::new(cfg.seed, streams::EVAL).fork(7);
    for (k, &steps) in cfg.eval.steps_grid.iter().enumerate() {
        let sampler = cfg.teacher_sampler(steps, cfg.eval.teacher_temperature);
        let source = SampleSource::MultiStep {
            denoiser: teacher,
            sampler: &sampler,
        };
        for c in 0..dataset.classes() {
            let mut rng = base.fork(100 * (k as u64 + 1) + c as u64);
            let s = source.samples(Condition::Class(c), cfg.eval.samples_per_class, None, &mut rng)?;
            let stats = SampleStats::from_samples(&s, dataset.vocab().size, dataset.seq_len())?;
            rows.push(StepsRow {
                steps,
                class: c,
                data_marginal_tv: stats.marginal_tv(&SampleStats::from_dataset(dataset, c))?,
                sample_entropy: stats.entropy(),
            });
        }
    }
    Ok(rows)
}

/// Compares the student's one-step law with the teacher's multi-step law
/// and writes `eval/summary.json` plus CSV tables.
pub fn evaluate(cfg: &ExperimentConfig, out: &Path, teacher_dir: &Path, student_dir: &Path) -> CliResult<EvalSummary> {
    let dataset = cfg.dataset.build().map_err(|e| CliError::Config(format!("dataset: {e}")))?;
    let teacher = load_model(teacher_dir, Weights::Ema)?;
    let student = load_model(student_dir, Weights::Ema)?;
    if student.kind != "student" || teacher.kind != "teacher" {
        return Err(CliError::Runtime("evaluation needs a student and a teacher checkpoint".into()));
    }
    let init = student
        .init()
        .ok_or_else(|| CliError::Runtime("student checkpoint lacks its init strategy".into()))?;
    let sampler = cfg.teacher_sampler(cfg.eval.teacher_steps, cfg.eval.teacher_temperature);
    let report = diagnostics(
        SampleSource::OneStep {
            generator: &student.params,
            init,
        },
        SampleSource::MultiStep {
            denoiser: &teacher.params,
            sampler: &sampler,
        },
        Some(&dataset),
        dataset.classes(),
        &cfg.diagnostics_config(),
    )?;
    let teacher_steps = steps_table(cfg, &teacher.params, &dataset)?;
    let summary = EvalSummary {
        marginal_tv: report.mean_marginal_tv(),
        joint_tv: mean_joint_tv(&report),
        student_entropy: report.mean_student_entropy(),
        teacher_entropy: report.mean_reference_entropy(),
        entropy_ratio: report.mean_student_entropy() / report.mean_reference_entropy(),
        student_support_count1: report.student_support.rows_with_count(1),
        teacher_support_count1: report.reference_support.rows_with_count(1),
        report,
        teacher_steps,
    };
    write_eval(&RunPaths::new(out).eval(), &summary)?;
    Ok(summary)
}

fn write_eval(dir: &Path, s: &EvalSummary) -> CliResult<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("summary.json"), serde_json::to_vec_pretty(s)?)?;
    let mut w = csv::Writer::from_path(dir.join("classes.csv"))?;
    for c in &s.report.classes {
        w.serialize(c)?;
    }
    w.flush()?;
    let mut w = csv::Writer::from_path(dir.join("temperature.csv"))?;
    for r in &s.report.temperature_sweep {
        w.serialize(r)?;
    }
    w.flush()?;
    let mut w = csv::Writer::from_path(dir.join("support.csv"))?;
    w.write_record(["count", "student_rows", "teacher_rows"])?;
    let (a, b) = (&s.report.student_support.histogram, &s.report.reference_support.histogram);
    for k in 0..a.len().max(b.len()) {
        let get = |h: &Vec<usize>| h.get(k).copied().unwrap_or(0).to_string();
        w.write_record([k.to_string(), get(a), get(b)])?;
    }
    w.flush()?;
    let mut w = csv::Writer::from_path(dir.join("steps.csv"))?;
    for r in &s.teacher_steps {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// One row of the ablation table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub run: String,
    pub axis: String,
    pub value: String,
    pub marginal_tv: f64,
    pub joint_tv: Option<f64>,
    pub student_entropy: f64,
    pub teacher_entropy: f64,
    pub entropy_ratio: f64,
    pub student_support_count1: usize,
    pub teacher_support_count1: usize,
}

pub fn write_ablation(path: &Path, rows: &[AblationRow]) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub oracles: Vec<OracleResult>,
    pub jeffrey_max_error: f64,
    pub passed: bool,
}

pub const JEFFREY_TOLERANCE: f64 = 1e-12;

pub fn grad_check(cfg: &OracleConfig) -> CliResult<GradCheckReport> {
    let oracles = run_oracle_suite(cfg)?;
    let mut jeffrey = 0.0f64;
    for &v in &cfg.vocabs {
        jeffrey = jeffrey.max(jeffrey_consistency(1000, v, &[-0.2, 0.0, 0.5, 1.0], cfg.seed)?);
    }
    let passed = oracles.iter().all(|o| o.passed) && jeffrey <= JEFFREY_TOLERANCE;
    Ok(GradCheckReport {
        oracles,
        jeffrey_max_error: jeffrey,
        passed,
    })
}
