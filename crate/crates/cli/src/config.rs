//! Experiment configuration. On disk a config is one flat JSON object whose
//! keys are dotted paths (`distill.init.r_init`); it is expanded into the
//! nested [`ExperimentConfig`] before validation.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use maskdistill::diffusion::{MaskSchedule, SamplerConfig, SamplerMode};
use maskdistill::distill::{DistillConfig, InitStrategy, LossWeight};
use maskdistill::divergence::DivergenceSpec;
use maskdistill::eval::DiagnosticsConfig;
use maskdistill::model::{Guidance, ModelConfig};
use maskdistill::optim::AdamConfig;
use maskdistill::teacher::{DatasetSpec, TeacherTrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{CliError, CliResult};

pub const OUTPUT_ROOT_ENV: &str = "MASKDISTILL_OUTPUT_ROOT";

pub type FlatConfig = BTreeMap<String, Value>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub model: ModelSection,
    /// Shared by teacher training, distillation and teacher sampling.
    #[serde(default)]
    pub schedule: MaskSchedule,
    #[serde(default)]
    pub teacher: TeacherSection,
    #[serde(default)]
    pub distill: DistillSection,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub log: LogSection,
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: String,
}

fn default_output_dir() -> String {
    "runs/default".into()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub d_model: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    pub mlp_ratio: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::new(2, 1, 1);
        Self {
            d_model: m.d_model,
            n_blocks: m.n_blocks,
            n_heads: m.n_heads,
            mlp_ratio: m.mlp_ratio,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherSection {
    pub iterations: u64,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    pub cond_dropout: f64,
    pub ema_rate: f64,
}

impl Default for TeacherSection {
    fn default() -> Self {
        Self {
            iterations: 2000,
            batch_size: 64,
            optimizer: AdamConfig {
                warmup: 100,
                clip_norm: Some(1.0),
                ..AdamConfig::with_lr(3e-3)
            },
            cond_dropout: 0.1,
            ema_rate: 0.999,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillSection {
    pub init: InitStrategy,
    pub divergence: DivergenceSpec,
    pub weight: LossWeight,
    pub cfg_scale: f64,
    pub iterations: u64,
    pub batch_size: usize,
    pub generator_optimizer: AdamConfig,
    pub aux_optimizer: AdamConfig,
    pub ema_rate: f64,
    pub aux_updates: usize,
    /// Write a resumable state every this many iterations; 0 writes only at the end.
    pub checkpoint_every: u64,
}

impl Default for DistillSection {
    fn default() -> Self {
        Self {
            init: InitStrategy {
                r_init: 0.6,
                ..InitStrategy::all_masked()
            },
            divergence: DivergenceSpec::Rkl,
            weight: LossWeight::default(),
            cfg_scale: 2.0,
            iterations: 2000,
            batch_size: 32,
            generator_optimizer: AdamConfig {
                warmup: 100,
                clip_norm: Some(1.0),
                ..AdamConfig::with_lr(1e-3)
            },
            aux_optimizer: AdamConfig {
                warmup: 100,
                clip_norm: Some(1.0),
                ..AdamConfig::with_lr(2e-3)
            },
            ema_rate: 0.99,
            aux_updates: 2,
            checkpoint_every: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Reverse steps of the teacher reference.
    pub teacher_steps: usize,
    pub sampler_mode: SamplerMode,
    pub teacher_cfg_scale: f64,
    pub teacher_temperature: f64,
    /// Teacher step counts reported against the data law.
    pub steps_grid: Vec<usize>,
    /// Student temperatures of the sweep.
    pub temperatures: Vec<f64>,
    pub samples_per_class: usize,
    pub support_threshold: f64,
    pub n_init: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            teacher_steps: 8,
            sampler_mode: SamplerMode::Stochastic,
            teacher_cfg_scale: 1.0,
            teacher_temperature: 1.0,
            steps_grid: vec![1, 2, 4, 8],
            temperatures: vec![0.5, 1.0, 1.5],
            samples_per_class: 2000,
            support_threshold: 1e-3,
            n_init: 64,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LogSection {
    /// Record elapsed milliseconds in the metrics logs. Off by default so logs stay reproducible.
    pub wall_clock: bool,
    /// Progress line on stderr every this many iterations; 0 silences it.
    pub every: u64,
}

impl ExperimentConfig {
    pub fn model_config(&self) -> ModelConfig {
        let (vocab, seq_len, classes) = self.dataset.dims();
        ModelConfig {
            vocab,
            seq_len,
            classes,
            d_model: self.model.d_model,
            n_blocks: self.model.n_blocks,
            n_heads: self.model.n_heads,
            mlp_ratio: self.model.mlp_ratio,
        }
    }

    pub fn teacher_config(&self) -> TeacherTrainConfig {
        let t = &self.teacher;
        TeacherTrainConfig {
            iterations: t.iterations,
            batch_size: t.batch_size,
            optimizer: t.optimizer.clone(),
            cond_dropout: t.cond_dropout,
            schedule: self.schedule,
            ema_rate: t.ema_rate,
            seed: self.seed,
        }
    }

    pub fn distill_config(&self) -> DistillConfig {
        let d = &self.distill;
        DistillConfig {
            init: d.init,
            divergence: d.divergence,
            weight: d.weight,
            cfg_scale: d.cfg_scale,
            schedule: self.schedule,
            iterations: d.iterations,
            batch_size: d.batch_size,
            generator_optimizer: d.generator_optimizer.clone(),
            aux_optimizer: d.aux_optimizer.clone(),
            ema_rate: d.ema_rate,
            aux_updates: d.aux_updates,
            seed: self.seed,
        }
    }

    pub fn teacher_sampler(&self, steps: usize, temperature: f64) -> SamplerConfig {
        SamplerConfig {
            schedule: self.schedule,
            steps,
            mode: self.eval.sampler_mode,
            guidance: Guidance {
                cfg_scale: self.eval.teacher_cfg_scale,
                temperature,
                top_k: None,
            },
        }
    }

    pub fn diagnostics_config(&self) -> DiagnosticsConfig {
        DiagnosticsConfig {
            samples_per_class: self.eval.samples_per_class,
            temperatures: self.eval.temperatures.clone(),
            support_threshold: self.eval.support_threshold,
            n_init: self.eval.n_init,
            seed: self.seed,
        }
    }

    /// Checks every derived component config.
    pub fn validate(&self) -> CliResult<()> {
        let wrap = |section: &str, e: maskdistill::Error| CliError::Config(format!("{section}: {e}"));
        self.dataset.build().map_err(|e| wrap("dataset", e))?;
        self.model_config().validate().map_err(|e| wrap("model", e))?;
        self.teacher_config().validate().map_err(|e| wrap("teacher", e))?;
        self.distill_config().validate().map_err(|e| wrap("distill", e))?;
        self.teacher_sampler(self.eval.teacher_steps, self.eval.teacher_temperature)
            .validate()
            .map_err(|e| wrap("eval", e))?;
        if self.eval.steps_grid.contains(&0) {
            return Err(CliError::Config("eval.steps_grid: step counts must be positive".into()));
        }
        if self.eval.samples_per_class == 0 || self.eval.n_init == 0 {
            return Err(CliError::Config("eval: samples_per_class and n_init must be positive".into()));
        }
        Ok(())
    }

    /// Non-fatal remarks about the configuration.
    pub fn warnings(&self) -> Vec<String> {
        let mut out = Vec::new();
        if let DivergenceSpec::Jeffrey { beta } = self.distill.divergence {
            if !(-0.3..=1.0).contains(&beta) {
                out.push(format!("jeffrey beta {beta} lies outside [-0.3, 1]; distillation is known to diverge there"));
            }
        }
        out
    }

    pub fn to_flat(&self) -> FlatConfig {
        let mut out = FlatConfig::new();
        flatten_into("", &serde_json::to_value(self).expect("config serializes"), &mut out);
        out
    }

    /// Builds a config from flat keys. Keys the user leaves out take their
    /// section defaults, also inside partially given nested objects.
    pub fn from_flat(flat: &FlatConfig) -> CliResult<Self> {
        let nested = unflatten(&with_defaults(flat))?;
        serde_path_to_error::deserialize(nested).map_err(|e| {
            let path = e.path().to_string();
            if path == "." || path.is_empty() {
                CliError::Config(e.into_inner().to_string())
            } else {
                CliError::Config(format!("{path}: {}", e.into_inner()))
            }
        })
    }

    /// Output directory, placed under `$MASKDISTILL_OUTPUT_ROOT` when it is relative.
    pub fn output_path(&self) -> PathBuf {
        let dir = Path::new(&self.output_dir);
        match std::env::var_os(OUTPUT_ROOT_ENV) {
            Some(root) if dir.is_relative() => Path::new(&root).join(dir),
            _ => dir.to_path_buf(),
        }
    }
}

fn section_defaults() -> FlatConfig {
    let sections = serde_json::json!({
        "model": ModelSection::default(),
        "teacher": TeacherSection::default(),
        "distill": DistillSection::default(),
        "eval": EvalSection::default(),
        "log": LogSection::default(),
    });
    let mut out = FlatConfig::new();
    flatten_into("", &sections, &mut out);
    out
}

/// Fills in default keys not shadowed by user keys. A user-given `kind`
/// tag discards every default below its object, since the variant may differ.
fn with_defaults(user: &FlatConfig) -> FlatConfig {
    let tagged: Vec<String> = user
        .keys()
        .filter_map(|k| k.strip_suffix(".kind").map(|p| format!("{p}.")))
        .collect();
    let mut out = user.clone();
    for (key, value) in section_defaults() {
        let shadowed = user.keys().any(|u| {
            u == &key || key.starts_with(&format!("{u}.")) || u.starts_with(&format!("{key}."))
        }) || tagged.iter().any(|p| key.starts_with(p));
        if !shadowed {
            out.insert(key, value);
        }
    }
    out
}

fn flatten_into(prefix: &str, value: &Value, out: &mut FlatConfig) {
    match value {
        Value::Object(map) if !map.is_empty() => {
            for (k, v) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten_into(&key, v, out);
            }
        }
        _ => {
            out.insert(prefix.to_string(), value.clone());
        }
    }
}

/// Flattens any nesting in a parsed config object.
pub fn flatten(value: &Value) -> CliResult<FlatConfig> {
    if !value.is_object() {
        return Err(CliError::Config("config must be a JSON object".into()));
    }
    let mut out = FlatConfig::new();
    flatten_into("", value, &mut out);
    Ok(out)
}

pub fn unflatten(flat: &FlatConfig) -> CliResult<Value> {
    let mut root = Map::new();
    for (key, value) in flat {
        let parts: Vec<&str> = key.split('.').collect();
        if parts.iter().any(|p| p.is_empty()) {
            return Err(CliError::Config(format!("malformed key `{key}`")));
        }
        let mut node = &mut root;
        for (depth, part) in parts.iter().enumerate() {
            if depth + 1 == parts.len() {
                if node.contains_key(*part) {
                    return Err(CliError::Config(format!("key `{key}` conflicts with another key")));
                }
                node.insert(part.to_string(), value.clone());
            } else {
                let child = node.entry(part.to_string()).or_insert_with(|| Value::Object(Map::new()));
                node = child
                    .as_object_mut()
                    .ok_or_else(|| CliError::Config(format!("key `{key}` conflicts with another key")))?;
            }
        }
    }
    Ok(Value::Object(root))
}

/// Parses `key=value`; the value is read as JSON, or as a bare string when that fails.
pub fn parse_assignment(arg: &str) -> CliResult<(String, Value)> {
    let (key, raw) = arg
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("expected key=value, got `{arg}`")))?;
    let key = key.trim();
    if key.is_empty() {
        return Err(CliError::Config(format!("empty key in `{arg}`")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok((key.to_string(), value))
}

pub fn read_flat(path: &Path) -> CliResult<FlatConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    let value: Value =
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{} is not valid JSON: {e}", path.display())))?;
    flatten(&value)
}

/// Applies overrides to a flat config. An override replaces every key it
/// shadows; object values are flattened into dotted keys.
pub fn apply_overrides(flat: &mut FlatConfig, overrides: &[(String, Value)]) {
    for (key, value) in overrides {
        let nested = format!("{key}.");
        flat.retain(|k, _| !k.starts_with(&nested));
        let mut parent = key.as_str();
        while let Some((head, _)) = parent.rsplit_once('.') {
            flat.remove(head);
            parent = head;
        }
        flatten_into(key, value, flat);
    }
}

pub fn load(path: &Path, sets: &[String]) -> CliResult<(FlatConfig, ExperimentConfig)> {
    let mut flat = read_flat(path)?;
    let overrides = sets.iter().map(|s| parse_assignment(s)).collect::<CliResult<Vec<_>>>()?;
    apply_overrides(&mut flat, &overrides);
    let cfg = ExperimentConfig::from_flat(&flat)?;
    cfg.validate()?;
    Ok((flat, cfg))
}

/// One run of an ablation grid.
#[derive(Clone, Debug, PartialEq)]
pub struct GridPoint {
    /// Subdirectory name, `key=value` pairs joined by commas.
    pub name: String,
    pub assignments: Vec<(String, Value)>,
}

/// Parses `key=[v1, v2, ...]`.
pub fn parse_grid_axis(arg: &str) -> CliResult<(String, Vec<Value>)> {
    let (key, value) = parse_assignment(arg)?;
    match value {
        Value::Array(values) if !values.is_empty() => Ok((key, values)),
        _ => Err(CliError::Config(format!("grid axis `{key}` needs a non-empty JSON array"))),
    }
}

/// Cartesian product of the axes, first axis varying slowest.
pub fn expand_grid(axes: &[(String, Vec<Value>)]) -> Vec<GridPoint> {
    let mut points = vec![GridPoint {
        name: String::new(),
        assignments: Vec::new(),
    }];
    for (key, values) in axes {
        let mut next = Vec::with_capacity(points.len() * values.len());
        for p in &points {
            for v in values {
                let label = format!("{key}={}", render(v));
                let name = if p.name.is_empty() { label } else { format!("{},{label}", p.name) };
                let mut assignments = p.assignments.clone();
                assignments.push((key.clone(), v.clone()));
                next.push(GridPoint { name, assignments });
            }
        }
        points = next;
    }
    points
}

pub fn render(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}
