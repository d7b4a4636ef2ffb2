use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use maskdistill::gradcheck::OracleConfig;
use maskdistill_cli::commands::{self, AblationRow, DistillOptions, RunPaths, SampleOptions, Weights};
use maskdistill_cli::config::{self, render, ExperimentConfig, GridPoint};
use maskdistill_cli::{CliError, CliResult};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser)]
#[command(name = "maskdistill", version, about = "Train, distill and evaluate masked diffusion models on synthetic data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Flat JSON config with dotted keys.
    #[arg(long, short)]
    config: PathBuf,
    /// Override a config key; the value is parsed as JSON when possible.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a teacher on the configured dataset.
    TrainTeacher {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Distill the teacher into a one-step generator.
    Distill {
        #[command(flatten)]
        config: ConfigArgs,
        /// Teacher checkpoint directory [default: <output>/teacher].
        #[arg(long)]
        teacher: Option<PathBuf>,
        /// Continue from the last saved state.
        #[arg(long)]
        resume: bool,
        /// Stop after this iteration, leaving a resumable state.
        #[arg(long)]
        stop_after: Option<u64>,
        /// Ablation axis `key=[v1,v2,...]`; each grid point runs in its own subdirectory.
        #[arg(long = "grid", value_name = "KEY=[VALUES]")]
        grid: Vec<String>,
    },
    /// Draw samples as JSON lines.
    Sample {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t = Weights::Ema)]
        weights: Weights,
        /// Reverse steps; a one-step student takes 1.
        #[arg(long, default_value_t = 1)]
        steps: usize,
        /// Samples per condition.
        #[arg(long, short, default_value_t = 16)]
        n: usize,
        /// Class to sample, repeatable [default: every class].
        #[arg(long = "class")]
        classes: Vec<usize>,
        /// Also sample with the null condition.
        #[arg(long)]
        unconditional: bool,
        #[arg(long, default_value_t = 1.0)]
        temperature: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, short)]
        output: PathBuf,
    },
    /// Compare student and teacher; with --grid, also write an ablation table.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        /// Teacher checkpoint directory [default: <output>/teacher].
        #[arg(long)]
        teacher: Option<PathBuf>,
        /// Student checkpoint directory [default: <output>/student].
        #[arg(long)]
        student: Option<PathBuf>,
        #[arg(long = "grid", value_name = "KEY=[VALUES]")]
        grid: Vec<String>,
    },
    /// Run the finite-difference gradient oracles.
    GradCheck {
        #[arg(long, default_value_t = 200)]
        pairs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write the report as JSON here.
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

fn load(args: &ConfigArgs) -> CliResult<ExperimentConfig> {
    let (_, cfg) = config::load(&args.config, &args.sets)?;
    for w in cfg.warnings() {
        log::warn!("{w}");
    }
    Ok(cfg)
}

fn grid_points(args: &ConfigArgs, grid: &[String]) -> CliResult<Vec<(GridPoint, ExperimentConfig)>> {
    let axes = grid.iter().map(|g| config::parse_grid_axis(g)).collect::<CliResult<Vec<_>>>()?;
    let base = load(args)?;
    let root = base.output_path();
    let mut out = Vec::new();
    for point in config::expand_grid(&axes) {
        let mut sets = args.sets.clone();
        sets.extend(point.assignments.iter().map(|(k, v)| format!("{k}={v}")));
        let (_, mut cfg) = config::load(&args.config, &sets)?;
        cfg.output_dir = root.join(&point.name).to_string_lossy().into_owned();
        out.push((point, cfg));
    }
    Ok(out)
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::TrainTeacher { config } => {
            let cfg = load(&config)?;
            let s = commands::train_teacher(&cfg, &cfg.output_path())?;
            println!("teacher: {} iterations, final loss {:.4}, saved to {}", s.iterations, s.final_loss, s.checkpoint.display());
        }
        Command::Distill {
            config,
            teacher,
            resume,
            stop_after,
            grid,
        } => {
            let base = load(&config)?;
            let teacher = teacher.unwrap_or_else(|| RunPaths::new(base.output_path()).teacher());
            let opts = DistillOptions {
                teacher: Some(teacher),
                resume,
                stop_after,
            };
            let runs = if grid.is_empty() { vec![(None, base)] } else { grid_points(&config, &grid)?.into_iter().map(|(p, c)| (Some(p), c)).collect() };
            for (point, cfg) in runs {
                let s = commands::distill(&cfg, &cfg.output_path(), &opts)?;
                let label = point.map(|p| format!("[{}] ", p.name)).unwrap_or_default();
                for w in &s.warnings {
                    eprintln!("warning: {w}");
                }
                println!(
                    "{label}distill: iteration {}{}{}",
                    s.iter,
                    if s.finished { ", finished" } else { ", stopped early" },
                    s.resumed_from.map(|k| format!(", resumed from {k}")).unwrap_or_default()
                );
            }
        }
        Command::Sample {
            config,
            checkpoint,
            weights,
            steps,
            n,
            classes,
            unconditional,
            temperature,
            seed,
            output,
        } => {
            let cfg = load(&config)?;
            let count = commands::sample(
                &cfg,
                &SampleOptions {
                    checkpoint,
                    weights,
                    steps,
                    per_class: n,
                    classes,
                    unconditional,
                    temperature,
                    seed,
                    output: output.clone(),
                },
            )?;
            println!("wrote {count} samples to {}", output.display());
        }
        Command::Eval {
            config,
            teacher,
            student,
            grid,
        } => {
            let base = load(&config)?;
            let root = base.output_path();
            let teacher = teacher.unwrap_or_else(|| RunPaths::new(&root).teacher());
            if grid.is_empty() {
                let student = student.unwrap_or_else(|| RunPaths::new(&root).student());
                let s = commands::evaluate(&base, &root, &teacher, &student)?;
                println!(
                    "marginal TV {:.4}, entropy {:.4} vs teacher {:.4} (ratio {:.3}), count-1 rows {} vs {}",
                    s.marginal_tv, s.student_entropy, s.teacher_entropy, s.entropy_ratio, s.student_support_count1, s.teacher_support_count1
                );
            } else {
                if student.is_some() {
                    return Err(CliError::Config("--student cannot be combined with --grid".into()));
                }
                let mut rows = Vec::new();
                for (point, cfg) in grid_points(&config, &grid)? {
                    let dir = cfg.output_path();
                    let s = commands::evaluate(&cfg, &dir, &teacher, &RunPaths::new(&dir).student())?;
                    let keys: Vec<&str> = point.assignments.iter().map(|(k, _)| k.as_str()).collect();
                    let values: Vec<String> = point.assignments.iter().map(|(_, v)| render(v)).collect();
                    rows.push(AblationRow {
                        run: point.name.clone(),
                        axis: keys.join(","),
                        value: values.join(","),
                        marginal_tv: s.marginal_tv,
                        joint_tv: s.joint_tv,
                        student_entropy: s.student_entropy,
                        teacher_entropy: s.teacher_entropy,
                        entropy_ratio: s.entropy_ratio,
                        student_support_count1: s.student_support_count1,
                        teacher_support_count1: s.teacher_support_count1,
                    });
                    println!("[{}] marginal TV {:.4}, entropy ratio {:.3}", point.name, s.marginal_tv, s.entropy_ratio);
                }
                let path = root.join("ablation.csv");
                commands::write_ablation(&path, &rows)?;
                println!("ablation table written to {}", path.display());
            }
        }
        Command::GradCheck { pairs, seed, output } => {
            let report = commands::grad_check(&OracleConfig {
                pairs,
                seed,
                ..OracleConfig::default()
            })?;
            println!("{:<28} {:>6} {:>12} {:>12}  result", "oracle", "cases", "max rel err", "max |sum|");
            for o in &report.oracles {
                println!(
                    "{:<28} {:>6} {:>12.3e} {:>12}  {}",
                    o.name,
                    o.cases,
                    o.max_rel_error,
                    o.max_zero_sum.map_or("-".to_string(), |z| format!("{z:.3e}")),
                    if o.passed { "pass" } else { "FAIL" }
                );
            }
            println!(
                "{:<28} {:>6} {:>12.3e} {:>12}  {}",
                "jeffrey consistency",
                "",
                report.jeffrey_max_error,
                "-",
                if report.jeffrey_max_error <= commands::JEFFREY_TOLERANCE { "pass" } else { "FAIL" }
            );
            if let Some(path) = output {
                write_json(&path, &report)?;
            }
            if !report.passed {
                return Err(CliError::Runtime("gradient oracles failed".into()));
            }
        }
    }
    Ok(())
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> CliResult<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, serde_json::to_vec_pretty(value)?)?;
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
