use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use super::preset::{self, PresetName, DEFAULT_SEEDS};
use super::summary;
use crate::grpo::{beta_at, KlSchedule};
use crate::policy::gradcheck::{self, GradcheckCfg};
use crate::tasks::{generate_dataset, save_dataset, DatasetSpec, Vocab, VocabCfg};
use crate::trainer::{cross_task_eval, train, Method, TrainConfig, TrainOptions};
use crate::{LabError, Result};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "grpo-d-lab",
    version,
    about = "GRPO / GRPO-D reinforcement fine-tuning lab"
)]
pub struct Cli {
    /// Suppress progress output.
    #[arg(long, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a dataset file from a `{vocab, dataset}` spec.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the dataset seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train from a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Continue from a checkpoint of the same run.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Evaluate a checkpoint on a dataset file with greedy decoding.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Where to write the report (stdout when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 48)]
        max_new_tokens: usize,
    },
    /// Evaluate a checkpoint on a dataset of another task family.
    CrossEval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 48)]
        max_new_tokens: usize,
    },
    /// Write `step,beta` rows of a KL schedule.
    ScheduleDump {
        /// A schedule file; otherwise use the flags below.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0.04)]
        beta_min: f64,
        #[arg(long, default_value_t = 0.1)]
        beta_max: f64,
        #[arg(long, default_value_t = 300)]
        exploration_steps: u64,
        #[arg(long, default_value_t = 1000)]
        total_steps: u64,
        /// Step spacing between rows; `w` and `t` are always included.
        #[arg(long, default_value_t = 1)]
        resolution: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of the GRPO-D and SFT gradients.
    Gradcheck {
        #[arg(long, default_value_t = 11)]
        seed: u64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        #[arg(long, default_value_t = 3)]
        points: usize,
        /// Negative control: perturb the analytic gradient.
        #[arg(long)]
        corrupt: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run every arm and seed of an experiment preset, then summarize.
    RunPreset {
        /// alpha_sweep, kl_sweep, same_task, cross_task or fig5_curves.
        name: String,
        #[arg(long)]
        out: PathBuf,
        /// Template config; budget and model fields are copied to every arm.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Run a single seed instead of the default list.
        #[arg(long)]
        seed: Option<u64>,
        /// Comma-separated seed list.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Rebuild `summary.csv` for a preset directory.
    Summarize {
        #[arg(long)]
        out: PathBuf,
    },
}

/// `gen-data` input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenDataConfig {
    pub vocab: VocabCfg,
    pub dataset: DatasetSpec,
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)
        .map_err(|e| LabError::Config(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| LabError::Config(format!("{}: {e}", path.display())))
}

fn emit(text: &str, out: Option<&Path>) -> Result<()> {
    match out {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            fs::write(p, text)?;
        }
        None => print!("{text}"),
    }
    Ok(())
}

/// Exact schedule rows at multiples of `resolution`, plus `w` and `t`.
pub fn schedule_csv(schedule: &KlSchedule, resolution: u64) -> Result<String> {
    schedule.validate()?;
    if resolution == 0 {
        return Err(LabError::Config("resolution must be >= 1".into()));
    }
    let mut steps: Vec<u64> = (0..=schedule.total_steps)
        .step_by(resolution as usize)
        .collect();
    steps.extend([schedule.exploration_steps, schedule.total_steps]);
    steps.sort_unstable();
    steps.dedup();
    let mut out = String::from("step,beta\n");
    for s in steps {
        out.push_str(&format!("{s},{}\n", beta_at(s, schedule)?));
    }
    Ok(out)
}

pub fn gradcheck_text(report: &gradcheck::GradcheckReport) -> String {
    let mut out = String::new();
    for p in &report.points {
        out.push_str(&format!(
            "{:?} point {}: max rel err {:.3e} (index {}, at h/10: {:.3e})\n",
            p.loss, p.point, p.max_rel_err, p.worst_index, p.worst_rel_err_fine
        ));
        for t in &p.tensors {
            out.push_str(&format!("  {:<14} {:.3e}\n", t.name, t.max_rel_err));
        }
    }
    out.push_str(&format!(
        "max relative error {:.3e} (tolerance {:.1e}): {}\n",
        report.max_rel_err(),
        report.tolerance,
        if report.passed { "PASS" } else { "FAIL" }
    ));
    out
}

fn run(cli: Cli) -> Result<i32> {
    let quiet = cli.quiet;
    match cli.command {
        Command::GenData { config, out, seed } => {
            let mut cfg: GenDataConfig = read_json(&config)?;
            if let Some(s) = seed {
                cfg.dataset.seed = s;
            }
            let vocab = Vocab::new(cfg.vocab)?;
            let instances = generate_dataset(&vocab, &cfg.dataset)?;
            save_dataset(&out, &vocab, &instances)?;
            if !quiet {
                eprintln!(
                    "wrote {} {} instances to {}",
                    instances.len(),
                    cfg.dataset.family,
                    out.display()
                );
            }
        }
        Command::Train {
            config,
            out,
            seed,
            resume,
            threads,
        } => {
            let mut cfg = TrainConfig::load(&config)?;
            if let Some(o) = out {
                cfg.output_dir = o;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let opts = TrainOptions {
                threads,
                resume_from: resume,
                quiet,
                inject_non_finite_at: None,
            };
            let outcome = train(&cfg, &opts)?;
            if !quiet {
                eprintln!(
                    "trained {} steps; outputs in {}",
                    outcome.metrics.len(),
                    outcome.output_dir.display()
                );
            }
        }
        Command::Eval {
            checkpoint,
            dataset,
            out,
            max_new_tokens,
        }
        | Command::CrossEval {
            checkpoint,
            dataset,
            out,
            max_new_tokens,
        } => {
            let report = cross_task_eval(&checkpoint, &dataset, max_new_tokens)?;
            emit(
                &(serde_json::to_string_pretty(&report)? + "\n"),
                out.as_deref(),
            )?;
        }
        Command::ScheduleDump {
            config,
            beta_min,
            beta_max,
            exploration_steps,
            total_steps,
            resolution,
            out,
        } => {
            let schedule = match config {
                Some(p) => read_json(&p)?,
                None => KlSchedule {
                    beta_min,
                    beta_max,
                    exploration_steps,
                    total_steps,
                },
            };
            emit(&schedule_csv(&schedule, resolution)?, out.as_deref())?;
        }
        Command::Gradcheck {
            seed,
            tolerance,
            points,
            corrupt,
            out,
        } => {
            let vocab = Vocab::new(VocabCfg::default())?;
            let cfg = GradcheckCfg {
                tolerance,
                points,
                corrupt_gradient: corrupt,
                ..GradcheckCfg::reduced(vocab.len(), seed)
            };
            let report = gradcheck::run(&cfg, &vocab)?;
            print!("{}", gradcheck_text(&report));
            if let Some(p) = out {
                emit(&(serde_json::to_string_pretty(&report)? + "\n"), Some(&p))?;
            }
            if !report.passed {
                return Ok(EXIT_RUNTIME);
            }
        }
        Command::RunPreset {
            name,
            out,
            config,
            seed,
            seeds,
            threads,
        } => {
            let name: PresetName = name.parse()?;
            let template = match config {
                Some(p) => TrainConfig::load(&p)?,
                None => TrainConfig::preset(Method::GrpoD, crate::tasks::Family::Counting, 1),
            };
            let seeds = match (seed, seeds) {
                (Some(s), _) => vec![s],
                (None, Some(list)) => list,
                (None, None) => DEFAULT_SEEDS.to_vec(),
            };
            let plan = preset::plan(name, &template, &seeds, &out)?;
            let opts = TrainOptions {
                threads,
                quiet,
                ..TrainOptions::default()
            };
            let failures = preset::execute(&plan, &out, &opts)?;
            let table = summary::summarize(&out)?;
            for f in &failures {
                eprintln!("run failed: {} seed {}: {}", f.arm, f.seed, f.error);
            }
            if !quiet {
                print!("{}", table.to_csv());
            }
            if !failures.is_empty() || table.missing_cells() > 0 {
                return Ok(EXIT_RUNTIME);
            }
        }
        Command::Summarize { out } => {
            let table = summary::summarize(&out)?;
            print!("{}", table.to_csv());
            if table.missing_cells() > 0 {
                return Ok(EXIT_RUNTIME);
            }
        }
    }
    Ok(EXIT_OK)
}

pub fn exit_code(err: &LabError) -> i32 {
    if err.is_config_error() {
        EXIT_CONFIG
    } else {
        EXIT_RUNTIME
    }
}

/// Parses `args`, runs the command, and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
