use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::grpo::KlSchedule;
use crate::tasks::{DatasetSpec, Family};
use crate::trainer::{
    check_budget_parity, default_schedule, eval_file, split_seed, train, DatasetSource,
    DatasetsCfg, Method, TrainConfig, TrainOptions,
};
use crate::{LabError, Result};

pub const ALPHA_VALUES: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];
pub const KL_VALUES: [f64; 6] = [0.0, 0.01, 0.02, 0.03, 0.04, 0.05];
pub const DEFAULT_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
pub const PLAN_FILE: &str = "preset.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PresetName {
    AlphaSweep,
    KlSweep,
    SameTask,
    CrossTask,
    Fig5Curves,
}

impl PresetName {
    pub const ALL: [PresetName; 5] = [
        PresetName::AlphaSweep,
        PresetName::KlSweep,
        PresetName::SameTask,
        PresetName::CrossTask,
        PresetName::Fig5Curves,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PresetName::AlphaSweep => "alpha_sweep",
            PresetName::KlSweep => "kl_sweep",
            PresetName::SameTask => "same_task",
            PresetName::CrossTask => "cross_task",
            PresetName::Fig5Curves => "fig5_curves",
        }
    }
}

impl fmt::Display for PresetName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PresetName {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        PresetName::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| LabError::Config(format!("unknown preset `{s}`")))
    }
}

/// One training run of a preset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSpec {
    pub arm: String,
    pub seed: u64,
    pub config: TrainConfig,
}

/// One summary-table entry and the eval file it reads.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cell {
    pub arm: String,
    pub train_family: Family,
    pub eval_family: Family,
    pub seed: u64,
    pub source: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PresetPlan {
    pub name: PresetName,
    pub seeds: Vec<u64>,
    pub swept: Vec<f64>,
    pub runs: Vec<RunSpec>,
    pub cells: Vec<Cell>,
}

impl PresetPlan {
    pub fn load(root: &Path) -> Result<Self> {
        let path = root.join(PLAN_FILE);
        let text = fs::read_to_string(&path)?;
        serde_json::from_str(&text).map_err(|e| LabError::MalformedFile {
            path,
            reason: e.to_string(),
        })
    }

    pub fn save(&self, root: &Path) -> Result<()> {
        fs::create_dir_all(root)?;
        fs::write(
            root.join(PLAN_FILE),
            serde_json::to_string_pretty(self)? + "\n",
        )?;
        Ok(())
    }

    /// Distinct arm names in plan order.
    pub fn arms(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for c in &self.cells {
            if !out.contains(&c.arm) {
                out.push(c.arm.clone());
            }
        }
        out
    }
}

fn with_family(src: &DatasetSource, family: Family, seed: u64) -> DatasetSource {
    match src {
        DatasetSource::Generate(spec) => DatasetSource::Generate(DatasetSpec {
            family,
            seed,
            ..spec.clone()
        }),
        DatasetSource::File(_) => src.clone(),
    }
}

/// Derives an arm's config from the template, keeping its budget and shape.
fn arm_config(
    template: &TrainConfig,
    method: Method,
    train_family: Family,
    eval_families: &[Family],
    seed: u64,
    dir: PathBuf,
) -> Result<TrainConfig> {
    let eval_template = template.datasets.eval.first().ok_or_else(|| {
        LabError::Config(
            "preset template needs at least one eval dataset to copy its size from".into(),
        )
    })?;
    if matches!(template.datasets.train, DatasetSource::File(_))
        || template
            .datasets
            .eval
            .iter()
            .any(|s| matches!(s, DatasetSource::File(_)))
    {
        return Err(LabError::Config(
            "preset templates must use generated datasets so each family can be derived".into(),
        ));
    }
    Ok(TrainConfig {
        method,
        train_family,
        eval_families: eval_families.to_vec(),
        schedule: default_schedule(method, train_family, template.total_steps),
        seed,
        datasets: DatasetsCfg {
            train: with_family(
                &template.datasets.train,
                train_family,
                split_seed(train_family, 0),
            ),
            eval: eval_families
                .iter()
                .map(|&f| with_family(eval_template, f, split_seed(f, 1)))
                .collect(),
        },
        output_dir: dir,
        ..template.clone()
    })
}

fn constant(beta: f64, template: &TrainConfig) -> KlSchedule {
    let w = default_schedule(Method::GrpoD, Family::Arith, template.total_steps).exploration_steps;
    KlSchedule::constant(beta, w, template.total_steps)
}

fn value_label(prefix: &str, v: f64) -> String {
    format!("{prefix}_{v:.2}")
}

/// Expands a preset into runs and summary cells rooted at `root`.
pub fn plan(
    name: PresetName,
    template: &TrainConfig,
    seeds: &[u64],
    root: &Path,
) -> Result<PresetPlan> {
    if seeds.is_empty() {
        return Err(LabError::Config("a preset needs at least one seed".into()));
    }
    let mut runs = Vec::new();
    let mut cells = Vec::new();
    let run_dir = |arm: &str, family: Family, seed: u64| {
        root.join(arm)
            .join(family.name())
            .join(format!("seed{seed}"))
    };
    let rel = |p: &Path| {
        p.strip_prefix(root)
            .map(Path::to_path_buf)
            .unwrap_or_else(|_| p.to_path_buf())
    };
    let t = template.total_steps;
    let mut swept = Vec::new();
    match name {
        PresetName::AlphaSweep | PresetName::KlSweep => {
            let family = Family::Arith;
            let values: Vec<f64> = if name == PresetName::AlphaSweep {
                ALPHA_VALUES.to_vec()
            } else {
                KL_VALUES.to_vec()
            };
            swept = values.clone();
            for &v in &values {
                let arm = value_label(
                    if name == PresetName::AlphaSweep {
                        "alpha"
                    } else {
                        "beta"
                    },
                    v,
                );
                for &seed in seeds {
                    let dir = run_dir(&arm, family, seed);
                    let mut cfg = arm_config(
                        template,
                        Method::GrpoConstant,
                        family,
                        &[family],
                        seed,
                        dir.clone(),
                    )?;
                    if name == PresetName::AlphaSweep {
                        cfg.reward.alpha = v;
                        cfg.schedule = constant(0.01, template);
                    } else {
                        cfg.schedule = constant(v, template);
                    }
                    cells.push(Cell {
                        arm: arm.clone(),
                        train_family: family,
                        eval_family: family,
                        seed,
                        source: rel(&eval_file(&dir, family, t)),
                    });
                    runs.push(RunSpec {
                        arm: arm.clone(),
                        seed,
                        config: cfg,
                    });
                }
            }
        }
        PresetName::SameTask => {
            for family in Family::ALL {
                for &seed in seeds {
                    let grpo_d_dir = run_dir(Method::GrpoD.as_str(), family, seed);
                    cells.push(Cell {
                        arm: "base".into(),
                        train_family: family,
                        eval_family: family,
                        seed,
                        source: rel(&eval_file(&grpo_d_dir, family, 0)),
                    });
                }
                for method in [Method::GrpoConstant, Method::Sft, Method::GrpoD] {
                    for &seed in seeds {
                        let dir = run_dir(method.as_str(), family, seed);
                        runs.push(RunSpec {
                            arm: method.to_string(),
                            seed,
                            config: arm_config(
                                template,
                                method,
                                family,
                                &[family],
                                seed,
                                dir.clone(),
                            )?,
                        });
                        cells.push(Cell {
                            arm: method.to_string(),
                            train_family: family,
                            eval_family: family,
                            seed,
                            source: rel(&eval_file(&dir, family, t)),
                        });
                    }
                }
            }
        }
        PresetName::CrossTask => {
            for train_family in Family::ALL {
                for method in [Method::Sft, Method::GrpoD] {
                    for &seed in seeds {
                        let dir = run_dir(method.as_str(), train_family, seed);
                        runs.push(RunSpec {
                            arm: method.to_string(),
                            seed,
                            config: arm_config(
                                template,
                                method,
                                train_family,
                                &Family::ALL,
                                seed,
                                dir,
                            )?,
                        });
                    }
                }
                for eval_family in Family::ALL {
                    for (arm, step) in [("base", 0), ("sft", t), ("grpo_d", t)] {
                        let source_run = if arm == "sft" { "sft" } else { "grpo_d" };
                        for &seed in seeds {
                            let dir = run_dir(source_run, train_family, seed);
                            cells.push(Cell {
                                arm: arm.to_string(),
                                train_family,
                                eval_family,
                                seed,
                                source: rel(&eval_file(&dir, eval_family, step)),
                            });
                        }
                    }
                }
            }
        }
        PresetName::Fig5Curves => {
            let family = Family::Counting;
            for &seed in seeds {
                let dir = run_dir(Method::GrpoD.as_str(), family, seed);
                runs.push(RunSpec {
                    arm: Method::GrpoD.to_string(),
                    seed,
                    config: arm_config(
                        template,
                        Method::GrpoD,
                        family,
                        &[family],
                        seed,
                        dir.clone(),
                    )?,
                });
                cells.push(Cell {
                    arm: Method::GrpoD.to_string(),
                    train_family: family,
                    eval_family: family,
                    seed,
                    source: rel(&eval_file(&dir, family, t)),
                });
            }
        }
    }
    let all: Vec<&TrainConfig> = runs.iter().map(|r| &r.config).collect();
    check_budget_parity(&all)?;
    for r in &runs {
        r.config.validate()?;
    }
    Ok(PresetPlan {
        name,
        seeds: seeds.to_vec(),
        swept,
        runs,
        cells,
    })
}

#[derive(Debug, Clone)]
pub struct RunFailure {
    pub arm: String,
    pub seed: u64,
    pub error: String,
}

/// Runs every (arm, seed) in order. Runs whose final checkpoint already
/// exists are skipped, so an interrupted preset can be restarted.
pub fn execute(plan: &PresetPlan, root: &Path, opts: &TrainOptions) -> Result<Vec<RunFailure>> {
    plan.save(root)?;
    let mut failures = Vec::new();
    for run in &plan.runs {
        if run.config.output_dir.join("ckpt_final").exists() {
            continue;
        }
        if !opts.quiet {
            eprintln!(
                "{}: {} seed {} -> {}",
                plan.name,
                run.arm,
                run.seed,
                run.config.output_dir.display()
            );
        }
        if let Err(e) = train(&run.config, opts) {
            if e.is_config_error() {
                return Err(e);
            }
            failures.push(RunFailure {
                arm: run.arm.clone(),
                seed: run.seed,
                error: e.to_string(),
            });
        }
    }
    Ok(failures)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn template() -> TrainConfig {
        TrainConfig::preset(Method::GrpoD, Family::Counting, 1)
    }

    #[test]
    fn arm_counts_match_presets() {
        let root = Path::new("/tmp/unused");
        let p = plan(PresetName::AlphaSweep, &template(), &[1], root).unwrap();
        assert_eq!(p.arms().len(), 5);
        assert!(p
            .runs
            .iter()
            .all(|r| r.config.method == Method::GrpoConstant));
        let p = plan(PresetName::KlSweep, &template(), &[1], root).unwrap();
        assert_eq!(p.arms().len(), 6);
        let p = plan(PresetName::SameTask, &template(), &[1, 2], root).unwrap();
        assert_eq!(p.arms(), vec!["base", "grpo_constant", "sft", "grpo_d"]);
        assert_eq!(p.runs.len(), 2 * 3 * 2);
        let p = plan(PresetName::CrossTask, &template(), &[1], root).unwrap();
        assert_eq!(p.cells.len(), 12);
        assert_eq!(p.runs.len(), 4);
    }

    #[test]
    fn sweeps_carry_their_values() {
        let root = Path::new("/tmp/unused");
        let p = plan(PresetName::KlSweep, &template(), &[1], root).unwrap();
        let betas: Vec<f64> = p.runs.iter().map(|r| r.config.schedule.beta_min).collect();
        assert_eq!(betas, KL_VALUES.to_vec());
        let p = plan(PresetName::AlphaSweep, &template(), &[1], root).unwrap();
        let alphas: Vec<f64> = p.runs.iter().map(|r| r.config.reward.alpha).collect();
        assert_eq!(alphas, ALPHA_VALUES.to_vec());
    }

    #[test]
    fn plan_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let p = plan(PresetName::SameTask, &template(), &[3], dir.path()).unwrap();
        p.save(dir.path()).unwrap();
        assert_eq!(PresetPlan::load(dir.path()).unwrap(), p);
    }
}
