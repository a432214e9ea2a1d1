use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::grpo::{ClipCfg, KlSchedule};
use crate::policy::{AdamCfg, PolicyArch, SamplerCfg};
use crate::reward::RewardWeights;
use crate::tasks::{DatasetSpec, Family, Vocab, VocabCfg};
use crate::{LabError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    GrpoConstant,
    GrpoD,
    Sft,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::GrpoConstant, Method::GrpoD, Method::Sft];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::GrpoConstant => "grpo_constant",
            Method::GrpoD => "grpo_d",
            Method::Sft => "sft",
        }
    }

    pub fn is_rl(self) -> bool {
        !matches!(self, Method::Sft)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| LabError::Config(format!("unknown method `{s}`")))
    }
}

/// Where a dataset comes from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    Generate(DatasetSpec),
    File(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetsCfg {
    pub train: DatasetSource,
    pub eval: Vec<DatasetSource>,
}

/// How the starting (and reference) policy is obtained.
///
/// `format_priming` runs a short supervised phase on demonstrations whose
/// think bodies and answer digits are random and a share of which are
/// deliberately malformed. The result emits the tag structure some of the
/// time but knows nothing about either task, which gives the RL arms a reward
/// signal without handing them the answers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum WarmStart {
    None,
    FormatPriming {
        steps: usize,
        batch_size: usize,
        lr: f64,
        malformed_fraction: f64,
    },
    Checkpoint {
        path: PathBuf,
    },
}

impl WarmStart {
    pub fn default_priming() -> Self {
        WarmStart::FormatPriming {
            steps: 150,
            batch_size: 16,
            lr: 3e-3,
            malformed_fraction: 0.5,
        }
    }
}

/// A fully explicit training run. Every field must be present in the file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub method: Method,
    pub train_family: Family,
    pub eval_families: Vec<Family>,
    pub schedule: KlSchedule,
    pub clip: ClipCfg,
    pub reward: RewardWeights,
    pub group_size: usize,
    pub prompts_per_step: usize,
    /// Optimizer updates per batch (mu).
    pub inner_epochs: usize,
    pub total_steps: u64,
    pub eval_every: u64,
    pub checkpoint_every: u64,
    pub seed: u64,
    pub arch: PolicyArch,
    pub optimizer: AdamCfg,
    pub sampler: SamplerCfg,
    pub eval_max_new_tokens: usize,
    pub vocab: VocabCfg,
    pub warm_start: WarmStart,
    /// Caps the number of distinct training instances (few-shot regime).
    pub few_shot_cap: Option<usize>,
    pub datasets: DatasetsCfg,
    pub output_dir: PathBuf,
    /// When false, `wall_clock_ms` is written as 0 so metric files are
    /// byte-reproducible.
    pub log_wall_clock: bool,
}

impl TrainConfig {
    /// The lab's default run for `method` on `family`.
    pub fn preset(method: Method, family: Family, seed: u64) -> Self {
        let vocab_cfg = VocabCfg::default();
        let vocab = Vocab::new(vocab_cfg).expect("default vocabulary");
        let total_steps = 300;
        let schedule = default_schedule(method, family, total_steps);
        let eval_families = vec![family];
        Self {
            method,
            train_family: family,
            eval_families,
            schedule,
            clip: ClipCfg::default(),
            reward: RewardWeights::default(),
            group_size: 8,
            prompts_per_step: 16,
            inner_epochs: 1,
            total_steps,
            eval_every: 50,
            checkpoint_every: 100,
            seed,
            arch: PolicyArch::new(vocab.len()),
            optimizer: AdamCfg::default(),
            sampler: SamplerCfg::default(),
            eval_max_new_tokens: SamplerCfg::default().max_new_tokens,
            vocab: vocab_cfg,
            warm_start: WarmStart::default_priming(),
            few_shot_cap: None,
            datasets: DatasetsCfg {
                train: DatasetSource::Generate(DatasetSpec::new(
                    family,
                    2000,
                    split_seed(family, 0),
                )),
                eval: vec![DatasetSource::Generate(DatasetSpec::new(
                    family,
                    200,
                    split_seed(family, 1),
                ))],
            },
            output_dir: PathBuf::from(format!("runs/{method}_{family}_seed{seed}")),
            log_wall_clock: false,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| LabError::Config(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| LabError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Every violation, one per line.
    pub fn violations(&self) -> Vec<String> {
        let mut errs = Vec::new();
        let mut check = |r: Result<()>| {
            if let Err(e) = r {
                errs.extend(e.to_string().split("; ").map(str::to_string));
            }
        };
        check(self.schedule.validate());
        check(self.clip.validate());
        check(self.reward.validate());
        check(self.arch.validate());
        check(self.optimizer.validate());
        check(self.sampler.validate());
        let vocab = Vocab::new(self.vocab);
        if let Err(e) = &vocab {
            errs.push(e.to_string());
        }
        match self.method {
            Method::GrpoConstant if !self.schedule.is_constant() => errs.push(format!(
                "method grpo_constant needs beta_min == beta_max, got {} and {}",
                self.schedule.beta_min, self.schedule.beta_max
            )),
            _ => {}
        }
        if self.schedule.total_steps != self.total_steps {
            errs.push(format!(
                "total_steps {} does not match schedule.total_steps {}",
                self.total_steps, self.schedule.total_steps
            ));
        }
        if self.group_size < 2 {
            errs.push(format!("group_size must be >= 2, got {}", self.group_size));
        }
        if self.prompts_per_step == 0 {
            errs.push("prompts_per_step must be >= 1".into());
        }
        if self.inner_epochs == 0 {
            errs.push("inner_epochs must be >= 1".into());
        }
        if self.total_steps == 0 {
            errs.push("total_steps must be >= 1".into());
        }
        if self.eval_every == 0 {
            errs.push("eval_every must be >= 1".into());
        }
        if self.checkpoint_every == 0 {
            errs.push("checkpoint_every must be >= 1".into());
        }
        if self.eval_max_new_tokens == 0 {
            errs.push("eval_max_new_tokens must be >= 1".into());
        }
        if self.few_shot_cap == Some(0) {
            errs.push("few_shot_cap must be >= 1 when set".into());
        }
        match &self.warm_start {
            WarmStart::FormatPriming {
                steps,
                batch_size,
                lr,
                malformed_fraction,
            } => {
                if *steps > 0 && *batch_size == 0 {
                    errs.push("warm_start.batch_size must be >= 1".into());
                }
                if !(lr.is_finite() && *lr > 0.0) {
                    errs.push(format!("warm_start.lr must be > 0, got {lr}"));
                }
                if !(0.0..=1.0).contains(malformed_fraction) {
                    errs.push(format!(
                        "warm_start.malformed_fraction must lie in [0, 1], got {malformed_fraction}"
                    ));
                }
            }
            WarmStart::None | WarmStart::Checkpoint { .. } => {}
        }
        if self.eval_families.is_empty() {
            errs.push("eval_families must not be empty".into());
        }
        let mut seen = BTreeSet::new();
        for f in &self.eval_families {
            if !seen.insert(f.to_string()) {
                errs.push(format!("eval family {f} listed twice"));
            }
        }
        if self.datasets.eval.len() != self.eval_families.len() {
            errs.push(format!(
                "{} eval datasets for {} eval families",
                self.datasets.eval.len(),
                self.eval_families.len()
            ));
        }
        if let Ok(vocab) = &vocab {
            if self.arch.vocab_size != vocab.len() {
                errs.push(format!(
                    "arch.vocab_size {} does not match vocabulary size {}",
                    self.arch.vocab_size,
                    vocab.len()
                ));
            }
            let mut spec_check = |what: &str, src: &DatasetSource, family: Option<Family>| {
                if let DatasetSource::Generate(spec) = src {
                    if let Err(e) = spec.validate(vocab) {
                        errs.push(format!("{what}: {e}"));
                    }
                    if let Some(f) = family {
                        if spec.family != f {
                            errs.push(format!(
                                "{what} generates {} but {f} is expected",
                                spec.family
                            ));
                        }
                    }
                    let longest = max_prompt_len(spec)
                        + self.sampler.max_new_tokens.max(self.eval_max_new_tokens);
                    if longest > self.arch.max_context {
                        errs.push(format!(
                            "{what}: prompt ({}) plus completion budget exceeds max_context {}",
                            max_prompt_len(spec),
                            self.arch.max_context
                        ));
                    }
                }
            };
            spec_check(
                "datasets.train",
                &self.datasets.train,
                Some(self.train_family),
            );
            for (i, src) in self.datasets.eval.iter().enumerate() {
                spec_check(
                    &format!("datasets.eval[{i}]"),
                    src,
                    self.eval_families.get(i).copied(),
                );
            }
        }
        errs
    }

    pub fn validate(&self) -> Result<()> {
        let errs = self.violations();
        if errs.is_empty() {
            Ok(())
        } else {
            Err(LabError::Config(errs.join("\n")))
        }
    }

    /// Rollouts consumed over the whole run.
    pub fn sample_budget(&self) -> u64 {
        self.total_steps * (self.prompts_per_step * self.group_size) as u64
    }
}

/// Longest prompt a generated spec can produce.
pub fn max_prompt_len(spec: &DatasetSpec) -> usize {
    match spec.family {
        Family::Counting => spec.grid_rows * (spec.grid_cols + 1) + 3,
        // `x = d ;` then `y = x + d ;` per step, then `? y |`
        Family::Arith => 4 + 6 * spec.chain_length.saturating_sub(1) + 3,
    }
}

/// Fixed dataset seed per family; split 0 trains, split 1 evaluates.
pub fn split_seed(family: Family, split: u64) -> u64 {
    let f = match family {
        Family::Counting => 0,
        Family::Arith => 1,
    };
    1000 + 10 * f + split
}

/// Default KL schedule per method and family: counting uses the 0.04/0.1
/// dynamic range and constant 0.04; arithmetic uses 0.0/0.02 and constant
/// 0.01.
pub fn default_schedule(method: Method, family: Family, total_steps: u64) -> KlSchedule {
    let dynamic = match family {
        Family::Counting => KlSchedule::dynamic(0.04, 0.1, total_steps),
        Family::Arith => KlSchedule::dynamic(0.0, 0.02, total_steps),
    };
    match method {
        Method::GrpoD | Method::Sft => dynamic,
        Method::GrpoConstant => {
            let beta = match family {
                Family::Counting => 0.04,
                Family::Arith => 0.01,
            };
            KlSchedule::constant(beta, dynamic.exploration_steps, total_steps)
        }
    }
}

/// Configs compared against each other must spend the same sample budget.
pub fn check_budget_parity(configs: &[&TrainConfig]) -> Result<()> {
    let Some(first) = configs.first() else {
        return Ok(());
    };
    let key = |c: &TrainConfig| {
        (
            c.total_steps,
            c.group_size,
            c.prompts_per_step,
            c.inner_epochs,
        )
    };
    let mut errs = Vec::new();
    for c in configs {
        if key(c) != key(first) {
            errs.push(format!(
                "budget mismatch: {} has (t, G, prompts_per_step, mu) = {:?}, expected {:?}",
                c.output_dir.display(),
                key(c),
                key(first)
            ));
        }
    }
    if errs.is_empty() {
        Ok(())
    } else {
        Err(LabError::Config(errs.join("\n")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate_and_round_trip() {
        for m in Method::ALL {
            for f in Family::ALL {
                let cfg = TrainConfig::preset(m, f, 3);
                cfg.validate().unwrap();
                let back = TrainConfig::from_json(&cfg.to_json()).unwrap();
                assert_eq!(back, cfg);
            }
        }
    }

    #[test]
    fn unknown_and_missing_fields_are_rejected() {
        let cfg = TrainConfig::preset(Method::GrpoD, Family::Counting, 1);
        let mut v: serde_json::Value = serde_json::from_str(&cfg.to_json()).unwrap();
        v["surprise"] = 1.into();
        assert!(TrainConfig::from_json(&v.to_string()).is_err());
        let mut v: serde_json::Value = serde_json::from_str(&cfg.to_json()).unwrap();
        v.as_object_mut().unwrap().remove("seed");
        assert!(TrainConfig::from_json(&v.to_string()).is_err());
    }

    #[test]
    fn violations_are_listed_individually() {
        let mut cfg = TrainConfig::preset(Method::GrpoConstant, Family::Counting, 1);
        cfg.schedule.beta_max = 0.1;
        cfg.group_size = 1;
        cfg.total_steps = 7;
        let errs = cfg.violations();
        assert!(errs.len() >= 3, "{errs:?}");
        assert!(errs.iter().any(|e| e.contains("grpo_constant")));
        assert!(errs.iter().any(|e| e.contains("group_size")));
        assert!(errs.iter().any(|e| e.contains("total_steps")));
    }

    #[test]
    fn default_schedules_follow_family() {
        let c = default_schedule(Method::GrpoD, Family::Counting, 1000);
        assert_eq!(
            (c.beta_min, c.beta_max, c.exploration_steps),
            (0.04, 0.1, 300)
        );
        let a = default_schedule(Method::GrpoD, Family::Arith, 1000);
        assert_eq!((a.beta_min, a.beta_max), (0.0, 0.02));
        assert!(default_schedule(Method::GrpoConstant, Family::Counting, 10).is_constant());
    }

    #[test]
    fn budget_parity_is_enforced() {
        let a = TrainConfig::preset(Method::GrpoD, Family::Counting, 1);
        let mut b = TrainConfig::preset(Method::GrpoConstant, Family::Counting, 1);
        check_budget_parity(&[&a, &b]).unwrap();
        b.group_size = 4;
        assert!(check_budget_parity(&[&a, &b]).is_err());
    }

    #[test]
    fn prompt_length_bound_is_tight() {
        let vocab = Vocab::new(VocabCfg::default()).unwrap();
        for family in Family::ALL {
            let spec = DatasetSpec::new(family, 200, 5);
            let longest = crate::tasks::generate_dataset(&vocab, &spec)
                .unwrap()
                .iter()
                .map(|i| i.prompt_tokens.len())
                .max()
                .unwrap();
            assert_eq!(longest, max_prompt_len(&spec));
        }
    }
}
