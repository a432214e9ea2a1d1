//! Training loops (GRPO with constant or dynamic KL weight, SFT) and
//! held-out evaluation.

mod config;
mod eval;
mod metrics;
mod warm_start;

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;

pub use config::{
    check_budget_parity, default_schedule, max_prompt_len, split_seed, DatasetSource, DatasetsCfg,
    Method, TrainConfig, WarmStart,
};
pub use eval::{
    cross_task_eval, evaluate, CompletionSource, DemoReplay, EvalRecord, EvalReport, GreedyPolicy,
};
pub use metrics::{
    first_reach, moving_average, read_metrics, reward_stats, MetricsWriter, StepMetrics,
};
pub use warm_start::{base_policy, format_priming, priming_demo};

use crate::grpo::{beta_at, Group, Rollout};
use crate::policy::{
    group_logprobs, load_checkpoint, logprobs, loss_and_grad_with_ref, optimizer_step,
    sample_completion, save_checkpoint, sft_batch_loss_and_grad, Checkpoint, OptimizerState,
    PolicyParams,
};
use crate::reward::total_reward;
use crate::rng::{self, domain};
use crate::tasks::{generate_dataset, load_dataset, make_sft_demo, TaskInstance, Vocab};
use crate::{LabError, Result};

pub const THREADS_ENV: &str = "GRPO_D_LAB_THREADS";

/// Runtime knobs that do not affect results.
#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Worker threads; falls back to `GRPO_D_LAB_THREADS`, then all cores.
    pub threads: Option<usize>,
    /// Continue from a checkpoint written by an earlier run of the same config.
    pub resume_from: Option<PathBuf>,
    pub quiet: bool,
    /// Test hook: poison the gradient at this step.
    pub inject_non_finite_at: Option<u64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: PolicyParams,
    pub metrics: Vec<StepMetrics>,
    pub evals: Vec<EvalReport>,
    pub output_dir: PathBuf,
}

pub fn thread_count(explicit: Option<usize>) -> Result<usize> {
    if let Some(n) = explicit {
        return Ok(n.max(1));
    }
    match std::env::var(THREADS_ENV) {
        Ok(v) => v.trim().parse::<usize>().map(|n| n.max(1)).map_err(|_| {
            LabError::Config(format!(
                "{THREADS_ENV} must be a positive integer, got `{v}`"
            ))
        }),
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

/// Runs `f` on a dedicated pool of `threads` workers.
pub fn with_threads<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| LabError::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

pub fn load_source(vocab: &Vocab, src: &DatasetSource) -> Result<Vec<TaskInstance>> {
    match src {
        DatasetSource::Generate(spec) => generate_dataset(vocab, spec),
        DatasetSource::File(path) => load_dataset(path, vocab),
    }
}

pub fn eval_file(dir: &Path, family: crate::tasks::Family, step: u64) -> PathBuf {
    dir.join(format!("eval_{family}_{step}.json"))
}

pub fn checkpoint_file(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("ckpt_{step}"))
}

pub fn train(cfg: &TrainConfig, opts: &TrainOptions) -> Result<TrainOutcome> {
    cfg.validate()?;
    let threads = thread_count(opts.threads)?;
    with_threads(threads, || Run::new(cfg, opts)?.execute())?
}

struct Run<'a> {
    cfg: &'a TrainConfig,
    opts: &'a TrainOptions,
    vocab: Vocab,
    train_pool: Vec<TaskInstance>,
    eval_sets: Vec<Vec<TaskInstance>>,
    reference: PolicyParams,
    params: PolicyParams,
    opt: OptimizerState,
    start: u64,
    out: PathBuf,
}

impl<'a> Run<'a> {
    fn new(cfg: &'a TrainConfig, opts: &'a TrainOptions) -> Result<Self> {
        let vocab = Vocab::new(cfg.vocab)?;
        let mut train_pool = load_source(&vocab, &cfg.datasets.train)?;
        if let Some(bad) = train_pool.iter().find(|i| i.family != cfg.train_family) {
            return Err(LabError::Config(format!(
                "training set contains a {} instance but train_family is {}",
                bad.family, cfg.train_family
            )));
        }
        if let Some(cap) = cfg.few_shot_cap {
            train_pool.truncate(cap);
        }
        let eval_sets = cfg
            .datasets
            .eval
            .iter()
            .map(|s| load_source(&vocab, s))
            .collect::<Result<Vec<_>>>()?;
        for (set, family) in eval_sets.iter().zip(&cfg.eval_families) {
            if set.is_empty() || set.iter().any(|i| i.family != *family) {
                return Err(LabError::Config(format!(
                    "eval set for {family} is empty or mixed"
                )));
            }
        }
        let reference = base_policy(cfg, &vocab)?;
        let (params, opt, start) = match &opts.resume_from {
            None => {
                let opt = OptimizerState::new(cfg.optimizer, reference.len());
                (reference.snapshot(), opt, 0)
            }
            Some(path) => {
                let ckpt = load_checkpoint(path)?;
                if ckpt.vocab_hash != vocab.hash() {
                    return Err(LabError::VocabMismatch {
                        expected: vocab.hash(),
                        found: ckpt.vocab_hash,
                    });
                }
                if *ckpt.params.arch() != cfg.arch {
                    return Err(LabError::Config(format!(
                        "checkpoint {} has a different architecture",
                        path.display()
                    )));
                }
                if ckpt.step > cfg.total_steps {
                    return Err(LabError::Config(format!(
                        "checkpoint step {} is past total_steps {}",
                        ckpt.step, cfg.total_steps
                    )));
                }
                let opt = ckpt.optimizer.ok_or_else(|| {
                    LabError::Config(format!(
                        "checkpoint {} has no optimizer state",
                        path.display()
                    ))
                })?;
                (ckpt.params, opt, ckpt.step)
            }
        };
        fs::create_dir_all(&cfg.output_dir)?;
        fs::write(cfg.output_dir.join("config.json"), cfg.to_json() + "\n")?;
        Ok(Self {
            cfg,
            opts,
            vocab,
            train_pool,
            eval_sets,
            reference,
            params,
            opt,
            start,
            out: cfg.output_dir.clone(),
        })
    }

    fn checkpoint(
        &self,
        path: &Path,
        step: u64,
        params: &PolicyParams,
        opt: &OptimizerState,
    ) -> Result<()> {
        save_checkpoint(
            path,
            &Checkpoint {
                params: params.clone(),
                optimizer: Some(opt.clone()),
                step,
                vocab: self.cfg.vocab,
                vocab_hash: self.vocab.hash(),
            },
        )
    }

    fn evaluate_all(&self, step: u64) -> Result<Vec<EvalReport>> {
        let source = GreedyPolicy {
            params: &self.params,
            max_new_tokens: self.cfg.eval_max_new_tokens,
        };
        let mut reports = Vec::new();
        for set in &self.eval_sets {
            let mut r = evaluate(&source, set, false)?;
            r.step = Some(step);
            r.save(&eval_file(&self.out, r.family, step))?;
            if !self.opts.quiet {
                eprintln!(
                    "[{}] step {step}: {} acc {:.3} format {:.3}",
                    self.cfg.method, r.family, r.answer_accuracy, r.format_accuracy
                );
            }
            reports.push(r);
        }
        Ok(reports)
    }

    fn execute(mut self) -> Result<TrainOutcome> {
        let cfg = self.cfg;
        let mut writer = MetricsWriter::open(&self.out.join("metrics.jsonl"), self.start)?;
        let mut metrics = Vec::new();
        let mut evals = Vec::new();
        if self.start == 0 {
            evals.extend(self.evaluate_all(0)?);
        }
        for s in self.start..cfg.total_steps {
            let started = Instant::now();
            let old = self.params.snapshot();
            let opt_before = self.opt.clone();
            let m = match self.step(s, &old, started) {
                Ok(m) => m,
                Err(e @ LabError::NonFinite(_)) => {
                    self.checkpoint(&self.out.join("ckpt_last_good"), s, &old, &opt_before)?;
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            writer.write(&m)?;
            metrics.push(m);
            let k = s + 1;
            if k % cfg.checkpoint_every == 0 && k < cfg.total_steps {
                self.checkpoint(&checkpoint_file(&self.out, k), k, &self.params, &self.opt)?;
            }
            if k % cfg.eval_every == 0 || k == cfg.total_steps {
                evals.extend(self.evaluate_all(k)?);
            }
        }
        self.checkpoint(
            &self.out.join("ckpt_final"),
            cfg.total_steps,
            &self.params,
            &self.opt,
        )?;
        Ok(TrainOutcome {
            params: self.params,
            metrics,
            evals,
            output_dir: self.out,
        })
    }

    fn draw_prompts(&self, s: u64) -> Vec<&TaskInstance> {
        let mut rng = rng::stream(self.cfg.seed, &[domain::PROMPTS, s]);
        (0..self.cfg.prompts_per_step)
            .map(|_| &self.train_pool[rng.random_range(0..self.train_pool.len())])
            .collect()
    }

    fn rollouts(
        &self,
        s: u64,
        old: &PolicyParams,
        prompts: &[&TaskInstance],
    ) -> Result<Vec<Group>> {
        let cfg = self.cfg;
        let g = cfg.group_size;
        let reuse_logps = cfg.sampler.temperature == 1.0 && !cfg.sampler.greedy;
        let flat = (0..prompts.len() * g)
            .into_par_iter()
            .map(|j| {
                let (p, i) = (j / g, j % g);
                let inst = prompts[p];
                let mut stream = rng::stream(cfg.seed, &[domain::ROLLOUT, s, p as u64, i as u64]);
                let c = sample_completion(old, &inst.prompt_tokens, &cfg.sampler, &mut stream)?;
                let old_logps = if reuse_logps {
                    c.logps
                } else {
                    logprobs(old, &inst.prompt_tokens, &c.tokens)?
                };
                Ok(Rollout {
                    reward: total_reward(&c.tokens, inst.ground_truth, cfg.reward),
                    tokens: c.tokens,
                    old_logps,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut flat = flat.into_iter();
        prompts
            .iter()
            .enumerate()
            .map(|(p, inst)| {
                Group::new(
                    p,
                    inst.prompt_tokens.clone(),
                    flat.by_ref().take(g).collect(),
                )
            })
            .collect()
    }

    fn step(&mut self, s: u64, old: &PolicyParams, started: Instant) -> Result<StepMetrics> {
        let cfg = self.cfg;
        let beta = beta_at(s, &cfg.schedule)?;
        let prompts = self.draw_prompts(s);
        let groups = self.rollouts(s, old, &prompts)?;
        let rewards: Vec<_> = groups
            .iter()
            .flat_map(|g| g.rollouts.iter().map(|r| r.reward))
            .collect();
        let [(tm, ts), (am, asd), (fm, fs)] = reward_stats(&rewards);
        let mut first = None;
        if cfg.method.is_rl() {
            let ref_logps = group_logprobs(&self.reference, &groups)?;
            for _ in 0..cfg.inner_epochs {
                let mut lg =
                    loss_and_grad_with_ref(&self.params, &groups, &ref_logps, beta, cfg.clip)?;
                self.poison(s, &mut lg.grad);
                check_finite(s, lg.loss, &lg.grad)?;
                first.get_or_insert((lg.loss, lg.kl_mean, lg.clip_fraction));
                optimizer_step(&mut self.params, &lg.grad, &mut self.opt)?;
            }
        } else {
            let demos = prompts
                .iter()
                .map(|i| Ok((i.prompt_tokens.clone(), make_sft_demo(&self.vocab, i)?)))
                .collect::<Result<Vec<_>>>()?;
            for _ in 0..cfg.inner_epochs {
                let (loss, mut grad) = sft_batch_loss_and_grad(&self.params, &demos)?;
                self.poison(s, &mut grad);
                check_finite(s, loss, &grad)?;
                first.get_or_insert((loss, 0.0, 0.0));
                optimizer_step(&mut self.params, &grad, &mut self.opt)?;
            }
        }
        let (loss, kl_mean, clip_fraction) = first.expect("inner_epochs >= 1");
        let m = StepMetrics {
            step: s,
            beta,
            reward_total_mean: tm,
            reward_total_std: ts,
            reward_acc_mean: am,
            reward_acc_std: asd,
            reward_format_mean: fm,
            reward_format_std: fs,
            kl_mean,
            loss,
            clip_fraction,
            wall_clock_ms: if cfg.log_wall_clock {
                started.elapsed().as_millis() as u64
            } else {
                0
            },
        };
        if !m.is_finite() {
            return Err(LabError::NonFinite(format!("metrics at step {s}")));
        }
        Ok(m)
    }

    fn poison(&self, s: u64, grad: &mut [f64]) {
        if self.opts.inject_non_finite_at == Some(s) {
            grad[0] = f64::NAN;
        }
    }
}

fn check_finite(s: u64, loss: f64, grad: &[f64]) -> Result<()> {
    if !loss.is_finite() {
        return Err(LabError::NonFinite(format!("loss at step {s}")));
    }
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(LabError::NonFinite(format!(
            "gradient entry {i} at step {s}"
        )));
    }
    Ok(())
}
