//! Central-difference gradient checks for the GRPO-D and SFT losses.
//!
//! Each check perturbs every parameter by `±h`, re-evaluates the scalar loss,
//! and compares against the analytic gradient using
//! `|g - g_fd| / (|g| + |g_fd| + 1e-12)`.

use rand_distr::{Distribution, Normal};
use serde::Serialize;

use super::{
    group_logprobs, init_params, loss_and_grad_with_ref, loss_with_ref, sample_completion,
    sft_batch_loss, sft_batch_loss_and_grad, PolicyArch, PolicyParams, SamplerCfg,
};
use crate::grpo::{ClipCfg, Group, Rollout};
use crate::reward::RewardBreakdown;
use crate::rng::{self, domain};
use crate::tasks::{counting_prompt, make_sft_demo, Family, TaskInstance, TokenId, Vocab};
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    GrpoD,
    Sft,
}

#[derive(Debug, Clone)]
pub struct GradcheckCfg {
    pub arch: PolicyArch,
    pub seed: u64,
    pub tolerance: f64,
    pub fd_step: f64,
    pub points: usize,
    /// Negative control: scales the analytic gradient by `1 + 1e-3`.
    pub corrupt_gradient: bool,
}

impl GradcheckCfg {
    pub fn reduced(vocab_size: usize, seed: u64) -> Self {
        Self {
            arch: PolicyArch::reduced(vocab_size),
            seed,
            tolerance: 1e-4,
            fd_step: 1e-4,
            points: 3,
            corrupt_gradient: false,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TensorError {
    pub name: String,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct PointReport {
    pub loss: LossKind,
    pub point: usize,
    pub max_rel_err: f64,
    pub worst_index: usize,
    /// The worst entry re-measured with step `h / 10`; a large drop points at
    /// truncation error rather than a wrong gradient.
    pub worst_rel_err_fine: f64,
    pub tensors: Vec<TensorError>,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub points: Vec<PointReport>,
    pub passed: bool,
}

impl GradcheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.points
            .iter()
            .map(|p| p.max_rel_err)
            .fold(0.0, f64::max)
    }
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs() + 1e-12)
}

/// Compares `analytic` with central differences of `loss` around `params`.
pub fn compare(
    params: &PolicyParams,
    analytic: &[f64],
    h: f64,
    loss: impl Fn(&PolicyParams) -> Result<f64>,
) -> Result<(Vec<f64>, usize)> {
    let mut errs = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        errs.push(rel_err(
            analytic[i],
            central_difference(params, i, h, &loss)?,
        ));
    }
    let worst = (0..errs.len())
        .max_by(|&a, &b| errs[a].total_cmp(&errs[b]))
        .unwrap_or(0);
    Ok((errs, worst))
}

fn perturbed(base: &PolicyParams, std: f64, seed: u64, tag: u64) -> PolicyParams {
    let mut rng = rng::stream(seed, &[domain::GRADCHECK, tag]);
    let noise = Normal::new(0.0, std).expect("positive std");
    let mut p = base.clone();
    for v in &mut p.values {
        *v += noise.sample(&mut rng);
    }
    p
}

fn toy_instances(vocab: &Vocab, seed: u64) -> Vec<TaskInstance> {
    let grids: [(&[usize], usize); 2] = [(&[0, 1, 0, 2], 0), (&[3, 3, 1, 3], 3)];
    grids
        .iter()
        .map(|&(grid, query)| TaskInstance {
            family: Family::Counting,
            prompt_tokens: counting_prompt(vocab, grid, 2, query),
            ground_truth: grid.iter().filter(|&&s| s == query).count() as u8,
            seed,
        })
        .collect()
}

struct Point {
    params: PolicyParams,
    groups: Vec<Group>,
    ref_logps: crate::grpo::GroupLogps,
    demos: Vec<(Vec<TokenId>, Vec<TokenId>)>,
}

/// Ratios this close to `1 ± epsilon` sit on the surrogate's kink, where
/// central differences straddle two branches.
const KINK_MARGIN: f64 = 1e-3;
const MAX_RESAMPLES: u64 = 50;

fn near_kink(params: &PolicyParams, groups: &[Group], clip: ClipCfg) -> Result<bool> {
    let cur = group_logprobs(params, groups)?;
    let edges = [1.0 - clip.epsilon, 1.0 + clip.epsilon];
    Ok(groups.iter().zip(&cur).any(|(g, gl)| {
        g.rollouts.iter().zip(gl).any(|(r, l)| {
            r.old_logps.iter().zip(l).any(|(o, c)| {
                edges
                    .iter()
                    .any(|e| ((c - o).exp() - e).abs() < KINK_MARGIN)
            })
        })
    }))
}

fn build_point(cfg: &GradcheckCfg, vocab: &Vocab, point: usize, clip: ClipCfg) -> Result<Point> {
    let seed = rng::derive_seed(cfg.seed, &[domain::GRADCHECK, point as u64]);
    let base = init_params(&cfg.arch, seed)?;
    let params = perturbed(&base, 0.3, seed, 1);
    let reference = perturbed(&params, 0.08, seed, 2);
    let instances = toy_instances(vocab, seed);
    let sampler = SamplerCfg {
        temperature: 1.0,
        max_new_tokens: 8,
        greedy: false,
    };
    let mut attempt = 0;
    let groups = loop {
        let old = perturbed(&params, 0.08, seed, 3 + attempt);
        let mut groups = Vec::new();
        for (gi, inst) in instances.iter().enumerate() {
            let rollouts = (0..3u64)
                .map(|ri| {
                    let mut s = rng::stream(seed, &[domain::ROLLOUT, attempt, gi as u64, ri]);
                    let c = sample_completion(&old, &inst.prompt_tokens, &sampler, &mut s)?;
                    Ok(Rollout {
                        tokens: c.tokens,
                        old_logps: c.logps,
                        reward: RewardBreakdown {
                            acc: 0.0,
                            format: 0.0,
                            total: ((gi as u64 + ri * 2) % 3) as f64,
                        },
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            groups.push(Group::new(gi, inst.prompt_tokens.clone(), rollouts)?);
        }
        attempt += 1;
        if !near_kink(&params, &groups, clip)? || attempt == MAX_RESAMPLES {
            break groups;
        }
    };
    let ref_logps = group_logprobs(&reference, &groups)?;
    let demos = instances
        .iter()
        .map(|i| Ok((i.prompt_tokens.clone(), make_sft_demo(vocab, i)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(Point {
        params,
        groups,
        ref_logps,
        demos,
    })
}

fn central_difference(
    params: &PolicyParams,
    i: usize,
    h: f64,
    loss: impl Fn(&PolicyParams) -> Result<f64>,
) -> Result<f64> {
    let mut probe = params.clone();
    probe.values[i] += h;
    let up = loss(&probe)?;
    probe.values[i] = params.values[i] - h;
    let down = loss(&probe)?;
    Ok((up - down) / (2.0 * h))
}

fn summarize(
    cfg: &GradcheckCfg,
    loss: LossKind,
    point: usize,
    errs: &[f64],
    worst: usize,
    fine: f64,
) -> PointReport {
    let tensors = super::Layout::new(&cfg.arch)
        .tensors(&cfg.arch)
        .into_iter()
        .map(|(name, range, _)| TensorError {
            name,
            max_rel_err: errs[range].iter().copied().fold(0.0, f64::max),
        })
        .collect();
    PointReport {
        loss,
        point,
        max_rel_err: errs[worst],
        worst_index: worst,
        worst_rel_err_fine: fine,
        tensors,
    }
}

/// Runs both losses at `cfg.points` random parameter points.
pub fn run(cfg: &GradcheckCfg, vocab: &Vocab) -> Result<GradcheckReport> {
    let clip = ClipCfg { epsilon: 0.2 };
    let beta = 0.05;
    let corrupt = |mut g: Vec<f64>| {
        if cfg.corrupt_gradient {
            g.iter_mut().for_each(|x| *x *= 1.0 + 1e-3);
        }
        g
    };
    let mut points = Vec::new();
    for p in 0..cfg.points {
        let pt = build_point(cfg, vocab, p, clip)?;
        let grpo_loss = |q: &PolicyParams| loss_with_ref(q, &pt.groups, &pt.ref_logps, beta, clip);
        let grad = corrupt(
            loss_and_grad_with_ref(&pt.params, &pt.groups, &pt.ref_logps, beta, clip)?.grad,
        );
        let (errs, worst) = compare(&pt.params, &grad, cfg.fd_step, grpo_loss)?;
        let fine = rel_err(
            grad[worst],
            central_difference(&pt.params, worst, cfg.fd_step / 10.0, grpo_loss)?,
        );
        points.push(summarize(cfg, LossKind::GrpoD, p, &errs, worst, fine));

        let sft_loss = |q: &PolicyParams| sft_batch_loss(q, &pt.demos);
        let grad = corrupt(sft_batch_loss_and_grad(&pt.params, &pt.demos)?.1);
        let (errs, worst) = compare(&pt.params, &grad, cfg.fd_step, sft_loss)?;
        let fine = rel_err(
            grad[worst],
            central_difference(&pt.params, worst, cfg.fd_step / 10.0, sft_loss)?,
        );
        points.push(summarize(cfg, LossKind::Sft, p, &errs, worst, fine));
    }
    let passed = points.iter().all(|p| p.max_rel_err < cfg.tolerance);
    Ok(GradcheckReport {
        tolerance: cfg.tolerance,
        points,
        passed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::VocabCfg;

    #[test]
    fn analytic_gradients_match_finite_differences() {
        let vocab = Vocab::new(VocabCfg::default()).unwrap();
        let report = run(&GradcheckCfg::reduced(vocab.len(), 11), &vocab).unwrap();
        for p in &report.points {
            eprintln!(
                "{:?} point {} max rel err {:.3e}",
                p.loss, p.point, p.max_rel_err
            );
        }
        assert!(report.passed, "max rel err {:.3e}", report.max_rel_err());
    }

    #[test]
    fn corrupted_gradient_is_caught() {
        let vocab = Vocab::new(VocabCfg::default()).unwrap();
        let mut cfg = GradcheckCfg::reduced(vocab.len(), 11);
        cfg.points = 1;
        cfg.corrupt_gradient = true;
        let report = run(&cfg, &vocab).unwrap();
        assert!(!report.passed);
    }
}
