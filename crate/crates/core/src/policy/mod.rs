//! The compact autoregressive token policy.
//!
//! A pre-norm causal transformer (default: one block, `d_model` 32, two
//! heads) stored as one flat `f64` vector. Gradients are exact reverse-mode
//! derivatives; everything runs in double precision.
//!
//! Batch operations fan out over rollouts with rayon and reduce in a fixed
//! order, so results do not depend on the thread count of the calling pool.

mod adam;
mod arch;
mod checkpoint;
pub mod gradcheck;
pub mod model;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::grpo::{self, ClipCfg, Group, GroupLogps, KlSchedule};
use crate::rng::{self, domain, Stream};
use crate::tasks::{TokenId, Vocab};
use crate::{LabError, Result};

pub use adam::{optimizer_step, AdamCfg, OptimizerState};
pub use arch::{BlockLayout, Layout, PolicyArch, TensorKind};
pub use checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, CheckpointManifest, CKPT_FORMAT, CKPT_VERSION,
};

/// Policy weights plus the shape they belong to.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    arch: PolicyArch,
    layout: Layout,
    pub values: Vec<f64>,
    /// Number of optimizer updates applied since initialization.
    pub version: u64,
}

impl PolicyParams {
    pub fn from_values(arch: PolicyArch, values: Vec<f64>) -> Result<Self> {
        arch.validate()?;
        let layout = Layout::new(&arch);
        if values.len() != layout.total {
            return Err(LabError::Contract(format!(
                "parameter vector has {} entries, arch needs {}",
                values.len(),
                layout.total
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(LabError::NonFinite("parameter vector".into()));
        }
        Ok(Self {
            arch,
            layout,
            values,
            version: 0,
        })
    }

    pub fn arch(&self) -> &PolicyArch {
        &self.arch
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Deep copy, detached from later updates to `self`.
    pub fn snapshot(&self) -> PolicyParams {
        self.clone()
    }
}

/// Deterministic initialization. The output head starts near zero so the
/// first next-token distributions are close to uniform.
pub fn init_params(arch: &PolicyArch, seed: u64) -> Result<PolicyParams> {
    arch.validate()?;
    let layout = Layout::new(arch);
    let mut values = vec![0.0; layout.total];
    let mut rng = rng::stream(seed, &[domain::INIT]);
    for (_, range, kind) in layout.tensors(arch) {
        let (center, std) = match kind {
            TensorKind::Embedding => (0.0, 0.3),
            TensorKind::Weight { fan_in } => (0.0, 1.0 / (fan_in as f64).sqrt()),
            TensorKind::Head => (0.0, 0.02),
            TensorKind::Bias => (0.0, 0.02),
            TensorKind::Gain => (1.0, 0.02),
        };
        let dist = Normal::new(0.0, std).expect("positive std");
        for v in &mut values[range] {
            *v = center + dist.sample(&mut rng);
        }
    }
    PolicyParams::from_values(*arch, values)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerCfg {
    pub temperature: f64,
    pub max_new_tokens: usize,
    /// Argmax decoding; the temperature is ignored.
    pub greedy: bool,
}

impl Default for SamplerCfg {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            max_new_tokens: 48,
            greedy: false,
        }
    }
}

impl SamplerCfg {
    pub fn greedy(max_new_tokens: usize) -> Self {
        Self {
            temperature: 1.0,
            max_new_tokens,
            greedy: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(LabError::Config(format!(
                "sampler temperature must be > 0, got {}",
                self.temperature
            )));
        }
        if self.max_new_tokens == 0 {
            return Err(LabError::Config("max_new_tokens must be >= 1".into()));
        }
        Ok(())
    }
}

/// Sampled tokens with the log-probabilities they were drawn with.
#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    pub tokens: Vec<TokenId>,
    pub logps: Vec<f64>,
}

fn check_tokens(arch: &PolicyArch, tokens: &[TokenId]) -> Result<()> {
    match tokens.iter().find(|&&t| t as usize >= arch.vocab_size) {
        Some(t) => Err(LabError::Contract(format!(
            "token id {t} outside vocabulary of {}",
            arch.vocab_size
        ))),
        None => Ok(()),
    }
}

fn check_sequence(arch: &PolicyArch, prompt: &[TokenId], completion: &[TokenId]) -> Result<()> {
    if prompt.is_empty() {
        return Err(LabError::Contract("empty prompt".into()));
    }
    if prompt.len() + completion.len() > arch.max_context {
        return Err(LabError::Contract(format!(
            "prompt {} + completion {} exceeds context {}",
            prompt.len(),
            completion.len(),
            arch.max_context
        )));
    }
    check_tokens(arch, prompt)?;
    check_tokens(arch, completion)
}

/// Temperature sampling until `<eos>` or the length cap.
pub fn sample_completion(
    params: &PolicyParams,
    prompt: &[TokenId],
    sampler: &SamplerCfg,
    rng: &mut Stream,
) -> Result<Completion> {
    sampler.validate()?;
    if prompt.len() + sampler.max_new_tokens > params.arch.max_context {
        return Err(LabError::Contract(format!(
            "prompt {} + max_new_tokens {} exceeds context {}",
            prompt.len(),
            sampler.max_new_tokens,
            params.arch.max_context
        )));
    }
    check_sequence(&params.arch, prompt, &[])?;
    let mut dec = model::Decoder::new(&params.arch, &params.layout, &params.values);
    for &t in &prompt[..prompt.len() - 1] {
        dec.feed(t);
    }
    let mut last = prompt[prompt.len() - 1];
    let mut out = Completion {
        tokens: Vec::with_capacity(sampler.max_new_tokens),
        logps: Vec::with_capacity(sampler.max_new_tokens),
    };
    for _ in 0..sampler.max_new_tokens {
        let logits = dec.feed(last);
        let (tok, lp) = if sampler.greedy {
            let lps = model::log_softmax(logits);
            let best = argmax(&lps);
            (best as TokenId, lps[best])
        } else {
            let scaled: Vec<f64> = logits.iter().map(|l| l / sampler.temperature).collect();
            let lps = model::log_softmax(&scaled);
            let tok = draw(&lps, rng);
            (tok as TokenId, lps[tok])
        };
        out.tokens.push(tok);
        out.logps.push(lp);
        if tok == Vocab::EOS {
            break;
        }
        last = tok;
    }
    Ok(out)
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn draw(logps: &[f64], rng: &mut Stream) -> usize {
    let u: f64 = rng.random();
    let mut cum = 0.0;
    let mut last_live = 0;
    for (i, &lp) in logps.iter().enumerate() {
        let p = lp.exp();
        if p > 0.0 {
            last_live = i;
        }
        cum += p;
        if u < cum {
            return i;
        }
    }
    last_live
}

/// Runs `prompt ++ completion[..n-1]` and returns the trace plus the log-prob
/// of each completion token.
fn forward_completion(
    params: &PolicyParams,
    prompt: &[TokenId],
    completion: &[TokenId],
) -> (model::Trace, Vec<f64>) {
    let mut seq = Vec::with_capacity(prompt.len() + completion.len());
    seq.extend_from_slice(prompt);
    seq.extend_from_slice(&completion[..completion.len().saturating_sub(1)]);
    let trace = model::forward(&params.arch, &params.layout, &params.values, &seq);
    let v = params.arch.vocab_size;
    let logps = completion
        .iter()
        .enumerate()
        .map(|(j, &tok)| model::log_softmax(trace.logits_at(prompt.len() - 1 + j, v))[tok as usize])
        .collect();
    (trace, logps)
}

/// Gradient of `sum_j coeffs[j] * logp_j` for one completion.
fn backward_completion(
    params: &PolicyParams,
    prompt_len: usize,
    completion: &[TokenId],
    trace: &model::Trace,
    coeffs: &[f64],
) -> Vec<f64> {
    let v = params.arch.vocab_size;
    let mut dlogits = vec![0.0; trace.len() * v];
    for (j, (&tok, &c)) in completion.iter().zip(coeffs).enumerate() {
        if c == 0.0 {
            continue;
        }
        let pos = prompt_len - 1 + j;
        let lps = model::log_softmax(trace.logits_at(pos, v));
        let row = &mut dlogits[pos * v..(pos + 1) * v];
        for (r, lp) in row.iter_mut().zip(&lps) {
            *r = -c * lp.exp();
        }
        row[tok as usize] += c;
    }
    let mut grad = vec![0.0; params.layout.total];
    model::backward(
        &params.arch,
        &params.layout,
        &params.values,
        trace,
        &dlogits,
        &mut grad,
    );
    grad
}

/// `log pi(completion_t | prompt, completion_<t)` at temperature 1.
pub fn logprobs(
    params: &PolicyParams,
    prompt: &[TokenId],
    completion: &[TokenId],
) -> Result<Vec<f64>> {
    check_sequence(&params.arch, prompt, completion)?;
    if completion.is_empty() {
        return Ok(Vec::new());
    }
    Ok(forward_completion(params, prompt, completion).1)
}

/// Log-probs of every rollout in every group, computed in parallel.
pub fn group_logprobs(params: &PolicyParams, groups: &[Group]) -> Result<GroupLogps> {
    groups
        .par_iter()
        .map(|g| {
            g.rollouts
                .par_iter()
                .map(|r| logprobs(params, &g.prompt_tokens, &r.tokens))
                .collect::<Result<Vec<_>>>()
        })
        .collect()
}

/// Loss, diagnostics, and gradient from one objective evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub loss: f64,
    pub kl_mean: f64,
    pub clip_fraction: f64,
    pub grad: Vec<f64>,
}

fn sum_in_order(total: usize, parts: Vec<Vec<f64>>) -> Vec<f64> {
    let mut acc = vec![0.0; total];
    for p in parts {
        for (a, g) in acc.iter_mut().zip(&p) {
            *a += g;
        }
    }
    acc
}

/// GRPO-D loss and its exact gradient at step `s`, with the reference
/// log-probs computed from `ref_params`.
pub fn loss_and_grad(
    params: &PolicyParams,
    ref_params: &PolicyParams,
    groups: &[Group],
    s: u64,
    schedule: &KlSchedule,
    clip: ClipCfg,
) -> Result<LossGrad> {
    if ref_params.arch != params.arch {
        return Err(LabError::Contract(
            "reference policy has a different arch".into(),
        ));
    }
    let beta = grpo::beta_at(s, schedule)?;
    let ref_logps = group_logprobs(ref_params, groups)?;
    loss_and_grad_with_ref(params, groups, &ref_logps, beta, clip)
}

/// As [`loss_and_grad`] with precomputed reference log-probs and weight.
pub fn loss_and_grad_with_ref(
    params: &PolicyParams,
    groups: &[Group],
    ref_logps: &GroupLogps,
    beta: f64,
    clip: ClipCfg,
) -> Result<LossGrad> {
    let index: Vec<(usize, usize)> = groups
        .iter()
        .enumerate()
        .flat_map(|(gi, g)| (0..g.rollouts.len()).map(move |ri| (gi, ri)))
        .collect();
    for &(gi, ri) in &index {
        check_sequence(
            &params.arch,
            &groups[gi].prompt_tokens,
            &groups[gi].rollouts[ri].tokens,
        )?;
    }
    let passes: Vec<(model::Trace, Vec<f64>)> = index
        .par_iter()
        .map(|&(gi, ri)| {
            forward_completion(
                params,
                &groups[gi].prompt_tokens,
                &groups[gi].rollouts[ri].tokens,
            )
        })
        .collect();
    let mut cur: GroupLogps = groups.iter().map(|g| Vec::with_capacity(g.len())).collect();
    for (&(gi, _), (_, lp)) in index.iter().zip(&passes) {
        cur[gi].push(lp.clone());
    }
    let terms = grpo::objective(groups, &cur, ref_logps, beta, clip)?;
    let parts: Vec<Vec<f64>> = index
        .par_iter()
        .zip(passes.into_par_iter())
        .map(|(&(gi, ri), (trace, _))| {
            let g = &groups[gi];
            backward_completion(
                params,
                g.prompt_tokens.len(),
                &g.rollouts[ri].tokens,
                &trace,
                &terms.token_grads[gi][ri],
            )
        })
        .collect();
    let grad = sum_in_order(params.layout.total, parts);
    Ok(LossGrad {
        loss: terms.loss,
        kl_mean: terms.kl_mean,
        clip_fraction: terms.clip_fraction,
        grad,
    })
}

/// GRPO-D loss only, for finite-difference checks.
pub fn loss_with_ref(
    params: &PolicyParams,
    groups: &[Group],
    ref_logps: &GroupLogps,
    beta: f64,
    clip: ClipCfg,
) -> Result<f64> {
    let cur = group_logprobs(params, groups)?;
    Ok(grpo::objective(groups, &cur, ref_logps, beta, clip)?.loss)
}

/// Mean token negative log-likelihood of `gold` and its gradient.
pub fn sft_loss_and_grad(
    params: &PolicyParams,
    prompt: &[TokenId],
    gold: &[TokenId],
) -> Result<(f64, Vec<f64>)> {
    sft_batch_loss_and_grad(params, &[(prompt.to_vec(), gold.to_vec())])
}

/// Mean over demos of each demo's mean token NLL.
pub fn sft_batch_loss_and_grad(
    params: &PolicyParams,
    demos: &[(Vec<TokenId>, Vec<TokenId>)],
) -> Result<(f64, Vec<f64>)> {
    if demos.is_empty() {
        return Err(LabError::Contract("SFT batch is empty".into()));
    }
    for (p, c) in demos {
        check_sequence(&params.arch, p, c)?;
        if c.is_empty() {
            return Err(LabError::Contract("empty gold completion".into()));
        }
    }
    let n = demos.len() as f64;
    let parts: Vec<(f64, Vec<f64>)> = demos
        .par_iter()
        .map(|(p, c)| {
            let (trace, lps) = forward_completion(params, p, c);
            let len = c.len() as f64;
            let loss = -lps.iter().sum::<f64>() / len;
            let coeffs = vec![-1.0 / (len * n); c.len()];
            (
                loss,
                backward_completion(params, p.len(), c, &trace, &coeffs),
            )
        })
        .collect();
    let loss = parts.iter().map(|(l, _)| l).sum::<f64>() / n;
    let grad = sum_in_order(
        params.layout.total,
        parts.into_iter().map(|(_, g)| g).collect(),
    );
    Ok((loss, grad))
}

/// SFT loss only.
pub fn sft_batch_loss(
    params: &PolicyParams,
    demos: &[(Vec<TokenId>, Vec<TokenId>)],
) -> Result<f64> {
    let losses = demos
        .par_iter()
        .map(|(p, c)| logprobs(params, p, c).map(|lps| -lps.iter().sum::<f64>() / c.len() as f64))
        .collect::<Result<Vec<f64>>>()?;
    Ok(losses.iter().sum::<f64>() / demos.len() as f64)
}

/// Next-token distribution after `prefix`, for diagnostics and tests.
pub fn next_token_logprobs(params: &PolicyParams, prefix: &[TokenId]) -> Result<Vec<f64>> {
    check_sequence(&params.arch, prefix, &[])?;
    let trace = model::forward(&params.arch, &params.layout, &params.values, prefix);
    Ok(model::log_softmax(
        trace.logits_at(prefix.len() - 1, params.arch.vocab_size),
    ))
}
