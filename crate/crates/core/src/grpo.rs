//! Objective math for GRPO-D over plain log-probabilities.
//!
//! - group-relative advantages `(r_i - mean r) / std r` (population std),
//! - the dynamic KL weight: from `beta_mid` down to `beta_min` over the first
//!   `w` steps, then linearly up to `beta_max` at step `t`,
//! - the clipped surrogate `min(ratio * A, clip(ratio, 1-eps, 1+eps) * A)`,
//! - the k3 estimator `rho - ln rho - 1` with `rho = pi_ref / pi_theta`,
//! - the loss: minus the group mean of per-rollout token means of
//!   `surrogate - beta(s) * kl`, averaged over groups with equal weight.
//!
//! No model code lives here; the policy module feeds log-probabilities in and
//! takes per-token loss gradients back out.

use serde::{Deserialize, Serialize};

use crate::reward::RewardBreakdown;
use crate::tasks::TokenId;
use crate::{LabError, Result};

/// Standard deviations below this produce all-zero advantages.
pub const STD_FLOOR: f64 = 1e-8;
pub const DEFAULT_CLIP_EPSILON: f64 = 0.2;

/// One sampled completion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rollout {
    pub tokens: Vec<TokenId>,
    /// Per-token log-probabilities under the sampling policy.
    pub old_logps: Vec<f64>,
    pub reward: RewardBreakdown,
}

/// `G` rollouts for one prompt with their normalized advantages.
#[derive(Debug, Clone, PartialEq)]
pub struct Group {
    pub prompt_id: usize,
    pub prompt_tokens: Vec<TokenId>,
    pub rollouts: Vec<Rollout>,
    /// One advantage per rollout, shared by all of its tokens.
    pub advantages: Vec<f64>,
}

impl Group {
    /// Builds a group and normalizes the rollouts' total rewards.
    pub fn new(
        prompt_id: usize,
        prompt_tokens: Vec<TokenId>,
        rollouts: Vec<Rollout>,
    ) -> Result<Self> {
        let rewards: Vec<f64> = rollouts.iter().map(|r| r.reward.total).collect();
        let advantages = normalize_advantages(&rewards)?;
        let group = Self {
            prompt_id,
            prompt_tokens,
            rollouts,
            advantages,
        };
        group.check()?;
        Ok(group)
    }

    pub fn len(&self) -> usize {
        self.rollouts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rollouts.is_empty()
    }

    fn check(&self) -> Result<()> {
        if self.rollouts.len() < 2 {
            return Err(LabError::Contract(format!(
                "group {} has {} rollouts; need at least 2",
                self.prompt_id,
                self.rollouts.len()
            )));
        }
        if self.advantages.len() != self.rollouts.len() {
            return Err(LabError::Contract(
                "advantages/rollouts length mismatch".into(),
            ));
        }
        for (i, r) in self.rollouts.iter().enumerate() {
            if r.tokens.is_empty() || r.tokens.len() != r.old_logps.len() {
                return Err(LabError::Contract(format!(
                    "group {} rollout {i}: {} tokens, {} old log-probs",
                    self.prompt_id,
                    r.tokens.len(),
                    r.old_logps.len()
                )));
            }
        }
        Ok(())
    }
}

/// Dynamic KL weight schedule. A constant weight is `beta_min == beta_max`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KlSchedule {
    pub beta_min: f64,
    pub beta_max: f64,
    /// Exploration steps `w`.
    pub exploration_steps: u64,
    /// Total steps `t`.
    pub total_steps: u64,
}

impl KlSchedule {
    pub fn constant(beta: f64, exploration_steps: u64, total_steps: u64) -> Self {
        Self {
            beta_min: beta,
            beta_max: beta,
            exploration_steps,
            total_steps,
        }
    }

    /// Schedule with `w = round(0.3 t)`.
    pub fn dynamic(beta_min: f64, beta_max: f64, total_steps: u64) -> Self {
        let w = ((total_steps as f64) * 0.3).round().max(1.0) as u64;
        Self {
            beta_min,
            beta_max,
            exploration_steps: w.min(total_steps.saturating_sub(1)).max(1),
            total_steps,
        }
    }

    pub fn beta_mid(&self) -> f64 {
        (self.beta_min + self.beta_max) / 2.0
    }

    pub fn is_constant(&self) -> bool {
        self.beta_min == self.beta_max
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if !(self.beta_min.is_finite() && self.beta_min >= 0.0) {
            errs.push(format!(
                "beta_min must be finite and >= 0, got {}",
                self.beta_min
            ));
        }
        if !(self.beta_max.is_finite() && self.beta_max >= self.beta_min) {
            errs.push(format!(
                "beta_max must be finite and >= beta_min, got {} < {}",
                self.beta_max, self.beta_min
            ));
        }
        if self.exploration_steps < 1 || self.exploration_steps >= self.total_steps {
            errs.push(format!(
                "need 1 <= exploration_steps < total_steps, got w={} t={}",
                self.exploration_steps, self.total_steps
            ));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(LabError::Config(errs.join("; ")))
        }
    }
}

/// KL weight at optimizer step `s` (0-based).
///
/// The first branch is evaluated as `beta_min + (beta_mid - beta_min) * (w - s) / w`,
/// algebraically the same line, so that both branches return exactly
/// `beta_min` at `s = w`.
pub fn beta_at(s: u64, cfg: &KlSchedule) -> Result<f64> {
    let (w, t) = (cfg.exploration_steps, cfg.total_steps);
    if s > t {
        return Err(LabError::Contract(format!(
            "step {s} beyond schedule end {t}"
        )));
    }
    if w == 0 || w >= t {
        return Err(LabError::Contract(format!("invalid schedule w={w} t={t}")));
    }
    Ok(if s <= w {
        cfg.beta_min + (cfg.beta_mid() - cfg.beta_min) * ((w - s) as f64 / w as f64)
    } else {
        cfg.beta_min + (cfg.beta_max - cfg.beta_min) * ((s - w) as f64 / (t - w) as f64)
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipCfg {
    pub epsilon: f64,
}

impl Default for ClipCfg {
    fn default() -> Self {
        Self {
            epsilon: DEFAULT_CLIP_EPSILON,
        }
    }
}

impl ClipCfg {
    pub fn validate(&self) -> Result<()> {
        if self.epsilon > 0.0 && self.epsilon < 1.0 {
            Ok(())
        } else {
            Err(LabError::Config(format!(
                "clip epsilon must lie in (0, 1), got {}",
                self.epsilon
            )))
        }
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Population standard deviation.
pub fn pop_std(xs: &[f64]) -> f64 {
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64).sqrt()
}

pub fn normalize_advantages(rewards: &[f64]) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(LabError::Contract(format!(
            "advantage normalization needs G >= 2, got {}",
            rewards.len()
        )));
    }
    if let Some(r) = rewards.iter().find(|r| !r.is_finite()) {
        return Err(LabError::Contract(format!("non-finite reward {r}")));
    }
    let m = mean(rewards);
    let sd = pop_std(rewards);
    if sd < STD_FLOOR {
        return Ok(vec![0.0; rewards.len()]);
    }
    Ok(rewards.iter().map(|r| (r - m) / sd).collect())
}

/// k3 estimate of `KL(pi_theta || pi_ref)` from one token's log-probs.
///
/// # Panics
/// On non-finite input.
pub fn kl_estimate(logp_ref: f64, logp_cur: f64) -> f64 {
    kl_estimate_with_grad(logp_ref, logp_cur).0
}

/// `(kl, d kl / d logp_cur)`.
pub fn kl_estimate_with_grad(logp_ref: f64, logp_cur: f64) -> (f64, f64) {
    assert!(
        logp_ref.is_finite() && logp_cur.is_finite(),
        "kl_estimate needs finite log-probs, got ref={logp_ref} cur={logp_cur}"
    );
    let log_rho = logp_ref - logp_cur;
    let rho = log_rho.exp();
    // exp(x) - x - 1 loses everything to cancellation near 0.
    let kl = if log_rho.abs() < 1e-5 {
        log_rho * log_rho * (0.5 + log_rho / 6.0)
    } else {
        rho - log_rho - 1.0
    };
    (kl.max(0.0), 1.0 - rho)
}

/// Value of the clipped surrogate for one token.
pub fn per_token_surrogate(logp_cur: f64, logp_old: f64, advantage: f64, clip: ClipCfg) -> f64 {
    surrogate_with_grad(logp_cur, logp_old, advantage, clip).value
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurrogateEval {
    pub value: f64,
    /// Derivative with respect to `logp_cur`.
    pub grad: f64,
    /// The clipped term was strictly smaller, so the gradient is zero.
    pub clipped: bool,
}

pub fn surrogate_with_grad(
    logp_cur: f64,
    logp_old: f64,
    advantage: f64,
    clip: ClipCfg,
) -> SurrogateEval {
    let ratio = (logp_cur - logp_old).exp();
    let clipped_ratio = ratio.clamp(1.0 - clip.epsilon, 1.0 + clip.epsilon);
    let raw = ratio * advantage;
    let bounded = clipped_ratio * advantage;
    if bounded < raw {
        SurrogateEval {
            value: bounded,
            grad: 0.0,
            clipped: true,
        }
    } else {
        SurrogateEval {
            value: raw,
            grad: raw,
            clipped: false,
        }
    }
}

/// Per-token log-probs indexed `[group][rollout][token]`.
pub type GroupLogps = Vec<Vec<Vec<f64>>>;

/// Loss value plus per-token loss gradients and diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveTerms {
    pub loss: f64,
    /// `d loss / d logp_cur`, indexed like the inputs.
    pub token_grads: GroupLogps,
    /// Mean k3 estimate over all tokens.
    pub kl_mean: f64,
    /// Share of tokens whose surrogate took the clipped branch.
    pub clip_fraction: f64,
}

fn check_aligned(groups: &[Group], logps: &GroupLogps, what: &str) -> Result<()> {
    if logps.len() != groups.len() {
        return Err(LabError::Contract(format!(
            "{what}: {} groups of log-probs for {} groups",
            logps.len(),
            groups.len()
        )));
    }
    for (g, (group, lg)) in groups.iter().zip(logps).enumerate() {
        if lg.len() != group.rollouts.len() {
            return Err(LabError::Contract(format!(
                "{what}: group {g} rollout count mismatch"
            )));
        }
        for (i, (r, l)) in group.rollouts.iter().zip(lg).enumerate() {
            if l.len() != r.tokens.len() {
                return Err(LabError::Contract(format!(
                    "{what}: group {g} rollout {i} has {} log-probs for {} tokens",
                    l.len(),
                    r.tokens.len()
                )));
            }
        }
    }
    Ok(())
}

/// Evaluates the loss with weight `beta` and its per-token gradients.
///
/// Sums run sequentially in group, rollout, token order.
pub fn objective(
    groups: &[Group],
    cur_logps: &GroupLogps,
    ref_logps: &GroupLogps,
    beta: f64,
    clip: ClipCfg,
) -> Result<ObjectiveTerms> {
    if groups.is_empty() {
        return Err(LabError::Contract("objective over zero groups".into()));
    }
    for g in groups {
        g.check()?;
    }
    check_aligned(groups, cur_logps, "current")?;
    check_aligned(groups, ref_logps, "reference")?;
    let n_groups = groups.len() as f64;
    let mut loss = 0.0;
    let mut kl_sum = 0.0;
    let mut clipped = 0usize;
    let mut n_tokens = 0usize;
    let mut token_grads = Vec::with_capacity(groups.len());
    for (gi, group) in groups.iter().enumerate() {
        let g_size = group.rollouts.len() as f64;
        let mut group_sum = 0.0;
        let mut group_grads = Vec::with_capacity(group.rollouts.len());
        for (ri, rollout) in group.rollouts.iter().enumerate() {
            let adv = group.advantages[ri];
            let cur = &cur_logps[gi][ri];
            let refl = &ref_logps[gi][ri];
            let len = rollout.tokens.len() as f64;
            let weight = 1.0 / (n_groups * g_size * len);
            let mut rollout_sum = 0.0;
            let mut grads = Vec::with_capacity(cur.len());
            for t in 0..cur.len() {
                let s = surrogate_with_grad(cur[t], rollout.old_logps[t], adv, clip);
                let (kl, dkl) = kl_estimate_with_grad(refl[t], cur[t]);
                rollout_sum += s.value - beta * kl;
                kl_sum += kl;
                clipped += s.clipped as usize;
                n_tokens += 1;
                grads.push(-weight * (s.grad - beta * dkl));
            }
            group_sum += rollout_sum / len;
            group_grads.push(grads);
        }
        loss += -group_sum / g_size;
        token_grads.push(group_grads);
    }
    Ok(ObjectiveTerms {
        loss: loss / n_groups,
        token_grads,
        kl_mean: kl_sum / n_tokens as f64,
        clip_fraction: clipped as f64 / n_tokens as f64,
    })
}

/// The GRPO-D loss at step `s`.
pub fn grpo_d_loss(
    groups: &[Group],
    cur_logps: &GroupLogps,
    ref_logps: &GroupLogps,
    s: u64,
    schedule: &KlSchedule,
    clip: ClipCfg,
) -> Result<f64> {
    let beta = beta_at(s, schedule)?;
    Ok(objective(groups, cur_logps, ref_logps, beta, clip)?.loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn counting_regime() -> KlSchedule {
        KlSchedule {
            beta_min: 0.04,
            beta_max: 0.1,
            exploration_steps: 300,
            total_steps: 1000,
        }
    }

    #[test]
    fn advantage_examples() {
        assert_eq!(normalize_advantages(&[1.0, 0.0]).unwrap(), vec![1.0, -1.0]);
        assert_eq!(
            normalize_advantages(&[1.0, 1.0, 1.0]).unwrap(),
            vec![0.0; 3]
        );
        let a = normalize_advantages(&[2.0, 1.0, 0.0]).unwrap();
        let want = 1.0 / (2.0f64 / 3.0).sqrt();
        assert!((a[0] - want).abs() < 1e-12 && a[1].abs() < 1e-12 && (a[2] + want).abs() < 1e-12);
        assert!((a[0] - 1.224745).abs() < 1e-6);
        assert!(matches!(
            normalize_advantages(&[1.0]),
            Err(LabError::Contract(_))
        ));
        assert!(normalize_advantages(&[1.0, f64::NAN]).is_err());
    }

    #[test]
    fn schedule_examples() {
        let cfg = counting_regime();
        assert!((beta_at(0, &cfg).unwrap() - 0.07).abs() < 1e-15);
        assert_eq!(beta_at(300, &cfg).unwrap(), 0.04);
        assert!((beta_at(1000, &cfg).unwrap() - 0.1).abs() < 1e-15);
        assert!((beta_at(650, &cfg).unwrap() - 0.07).abs() < 1e-15);
        assert!(matches!(beta_at(1001, &cfg), Err(LabError::Contract(_))));
    }

    #[test]
    fn constant_schedule_is_flat() {
        let cfg = KlSchedule::constant(0.04, 30, 100);
        for s in 0..=100 {
            assert_eq!(beta_at(s, &cfg).unwrap(), 0.04);
        }
    }

    #[test]
    fn schedule_validation() {
        assert!(counting_regime().validate().is_ok());
        let mut c = counting_regime();
        c.exploration_steps = 1000;
        assert!(c.validate().is_err());
        let mut c = counting_regime();
        c.beta_max = 0.01;
        assert!(c.validate().is_err());
    }

    #[test]
    fn kl_examples() {
        assert_eq!(kl_estimate(-1.3, -1.3), 0.0);
        let ln2 = 2f64.ln();
        assert!((kl_estimate(ln2, 0.0) - (2.0 - ln2 - 1.0)).abs() < 1e-15);
        assert!((kl_estimate(ln2, 0.0) - 0.306853).abs() < 1e-6);
        assert!((kl_estimate(-ln2, 0.0) - 0.193147).abs() < 1e-6);
    }

    #[test]
    #[should_panic]
    fn kl_rejects_non_finite() {
        kl_estimate(f64::NEG_INFINITY, 0.0);
    }

    #[test]
    fn surrogate_examples() {
        let clip = ClipCfg { epsilon: 0.2 };
        for a in [-2.0, -0.5, 0.0, 0.7, 3.0] {
            assert_eq!(per_token_surrogate(-0.4, -0.4, a, clip), a);
        }
        assert!((per_token_surrogate(1.5f64.ln(), 0.0, 1.0, clip) - 1.2).abs() < 1e-12);
        assert!((per_token_surrogate(0.5f64.ln(), 0.0, -1.0, clip) + 0.8).abs() < 1e-12);
    }

    fn rollout(n: usize, old: f64, total: f64) -> Rollout {
        Rollout {
            tokens: vec![8; n],
            old_logps: vec![old; n],
            reward: RewardBreakdown {
                acc: 0.0,
                format: 0.0,
                total,
            },
        }
    }

    #[test]
    fn loss_examples() {
        let clip = ClipCfg::default();
        let sched = KlSchedule::constant(0.04, 1, 10);
        // All policies equal, all advantages zero.
        let g = Group::new(
            0,
            vec![],
            vec![rollout(3, -1.0, 1.0), rollout(2, -1.0, 1.0)],
        )
        .unwrap();
        let lp = vec![vec![vec![-1.0; 3], vec![-1.0; 2]]];
        assert_eq!(grpo_d_loss(&[g], &lp, &lp, 0, &sched, clip).unwrap(), 0.0);

        // Rewards [1, 0] give advantages [1, -1] which cancel.
        let g = Group::new(
            0,
            vec![],
            vec![rollout(3, -0.5, 1.0), rollout(4, -0.5, 0.0)],
        )
        .unwrap();
        assert_eq!(g.advantages, vec![1.0, -1.0]);
        let lp = vec![vec![vec![-0.5; 3], vec![-0.5; 4]]];
        assert!(grpo_d_loss(&[g], &lp, &lp, 5, &sched, clip).unwrap().abs() < 1e-15);

        // Two tokens, ratio 1, A = 1, rho = 2 on both, beta = 0.1.
        let g = Group {
            prompt_id: 0,
            prompt_tokens: vec![],
            rollouts: vec![rollout(2, -1.0, 0.0), rollout(2, -1.0, 0.0)],
            advantages: vec![1.0, 1.0],
        };
        let cur = vec![vec![vec![-1.0; 2], vec![-1.0; 2]]];
        let refl = vec![vec![vec![-1.0 + 2f64.ln(); 2], vec![-1.0 + 2f64.ln(); 2]]];
        let sched = KlSchedule::constant(0.1, 1, 10);
        let loss = grpo_d_loss(&[g], &cur, &refl, 0, &sched, clip).unwrap();
        assert!((loss + 0.969315).abs() < 1e-6, "{loss}");
    }

    #[test]
    fn misaligned_logps_are_rejected() {
        let g = Group::new(
            0,
            vec![],
            vec![rollout(3, -1.0, 1.0), rollout(2, -1.0, 0.0)],
        )
        .unwrap();
        let bad = vec![vec![vec![-1.0; 3], vec![-1.0; 3]]];
        let good = vec![vec![vec![-1.0; 3], vec![-1.0; 2]]];
        let sched = KlSchedule::constant(0.0, 1, 10);
        assert!(grpo_d_loss(&[g.clone()], &bad, &good, 0, &sched, ClipCfg::default()).is_err());
        assert!(grpo_d_loss(&[g], &good, &bad, 0, &sched, ClipCfg::default()).is_err());
    }

    #[test]
    fn token_grads_match_finite_differences() {
        let clip = ClipCfg { epsilon: 0.2 };
        let g = Group {
            prompt_id: 0,
            prompt_tokens: vec![],
            rollouts: vec![rollout(3, -1.0, 0.0), rollout(2, -2.0, 0.0)],
            advantages: vec![0.8, -0.8],
        };
        let groups = [g];
        let cur = vec![vec![vec![-0.9, -1.05, -1.5], vec![-1.7, -2.6]]];
        let refl = vec![vec![vec![-1.2, -0.7, -1.1], vec![-2.2, -1.9]]];
        let beta = 0.07;
        let terms = objective(&groups, &cur, &refl, beta, clip).unwrap();
        let h = 1e-6;
        for r in 0..2 {
            for t in 0..cur[0][r].len() {
                let mut p = cur.clone();
                p[0][r][t] += h;
                let mut m = cur.clone();
                m[0][r][t] -= h;
                let fd = (objective(&groups, &p, &refl, beta, clip).unwrap().loss
                    - objective(&groups, &m, &refl, beta, clip).unwrap().loss)
                    / (2.0 * h);
                assert!((fd - terms.token_grads[0][r][t]).abs() < 1e-8);
            }
        }
    }

    proptest! {
        #[test]
        fn advantages_are_standardized(rewards in prop::collection::vec(-5.0f64..5.0, 2..64)) {
            prop_assume!(pop_std(&rewards) > 1e-3);
            let a = normalize_advantages(&rewards).unwrap();
            prop_assert!(mean(&a).abs() < 1e-9);
            prop_assert!((pop_std(&a) - 1.0).abs() < 1e-9);
        }

        #[test]
        fn kl_is_nonnegative(a in -30.0f64..0.0, b in -30.0f64..0.0) {
            let k = kl_estimate(a, b);
            prop_assert!(k >= 0.0);
            if a != b { prop_assert!(k > 0.0); }
        }

        #[test]
        fn schedule_is_piecewise_monotone(bmin in 0.0f64..0.5, span in 1e-3f64..0.5, t in 3u64..400, frac in 0.05f64..0.95) {
            let w = ((t as f64 * frac) as u64).clamp(1, t - 1);
            let cfg = KlSchedule { beta_min: bmin, beta_max: bmin + span, exploration_steps: w, total_steps: t };
            for s in 0..w { prop_assert!(beta_at(s + 1, &cfg).unwrap() < beta_at(s, &cfg).unwrap()); }
            for s in w..t { prop_assert!(beta_at(s + 1, &cfg).unwrap() > beta_at(s, &cfg).unwrap()); }
        }
    }
}
