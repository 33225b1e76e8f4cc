//! Group relative policy optimization.
//!
//! For a group of `G` rollouts sharing one condition, with rewards `R_i`:
//!
//! ```text
//! A_i = R_i - mean_j R_j
//! r_i = exp(sum_t logp_new(o_i,t) - logp_old(o_i,t))
//! J   = mean_i min(r_i A_i, clip(r_i, 1 - eps, 1 + eps) A_i) - beta * mean_i KL_i
//! KL_i = sum_t logp_new(o_i,t) - logp_ref(o_i,t)
//! ```
//!
//! The optimizer ascends `J` by descending `loss = -J`.

use crate::optim::{AdamConfig, AdamW};
use crate::policy::PolicyError;
use crate::svg::TokenSequence;
use serde::{Deserialize, Serialize};

/// Anything that assigns per-token log-probabilities to a token sequence.
pub trait LogProbModel: Sync {
    type Condition: Sync;

    /// One entry per token. `max_len` is the cap the sequence was sampled under.
    fn token_logprobs(
        &self,
        cond: &Self::Condition,
        tokens: &[u32],
        temperature: f64,
        max_len: Option<usize>,
    ) -> Result<Vec<f64>, PolicyError>;
}

/// A differentiable policy with a flat parameter vector.
pub trait Policy: LogProbModel {
    fn params(&self) -> &[f64];
    fn params_mut(&mut self) -> &mut [f64];

    /// Computes per-token log-probabilities, asks `weights` for one weight per
    /// token given those values, and adds `sum_t w_t * d logp_t / d params` to
    /// `grad`. Returns the log-probabilities.
    fn add_logprob_grad(
        &self,
        cond: &Self::Condition,
        tokens: &[u32],
        temperature: f64,
        max_len: Option<usize>,
        weights: &mut dyn FnMut(&[f64]) -> Vec<f64>,
        grad: &mut [f64],
    ) -> Result<Vec<f64>, PolicyError>;
}

#[derive(Debug, thiserror::Error)]
pub enum GrpoError {
    #[error("non-finite gradient or objective")]
    NonFiniteGradient,
    #[error("invalid group: {0}")]
    InvalidGroup(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rollout {
    pub tokens: TokenSequence,
    pub old_logprobs: Vec<f64>,
    pub reward: f64,
    /// Length cap the rollout was sampled under; it shapes the grammar mask.
    pub max_len: Option<usize>,
}

impl Rollout {
    pub fn new(
        tokens: TokenSequence,
        old_logprobs: Vec<f64>,
        reward: f64,
        max_len: Option<usize>,
    ) -> Result<Self, GrpoError> {
        if old_logprobs.len() != tokens.len() {
            return Err(GrpoError::InvalidGroup(format!(
                "{} log-probs for {} tokens",
                old_logprobs.len(),
                tokens.len()
            )));
        }
        if !reward.is_finite() {
            return Err(GrpoError::InvalidGroup("reward is not finite".into()));
        }
        Ok(Self {
            tokens,
            old_logprobs,
            reward,
            max_len,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutGroup {
    pub condition_id: usize,
    pub rollouts: Vec<Rollout>,
}

impl RolloutGroup {
    pub fn new(condition_id: usize, rollouts: Vec<Rollout>) -> Result<Self, GrpoError> {
        if rollouts.len() < 2 {
            return Err(GrpoError::InvalidGroup(format!(
                "group needs at least 2 rollouts, got {}",
                rollouts.len()
            )));
        }
        Ok(Self {
            condition_id,
            rollouts,
        })
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.rollouts.iter().map(|r| r.reward).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RatioMode {
    #[default]
    Sequence,
    PerToken,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Optimizer steps in a full run.
    pub steps: usize,
    pub group_size: usize,
    pub conditions_per_step: usize,
    pub clip_eps: f64,
    pub kl_beta: f64,
    pub lr0: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_every: usize,
    pub temperature: f64,
    pub std_normalize: bool,
    pub ratio_mode: RatioMode,
    pub length_weight_start: f64,
    pub length_weight_end: f64,
    pub length_weight_ramp_steps: usize,
    pub dyn_len_threshold: usize,
    /// Optimizer updates per batch of rollouts. Above 1 the later updates are off-policy and clipping engages.
    pub inner_updates: usize,
    pub weight_decay: f64,
    pub max_grad_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            group_size: 16,
            conditions_per_step: 8,
            clip_eps: 0.4,
            kl_beta: 0.0,
            lr0: 1e-5,
            lr_decay_factor: 0.7,
            lr_decay_every: 100,
            temperature: 1.1,
            std_normalize: false,
            ratio_mode: RatioMode::Sequence,
            length_weight_start: 0.1,
            length_weight_end: 0.5,
            length_weight_ramp_steps: 200,
            dyn_len_threshold: 8,
            inner_updates: 1,
            weight_decay: 1e-2,
            max_grad_norm: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), GrpoError> {
        let bad = |m: &str| Err(GrpoError::InvalidConfig(m.into()));
        if self.group_size < 2 {
            return bad("group_size must be at least 2");
        }
        if self.conditions_per_step == 0 {
            return bad("conditions_per_step must be positive");
        }
        if !(self.clip_eps > 0.0) {
            return bad("clip_eps must be positive");
        }
        if !(self.kl_beta >= 0.0 && self.kl_beta.is_finite()) {
            return bad("kl_beta must be finite and non-negative");
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad("temperature must be positive");
        }
        if !(self.lr0 >= 0.0 && self.lr0.is_finite())
            || !(self.lr_decay_factor > 0.0)
            || self.lr_decay_every == 0
        {
            return bad("learning-rate schedule must be finite with a positive decay period");
        }
        if self.inner_updates == 0 {
            return bad("inner_updates must be positive");
        }
        if !(self.max_grad_norm > 0.0) || !(self.weight_decay >= 0.0) {
            return bad("max_grad_norm must be positive and weight_decay non-negative");
        }
        Ok(())
    }

    pub fn objective(&self) -> ObjectiveConfig {
        ObjectiveConfig {
            clip_eps: self.clip_eps,
            kl_beta: self.kl_beta,
            temperature: self.temperature,
            ratio_mode: self.ratio_mode,
            std_normalize: self.std_normalize,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            weight_decay: self.weight_decay,
            max_grad_norm: self.max_grad_norm,
            ..AdamConfig::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub mean_reward: f64,
    pub reward_std: f64,
    pub mean_kl: f64,
    pub mean_seq_length: f64,
    pub surrogate_value: f64,
    pub grad_norm: f64,
}

/// Group-centered advantages, optionally divided by `max(std, 1e-8)`.
pub fn compute_advantages(group: &RolloutGroup, std_normalize: bool) -> Vec<f64> {
    advantages_of(&group.rewards(), std_normalize)
}

pub fn advantages_of(rewards: &[f64], std_normalize: bool) -> Vec<f64> {
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let centered: Vec<f64> = rewards.iter().map(|r| r - mean).collect();
    if !std_normalize {
        return centered;
    }
    let std = (centered.iter().map(|a| a * a).sum::<f64>() / n).sqrt();
    let denom = std.max(1e-8);
    centered.into_iter().map(|a| a / denom).collect()
}

/// Per-token log-ratio list; sums to the sequence log-ratio.
pub fn log_ratio<M: LogProbModel + ?Sized>(
    policy: &M,
    rollout: &Rollout,
    cond: &M::Condition,
    temperature: f64,
) -> Result<Vec<f64>, PolicyError> {
    let new = policy.token_logprobs(cond, rollout.tokens.tokens(), temperature, rollout.max_len)?;
    Ok(new
        .iter()
        .zip(&rollout.old_logprobs)
        .map(|(a, b)| a - b)
        .collect())
}

pub fn clipped_term(ratio: f64, advantage: f64, eps: f64) -> f64 {
    (ratio * advantage).min(ratio.clamp(1.0 - eps, 1.0 + eps) * advantage)
}

/// `mean_i min(r_i A_i, clip(r_i, 1 - eps, 1 + eps) A_i)`.
pub fn grpo_surrogate(ratios: &[f64], advantages: &[f64], eps: f64) -> f64 {
    assert_eq!(
        ratios.len(),
        advantages.len(),
        "ratios and advantages differ in length"
    );
    ratios
        .iter()
        .zip(advantages)
        .map(|(&r, &a)| clipped_term(r, a, eps))
        .sum::<f64>()
        / ratios.len() as f64
}

/// `d clipped_term / d ratio`: the unclipped slope where the min picks `r A`
/// or the ratio sits inside the clip range, zero elsewhere.
fn clipped_slope(ratio: f64, advantage: f64, eps: f64) -> f64 {
    let inside = (1.0 - eps..=1.0 + eps).contains(&ratio);
    let unclipped_smaller = ratio * advantage < ratio.clamp(1.0 - eps, 1.0 + eps) * advantage;
    if inside || unclipped_smaller {
        advantage
    } else {
        0.0
    }
}

/// Sampled-trajectory estimate `sum_t logp_policy - logp_reference`.
pub fn kl_estimate<M, R>(
    policy: &M,
    reference: &R,
    rollout: &Rollout,
    cond: &M::Condition,
    temperature: f64,
) -> Result<f64, PolicyError>
where
    M: LogProbModel + ?Sized,
    R: LogProbModel<Condition = M::Condition> + ?Sized,
{
    let p = policy.token_logprobs(cond, rollout.tokens.tokens(), temperature, rollout.max_len)?;
    let q =
        reference.token_logprobs(cond, rollout.tokens.tokens(), temperature, rollout.max_len)?;
    Ok(p.iter().zip(&q).map(|(a, b)| a - b).sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    pub clip_eps: f64,
    pub kl_beta: f64,
    pub temperature: f64,
    pub ratio_mode: RatioMode,
    pub std_normalize: bool,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        TrainConfig::default().objective()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveOutput {
    /// Mean clipped surrogate.
    pub surrogate: f64,
    /// Mean KL estimate; 0 when `kl_beta` is 0 (the reference is not consulted).
    pub kl: f64,
    /// `-(surrogate - beta * kl)`.
    pub loss: f64,
    /// Gradient of `loss`.
    pub grad: Vec<f64>,
}

/// Loss and analytic gradient over a batch of groups. `conditions[g]` is the
/// condition of `groups[g]`. Every rollout weighs equally in the means.
pub fn objective_and_grad<P: Policy>(
    policy: &P,
    conditions: &[&P::Condition],
    groups: &[RolloutGroup],
    cfg: &ObjectiveConfig,
    reference: Option<&dyn LogProbModel<Condition = P::Condition>>,
) -> Result<ObjectiveOutput, GrpoError> {
    if conditions.len() != groups.len() {
        return Err(GrpoError::InvalidGroup(format!(
            "{} conditions for {} groups",
            conditions.len(),
            groups.len()
        )));
    }
    let total: usize = groups.iter().map(|g| g.rollouts.len()).sum();
    if total == 0 {
        return Err(GrpoError::InvalidGroup("no rollouts".into()));
    }
    let use_kl = cfg.kl_beta != 0.0;
    let reference = match (use_kl, reference) {
        (true, None) => {
            return Err(GrpoError::InvalidConfig(
                "kl_beta > 0 needs a reference policy".into(),
            ))
        }
        (true, Some(r)) => Some(r),
        (false, _) => None,
    };
    let m = total as f64;
    let eps = cfg.clip_eps;
    let mut grad = vec![0.0; policy.params().len()];
    let mut surrogate = 0.0;
    let mut kl_sum = 0.0;
    for (cond, group) in conditions.iter().zip(groups) {
        let adv = compute_advantages(group, cfg.std_normalize);
        for (rollout, &a) in group.rollouts.iter().zip(&adv) {
            let ref_lp = match reference {
                Some(r) => Some(r.token_logprobs(
                    cond,
                    rollout.tokens.tokens(),
                    cfg.temperature,
                    rollout.max_len,
                )?),
                None => None,
            };
            let old = &rollout.old_logprobs;
            let mut term = 0.0;
            let mut kl = 0.0;
            let mut weights = |lp: &[f64]| -> Vec<f64> {
                let mut w = match cfg.ratio_mode {
                    RatioMode::Sequence => {
                        let r = lp.iter().zip(old).map(|(a, b)| a - b).sum::<f64>().exp();
                        term = clipped_term(r, a, eps);
                        vec![clipped_slope(r, a, eps) * r / m; lp.len()]
                    }
                    RatioMode::PerToken => {
                        let n = lp.len().max(1) as f64;
                        lp.iter()
                            .zip(old)
                            .map(|(x, y)| {
                                let r = (x - y).exp();
                                term += clipped_term(r, a, eps) / n;
                                clipped_slope(r, a, eps) * r / (n * m)
                            })
                            .collect()
                    }
                };
                if let Some(q) = &ref_lp {
                    kl = lp.iter().zip(q).map(|(x, y)| x - y).sum();
                    w.iter_mut().for_each(|wt| *wt -= cfg.kl_beta / m);
                }
                // Descend the loss: negate the ascent weights.
                w.iter_mut().for_each(|wt| *wt = -*wt);
                w
            };
            policy.add_logprob_grad(
                cond,
                rollout.tokens.tokens(),
                cfg.temperature,
                rollout.max_len,
                &mut weights,
                &mut grad,
            )?;
            surrogate += term / m;
            kl_sum += kl / m;
        }
    }
    let loss = -(surrogate - cfg.kl_beta * kl_sum);
    if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(GrpoError::NonFiniteGradient);
    }
    Ok(ObjectiveOutput {
        surrogate,
        kl: kl_sum,
        loss,
        grad,
    })
}

/// `lr0 * factor^floor(step / every)`.
pub fn lr_schedule(step: usize, cfg: &TrainConfig) -> f64 {
    cfg.lr0 * cfg.lr_decay_factor.powi((step / cfg.lr_decay_every) as i32)
}

/// Sampling cap for a batch: the longest ground truth plus `t`.
pub fn dynamic_max_length(gt_lengths: &[usize], t: usize) -> usize {
    gt_lengths
        .iter()
        .copied()
        .max()
        .expect("at least one ground-truth length")
        + t
}

/// Linear ramp from `length_weight_start` to `length_weight_end`, flat afterwards.
pub fn length_weight_schedule(step: usize, cfg: &TrainConfig) -> f64 {
    if cfg.length_weight_ramp_steps == 0 || step >= cfg.length_weight_ramp_steps {
        return cfg.length_weight_end;
    }
    let f = step as f64 / cfg.length_weight_ramp_steps as f64;
    cfg.length_weight_start + f * (cfg.length_weight_end - cfg.length_weight_start)
}

/// One optimizer update on the batch. `step` selects the learning rate.
/// Parameters are left untouched when the gradient is not finite.
pub fn train_step<P: Policy>(
    policy: &mut P,
    conditions: &[&P::Condition],
    groups: &[RolloutGroup],
    cfg: &TrainConfig,
    optimizer: &mut AdamW,
    step: usize,
    reference: Option<&dyn LogProbModel<Condition = P::Condition>>,
) -> Result<StepStats, GrpoError> {
    let out = objective_and_grad(policy, conditions, groups, &cfg.objective(), reference)?;
    let rewards: Vec<f64> = groups.iter().flat_map(|g| g.rewards()).collect();
    let n = rewards.len() as f64;
    let mean_reward = rewards.iter().sum::<f64>() / n;
    let reward_std = (rewards
        .iter()
        .map(|r| (r - mean_reward).powi(2))
        .sum::<f64>()
        / n)
        .sqrt();
    let mean_seq_length = groups
        .iter()
        .flat_map(|g| &g.rollouts)
        .map(|r| r.tokens.len() as f64)
        .sum::<f64>()
        / n;
    let mut grad = out.grad;
    let grad_norm = if grad.iter().all(|g| *g == 0.0) {
        0.0
    } else {
        optimizer.step(policy.params_mut(), &mut grad, lr_schedule(step, cfg))
    };
    Ok(StepStats {
        mean_reward,
        reward_std,
        mean_kl: out.kl,
        mean_seq_length,
        surrogate_value: out.surrogate,
        grad_norm,
    })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::svg::Vocab;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::atomic::{AtomicUsize, Ordering};

    /// One-step policy over two tokens with logits `theta`.
    pub(crate) struct Bandit {
        pub theta: Vec<f64>,
    }

    impl Bandit {
        fn logprobs(&self, temperature: f64) -> [f64; 2] {
            let z = [self.theta[0] / temperature, self.theta[1] / temperature];
            let m = z[0].max(z[1]);
            let lse = m + ((z[0] - m).exp() + (z[1] - m).exp()).ln();
            [z[0] - lse, z[1] - lse]
        }
    }

    impl LogProbModel for Bandit {
        type Condition = ();
        fn token_logprobs(
            &self,
            _: &(),
            tokens: &[u32],
            temperature: f64,
            _: Option<usize>,
        ) -> Result<Vec<f64>, PolicyError> {
            Ok(tokens
                .iter()
                .map(|&t| self.logprobs(temperature)[t as usize])
                .collect())
        }
    }

    impl Policy for Bandit {
        fn params(&self) -> &[f64] {
            &self.theta
        }
        fn params_mut(&mut self) -> &mut [f64] {
            &mut self.theta
        }
        fn add_logprob_grad(
            &self,
            cond: &(),
            tokens: &[u32],
            temperature: f64,
            max_len: Option<usize>,
            weights: &mut dyn FnMut(&[f64]) -> Vec<f64>,
            grad: &mut [f64],
        ) -> Result<Vec<f64>, PolicyError> {
            let lp = self.token_logprobs(cond, tokens, temperature, max_len)?;
            let w = weights(&lp);
            let p = self.logprobs(temperature).map(f64::exp);
            for (&t, wt) in tokens.iter().zip(w) {
                for v in 0..2 {
                    let ind = if v == t as usize { 1.0 } else { 0.0 };
                    grad[v] += wt * (ind - p[v]) / temperature;
                }
            }
            Ok(lp)
        }
    }

    struct Counting<'a> {
        inner: &'a Bandit,
        calls: AtomicUsize,
    }

    impl LogProbModel for Counting<'_> {
        type Condition = ();
        fn token_logprobs(
            &self,
            c: &(),
            tokens: &[u32],
            t: f64,
            m: Option<usize>,
        ) -> Result<Vec<f64>, PolicyError> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            self.inner.token_logprobs(c, tokens, t, m)
        }
    }

    fn rollout(token: u32, old_lp: f64, reward: f64) -> Rollout {
        Rollout::new(
            TokenSequence::new(vec![token], Vocab::MiniGrammar).unwrap(),
            vec![old_lp],
            reward,
            None,
        )
        .unwrap()
    }

    fn bandit_group(b: &Bandit, picks: &[(u32, f64)]) -> RolloutGroup {
        let lp = b.logprobs(1.0);
        RolloutGroup::new(
            0,
            picks
                .iter()
                .map(|&(t, r)| rollout(t, lp[t as usize], r))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn advantage_examples() {
        assert_eq!(
            advantages_of(&[1.0, 0.0, -1.0], false),
            vec![1.0, 0.0, -1.0]
        );
        assert_eq!(advantages_of(&[0.3; 5], false), vec![0.0; 5]);
        assert_eq!(advantages_of(&[2.0, 0.0], false), vec![1.0, -1.0]);
        assert_eq!(advantages_of(&[2.0, 0.0], true), vec![1.0, -1.0]);
        assert_eq!(advantages_of(&[0.3; 3], true), vec![0.0; 3]);
    }

    #[test]
    fn group_needs_two_rollouts() {
        assert!(RolloutGroup::new(0, vec![rollout(0, 0.0, 1.0)]).is_err());
        assert!(Rollout::new(
            TokenSequence::new(vec![0], Vocab::MiniGrammar).unwrap(),
            vec![],
            0.0,
            None
        )
        .is_err());
    }

    #[test]
    fn surrogate_examples() {
        assert_eq!(grpo_surrogate(&[2.0], &[1.0], 0.4), 1.4);
        assert_eq!(grpo_surrogate(&[0.2], &[-1.0], 0.4), -0.6);
        assert_eq!(grpo_surrogate(&[1.0; 3], &[1.0, 0.0, -1.0], 0.4), 0.0);
    }

    #[test]
    fn log_ratio_examples() {
        let b = Bandit {
            theta: vec![0.3, -0.2],
        };
        let r = rollout(1, b.logprobs(1.0)[1], 0.0);
        assert_eq!(log_ratio(&b, &r, &(), 1.0).unwrap(), vec![0.0]);
        // Two-token vocabulary: p(1) goes from 1/4 to 1/2 when the logit gap closes.
        let old = Bandit {
            theta: vec![3f64.ln(), 0.0],
        };
        let new = Bandit {
            theta: vec![0.0, 0.0],
        };
        let r = rollout(1, old.logprobs(1.0)[1], 0.0);
        assert!((log_ratio(&new, &r, &(), 1.0).unwrap()[0] - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn kl_estimator_converges_to_closed_form() {
        // p = (0.5, 0.25, 0.25), q = (0.25, 0.5, 0.25); samples from p.
        let p = [0.5f64, 0.25, 0.25];
        let q = [0.25f64, 0.5, 0.25];
        let exact: f64 = p.iter().zip(&q).map(|(a, b)| a * (a / b).ln()).sum();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 200_000;
        let samples: Vec<f64> = (0..n)
            .map(|_| {
                let u: f64 = rng.gen();
                let k = if u < 0.5 {
                    0
                } else if u < 0.75 {
                    1
                } else {
                    2
                };
                (p[k] / q[k]).ln()
            })
            .collect();
        let mean = samples.iter().sum::<f64>() / n as f64;
        let sd = (samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
        assert!((mean - exact).abs() < 3.0 * sd / (n as f64).sqrt());
        let b = Bandit {
            theta: vec![0.4, 1.0],
        };
        assert_eq!(
            kl_estimate(&b, &b, &rollout(0, 0.0, 0.0), &(), 1.0).unwrap(),
            0.0
        );
    }

    #[test]
    fn beta_zero_never_queries_the_reference() {
        let b = Bandit {
            theta: vec![0.1, -0.4],
        };
        let counting = Counting {
            inner: &b,
            calls: AtomicUsize::new(0),
        };
        let g = bandit_group(&b, &[(0, 1.0), (1, 0.0), (1, 0.5)]);
        let mut policy = Bandit {
            theta: b.theta.clone(),
        };
        let cfg = TrainConfig {
            lr0: 0.1,
            ..Default::default()
        };
        let mut opt = AdamW::new(2, cfg.adam());
        train_step(
            &mut policy,
            &[&()],
            std::slice::from_ref(&g),
            &cfg,
            &mut opt,
            0,
            Some(&counting),
        )
        .unwrap();
        assert_eq!(counting.calls.load(Ordering::SeqCst), 0);
        let cfg = TrainConfig {
            kl_beta: 0.04,
            ..cfg
        };
        train_step(
            &mut policy,
            &[&()],
            std::slice::from_ref(&g),
            &cfg,
            &mut opt,
            1,
            Some(&counting),
        )
        .unwrap();
        assert_eq!(counting.calls.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn equal_rewards_leave_parameters_unchanged() {
        let mut b = Bandit {
            theta: vec![0.7, -0.1],
        };
        let g = bandit_group(&b, &[(0, 0.5), (1, 0.5), (0, 0.5)]);
        let cfg = TrainConfig {
            lr0: 0.1,
            ..Default::default()
        };
        let mut opt = AdamW::new(2, cfg.adam());
        let stats = train_step(&mut b, &[&()], &[g], &cfg, &mut opt, 0, None).unwrap();
        assert_eq!(b.theta, vec![0.7, -0.1]);
        assert_eq!(stats.grad_norm, 0.0);
        assert_eq!(stats.surrogate_value, 0.0);
    }

    #[test]
    fn update_matches_hand_derived_step() {
        // theta = (0, 0): p = (1/2, 1/2). Rollouts pick 0 (reward 1) and 1 (reward 0),
        // so A = (1/2, -1/2). On-policy d J / d theta_0 =
        // (1/2)[A_0 (1 - p_0) + A_1 (0 - p_0)] = (1/2)(1/4 + 1/4) = 1/4, and -1/4 for theta_1.
        let mut b = Bandit {
            theta: vec![0.0, 0.0],
        };
        let g = bandit_group(&b, &[(0, 1.0), (1, 0.0)]);
        let cfg = TrainConfig {
            temperature: 1.0,
            lr0: 0.01,
            weight_decay: 0.0,
            ..Default::default()
        };
        let out = objective_and_grad(&b, &[&()], std::slice::from_ref(&g), &cfg.objective(), None)
            .unwrap();
        assert!((out.grad[0] + 0.25).abs() < 1e-12 && (out.grad[1] - 0.25).abs() < 1e-12);
        let mut opt = AdamW::new(2, cfg.adam());
        train_step(&mut b, &[&()], &[g], &cfg, &mut opt, 0, None).unwrap();
        // First Adam step moves each coordinate by lr against the loss gradient sign.
        assert!((b.theta[0] - 0.01).abs() < 1e-9 && (b.theta[1] + 0.01).abs() < 1e-9);
    }

    #[test]
    fn schedules() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_schedule(0, &cfg), 1e-5);
        assert_eq!(lr_schedule(99, &cfg), 1e-5);
        assert!((lr_schedule(150, &cfg) - 7e-6).abs() < 1e-18);
        assert!((lr_schedule(250, &cfg) - 4.9e-6).abs() < 1e-18);
        assert_eq!(dynamic_max_length(&[120, 300, 80], 64), 364);
        assert_eq!(dynamic_max_length(&[50], 0), 50);
        let cfg = TrainConfig {
            length_weight_start: 0.1,
            length_weight_end: 0.5,
            length_weight_ramp_steps: 200,
            ..Default::default()
        };
        assert_eq!(length_weight_schedule(0, &cfg), 0.1);
        assert!((length_weight_schedule(100, &cfg) - 0.3).abs() < 1e-12);
        assert_eq!(length_weight_schedule(200, &cfg), 0.5);
        assert_eq!(length_weight_schedule(10_000, &cfg), 0.5);
    }

    #[test]
    fn config_validation() {
        TrainConfig::default().validate().unwrap();
        assert!(TrainConfig {
            group_size: 1,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            clip_eps: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            temperature: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        let parsed: TrainConfig =
            toml::from_str("group_size = 4\nratio_mode = \"per_token\"\n").unwrap();
        assert_eq!(parsed.group_size, 4);
        assert_eq!(parsed.ratio_mode, RatioMode::PerToken);
        assert!(toml::from_str::<TrainConfig>("grup_size = 4\n").is_err());
    }

    #[test]
    fn kl_requires_reference() {
        let b = Bandit {
            theta: vec![0.0, 0.0],
        };
        let g = bandit_group(&b, &[(0, 1.0), (1, 0.0)]);
        let cfg = ObjectiveConfig {
            kl_beta: 0.1,
            ..Default::default()
        };
        assert!(matches!(
            objective_and_grad(&b, &[&()], &[g], &cfg, None),
            Err(GrpoError::InvalidConfig(_))
        ));
    }

    proptest! {
        #[test]
        fn advantages_sum_to_zero(rewards in proptest::collection::vec(-1e6f64..1e6, 2..64), norm in any::<bool>()) {
            let a = advantages_of(&rewards, norm);
            let scale = rewards.iter().map(|r| r.abs()).fold(1.0, f64::max);
            prop_assert!(a.iter().sum::<f64>().abs() < 1e-9 * scale * rewards.len() as f64);
        }

        #[test]
        fn advantages_shift_and_scale(rewards in proptest::collection::vec(-10f64..10.0, 2..32), c in -100f64..100.0, k in 0.01f64..100.0) {
            let a = advantages_of(&rewards, false);
            let shifted: Vec<f64> = rewards.iter().map(|r| r + c).collect();
            for (x, y) in a.iter().zip(advantages_of(&shifted, false)) {
                prop_assert!((x - y).abs() < 1e-9);
            }
            let scaled: Vec<f64> = rewards.iter().map(|r| r * k).collect();
            for (x, y) in a.iter().zip(advantages_of(&scaled, false)) {
                prop_assert!((x * k - y).abs() < 1e-9 * k.max(1.0));
            }
        }

        #[test]
        fn on_policy_surrogate_is_zero(rewards in proptest::collection::vec(-5f64..5.0, 2..32)) {
            let a = advantages_of(&rewards, false);
            prop_assert!(grpo_surrogate(&vec![1.0; a.len()], &a, 0.4).abs() < 1e-9);
        }

        #[test]
        fn bandit_gradient_matches_finite_differences(
            t0 in -2f64..2.0, t1 in -2f64..2.0, o0 in -2f64..2.0, o1 in -2f64..2.0,
            picks in proptest::collection::vec((0u32..2, -1f64..1.0), 2..6),
            per_token in any::<bool>(), beta in prop_oneof![Just(0.0), Just(0.04)],
        ) {
            let old = Bandit { theta: vec![o0, o1] };
            let g = bandit_group(&old, &picks);
            let reference = Bandit { theta: vec![0.2, -0.3] };
            let cfg = ObjectiveConfig {
                kl_beta: beta,
                ratio_mode: if per_token { RatioMode::PerToken } else { RatioMode::Sequence },
                temperature: 1.0,
                ..Default::default()
            };
            let r: Option<&dyn LogProbModel<Condition = ()>> = Some(&reference);
            let at = |th: Vec<f64>| objective_and_grad(&Bandit { theta: th }, &[&()], std::slice::from_ref(&g), &cfg, r).unwrap();
            let out = at(vec![t0, t1]);
            let h = 1e-6;
            for i in 0..2 {
                let mut up = vec![t0, t1];
                let mut dn = vec![t0, t1];
                up[i] += h;
                dn[i] -= h;
                let numeric = (at(up).loss - at(dn).loss) / (2.0 * h);
                prop_assert!((numeric - out.grad[i]).abs() < 1e-6 * (1.0 + numeric.abs()), "{} vs {}", numeric, out.grad[i]);
            }
        }
    }
}
