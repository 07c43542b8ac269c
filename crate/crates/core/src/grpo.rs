//! Group-relative policy optimization: advantages, clipped surrogate, KL
//! penalty, and the policy step.

use coevo_autodiff::{Array, Tape};
use serde::{Deserialize, Serialize};

use crate::domain::Prompt;
use crate::error::{CoevoError, Result};
use crate::params::{Optimizer, OptimizerConfig, OptimizerKind, ParamBundle};
use crate::policy::{self, kl_on_tape, trace_on_tape, Rollout};
use crate::tokenizer::TokenGrid;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AdvantageNorm {
    /// (r − μ) / max(σ, floor)
    #[default]
    Group,
    /// r − μ
    MeanOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Surrogate {
    #[default]
    Clipped,
    /// A · log π(z), without importance ratios.
    Reinforce,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GrpoConfig {
    pub group_size: usize,
    pub clip_eps: f64,
    pub kl_beta: f64,
    pub lr: f64,
    pub sigma_floor: f64,
    pub advantage_norm: AdvantageNorm,
    pub surrogate: Surrogate,
    pub optimizer: OptimizerKind,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    /// Whether the KL reference tracks the policy as an EMA shadow.
    pub ema_reference: bool,
    pub ppo_epochs: usize,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        GrpoConfig {
            group_size: 8,
            clip_eps: 0.2,
            kl_beta: 0.05,
            lr: 1e-3,
            sigma_floor: 1e-6,
            advantage_norm: AdvantageNorm::Group,
            surrogate: Surrogate::Clipped,
            optimizer: OptimizerKind::Adamw,
            weight_decay: 0.01,
            betas: (0.9, 0.999),
            ema_reference: true,
            ppo_epochs: 1,
        }
    }
}

impl GrpoConfig {
    pub fn optimizer_config(&self) -> OptimizerConfig {
        OptimizerConfig {
            kind: self.optimizer,
            lr: self.lr,
            beta1: self.betas.0,
            beta2: self.betas.1,
            eps: 1e-8,
            weight_decay: self.weight_decay,
        }
    }
}

fn check_finite(rewards: &[f64]) -> Result<()> {
    if rewards.len() < 2 {
        return Err(CoevoError::invalid("a group needs at least 2 rewards"));
    }
    if rewards.iter().any(|r| !r.is_finite()) {
        return Err(CoevoError::invalid("non-finite reward in group"));
    }
    Ok(())
}

/// A_i = (r_i − μ) / max(σ, floor) with population σ; all zeros when σ ≤ floor.
pub fn group_advantages(rewards: &[f64], sigma_floor: f64) -> Result<Vec<f64>> {
    check_finite(rewards)?;
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
    let sigma = var.sqrt();
    if sigma <= sigma_floor {
        return Ok(vec![0.0; rewards.len()]);
    }
    let denom = sigma.max(sigma_floor);
    Ok(rewards.iter().map(|r| (r - mean) / denom).collect())
}

pub fn mean_only_advantages(rewards: &[f64]) -> Result<Vec<f64>> {
    check_finite(rewards)?;
    let mean = rewards.iter().sum::<f64>() / rewards.len() as f64;
    Ok(rewards.iter().map(|r| r - mean).collect())
}

/// clip(ρ, 1−ε, 1+ε), returning ρ itself whenever |ρ − 1| ≤ ε.
pub fn clip_ratio(ratio: f64, eps: f64) -> f64 {
    if (ratio - 1.0).abs() <= eps {
        ratio
    } else if ratio > 1.0 {
        1.0 + eps
    } else {
        1.0 - eps
    }
}

/// min(ρ·A, clip(ρ, 1±ε)·A)
pub fn clipped_surrogate(ratio: f64, advantage: f64, eps: f64) -> f64 {
    (ratio * advantage).min(clip_ratio(ratio, eps) * advantage)
}

/// G rollouts of one prompt with their rewards and detached advantages.
#[derive(Clone, Debug, PartialEq)]
pub struct RolloutGroup {
    pub prompt: Prompt,
    pub rollouts: Vec<Rollout>,
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
    pub old_log_probs: Vec<f64>,
}

impl RolloutGroup {
    pub fn new(prompt: Prompt, rollouts: Vec<Rollout>, rewards: Vec<f64>, config: &GrpoConfig) -> Result<Self> {
        if rollouts.len() != rewards.len() {
            return Err(CoevoError::invalid("one reward per rollout required"));
        }
        let advantages = match config.advantage_norm {
            AdvantageNorm::Group => group_advantages(&rewards, config.sigma_floor)?,
            AdvantageNorm::MeanOnly => mean_only_advantages(&rewards)?,
        };
        let old_log_probs = rollouts.iter().map(Rollout::log_prob).collect();
        Ok(RolloutGroup {
            prompt,
            rollouts,
            rewards,
            advantages,
            old_log_probs,
        })
    }

    pub fn tokens(&self) -> Vec<TokenGrid> {
        self.rollouts.iter().map(|r| r.tokens).collect()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Stage1Stats {
    pub loss: f64,
    pub surrogate: f64,
    pub kl: f64,
    pub clip_fraction: f64,
    pub mean_reward: f64,
    pub reward_std: f64,
}

fn flatten(groups: &[RolloutGroup]) -> (Vec<usize>, Vec<TokenGrid>, Vec<f64>, Vec<f64>) {
    let mut prompts = Vec::new();
    let mut seqs = Vec::new();
    let mut adv = Vec::new();
    let mut old = Vec::new();
    for g in groups {
        for (i, r) in g.rollouts.iter().enumerate() {
            prompts.push(g.prompt.id);
            seqs.push(r.tokens);
            adv.push(g.advantages[i]);
            old.push(g.old_log_probs[i]);
        }
    }
    (prompts, seqs, adv, old)
}

/// Teacher-forced reference log-softmax over the groups' rollouts, in the
/// layout `policy_loss_on_tape` expects.
pub fn reference_trace(groups: &[RolloutGroup], reference: &ParamBundle) -> Result<Vec<Vec<f64>>> {
    let (prompts, seqs, _, _) = flatten(groups);
    policy::log_softmax_trace(reference, &prompts, &seqs)
}

/// Builds −[mean clipped surrogate − β·mean KL] with the policy bound on `tape`.
/// `reference` comes from [`reference_trace`]. Returns the loss node and its
/// diagnostics.
pub fn policy_loss_on_tape(
    tape: &mut Tape,
    policy: &crate::params::BoundParams,
    groups: &[RolloutGroup],
    reference: &[Vec<f64>],
    config: &GrpoConfig,
) -> Result<(coevo_autodiff::Var, Stage1Stats)> {
    if groups.is_empty() {
        return Err(CoevoError::invalid("policy loss needs at least one group"));
    }
    let (prompts, seqs, adv, old) = flatten(groups);
    let n = seqs.len();
    let trace = trace_on_tape(tape, policy, &prompts, &seqs)?;
    let a = tape.constant(Array::vector(adv));

    let (surr, clip_fraction) = match config.surrogate {
        Surrogate::Clipped => {
            let old_v = tape.constant(Array::vector(old));
            let diff = tape.sub(trace.log_prob, old_v)?;
            let ratio = tape.exp(diff);
            let clipped_count = tape
                .value(ratio)
                .data()
                .iter()
                .filter(|r| (*r - 1.0).abs() > config.clip_eps)
                .count();
            let unclipped = tape.mul(ratio, a)?;
            let c = tape.clamp(ratio, 1.0 - config.clip_eps, 1.0 + config.clip_eps);
            let clipped = tape.mul(c, a)?;
            (tape.minimum(unclipped, clipped)?, clipped_count as f64 / n as f64)
        }
        Surrogate::Reinforce => (tape.mul(trace.log_prob, a)?, 0.0),
    };
    let surr = tape.mean(surr);
    let kl = kl_on_tape(tape, &trace, reference)?;
    let kl = tape.mean(kl);
    let pen = tape.scale(kl, config.kl_beta);
    let objective = tape.sub(surr, pen)?;
    let loss = tape.neg(objective);

    let rewards: Vec<f64> = groups.iter().flat_map(|g| g.rewards.iter().copied()).collect();
    let mean_reward = rewards.iter().sum::<f64>() / n as f64;
    let reward_std = (rewards.iter().map(|r| (r - mean_reward).powi(2)).sum::<f64>() / n as f64).sqrt();
    let stats = Stage1Stats {
        loss: tape.value(loss).item(),
        surrogate: tape.value(surr).item(),
        kl: tape.value(kl).item(),
        clip_fraction,
        mean_reward,
        reward_std,
    };
    Ok((loss, stats))
}

pub fn policy_loss(
    groups: &[RolloutGroup],
    policy: &ParamBundle,
    reference: &ParamBundle,
    config: &GrpoConfig,
) -> Result<Stage1Stats> {
    let mut tape = Tape::new();
    let bound = policy.bind(&mut tape, false);
    Ok(policy_loss_on_tape(&mut tape, &bound, groups, &reference_trace(groups, reference)?, config)?.1)
}

/// Loss value and its gradient with respect to every policy array.
pub fn policy_loss_and_grad(
    groups: &[RolloutGroup],
    policy: &ParamBundle,
    reference: &ParamBundle,
    config: &GrpoConfig,
) -> Result<(Stage1Stats, ParamBundle)> {
    loss_and_grad(groups, policy, &reference_trace(groups, reference)?, config)
}

fn loss_and_grad(
    groups: &[RolloutGroup],
    policy: &ParamBundle,
    reference: &[Vec<f64>],
    config: &GrpoConfig,
) -> Result<(Stage1Stats, ParamBundle)> {
    let mut tape = Tape::new();
    let bound = policy.bind(&mut tape, true);
    let (loss, stats) = policy_loss_on_tape(&mut tape, &bound, groups, reference, config)?;
    Ok((stats, bound.gradients(&tape.backward(loss)?)))
}

/// Gradient step(s) on the policy. Only `policy` and `opt` are touched.
pub fn policy_step(
    groups: &[RolloutGroup],
    policy: &mut ParamBundle,
    reference: &ParamBundle,
    config: &GrpoConfig,
    opt: &mut Optimizer,
) -> Result<Stage1Stats> {
    let mut first = None;
    let reference = reference_trace(groups, reference)?;
    for _ in 0..config.ppo_epochs.max(1) {
        let (stats, grads) = loss_and_grad(groups, policy, &reference, config)?;
        if !stats.loss.is_finite() {
            return Err(CoevoError::NonFinite {
                what: format!("policy loss (surrogate {}, kl {})", stats.surrogate, stats.kl),
                step: opt.steps(),
            });
        }
        opt.step(policy, &grads)?;
        first.get_or_insert(stats);
    }
    Ok(first.expect("at least one epoch"))
}
