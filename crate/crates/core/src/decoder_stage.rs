//! Decoder adaptation: reward-ranked adversarial loss, reward back-propagation,
//! reconstruction and consistency anchors, and the discriminator.

use coevo_autodiff::{Array, Tape, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{FeatureExtractor, Prompt, NUM_PATCHES, PATCH_DIM, PIXELS};
use crate::error::{CoevoError, Result};
use crate::params::{BoundParams, Optimizer, OptimizerConfig, OptimizerKind, ParamBundle};
use crate::reward::{reward_on_tape, RewardChannel};
use crate::rng;
use crate::tokenizer::{decode_on_tape, decode_patch_major, Codebook, TokenGrid};

pub const DISC_HIDDEN: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ConsistencyMetric {
    #[default]
    L2,
    Feature,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RolloutSource {
    /// Fresh samples from the policy's EMA shadow.
    #[default]
    PolicyEma,
    /// The same rollouts used by the policy stage.
    Policy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderLossConfig {
    pub lambda_r: f64,
    pub lambda_g: f64,
    pub lambda_c: f64,
    pub lambda_d: f64,
    pub tau: f64,
    pub dec_lr: f64,
    pub disc_lr: f64,
    pub consistency_metric: ConsistencyMetric,
    pub optimizer: OptimizerKind,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub discriminator: String,
    pub rollout_source: RolloutSource,
    pub decoder_every_n: usize,
}

impl Default for DecoderLossConfig {
    fn default() -> Self {
        DecoderLossConfig {
            lambda_r: 1.0,
            lambda_g: 0.5,
            lambda_c: 1.0,
            lambda_d: 0.1,
            tau: 0.1,
            dec_lr: 1e-3,
            disc_lr: 1e-3,
            consistency_metric: ConsistencyMetric::L2,
            optimizer: OptimizerKind::Adamw,
            weight_decay: 0.05,
            betas: (0.5, 0.9),
            discriminator: "patch".into(),
            rollout_source: RolloutSource::PolicyEma,
            decoder_every_n: 1,
        }
    }
}

impl DecoderLossConfig {
    fn optimizer(&self, lr: f64) -> OptimizerConfig {
        OptimizerConfig {
            kind: self.optimizer,
            lr,
            beta1: self.betas.0,
            beta2: self.betas.1,
            eps: 1e-8,
            weight_decay: self.weight_decay,
        }
    }

    pub fn decoder_optimizer(&self) -> OptimizerConfig {
        self.optimizer(self.dec_lr)
    }

    pub fn discriminator_optimizer(&self) -> OptimizerConfig {
        self.optimizer(self.disc_lr)
    }
}

/// w_i = G · softmax(r/τ)_i, max-subtracted.
pub fn rank_weights(rewards: &[f64], tau: f64, group_size: usize) -> Result<Vec<f64>> {
    if rewards.is_empty() || rewards.iter().any(|r| !r.is_finite()) {
        return Err(CoevoError::invalid("rank weights need finite rewards"));
    }
    if tau.is_nan() || tau <= 0.0 {
        return Err(CoevoError::invalid("τ must be > 0"));
    }
    let max = rewards.iter().fold(f64::NEG_INFINITY, |m, &r| m.max(r));
    let e: Vec<f64> = rewards.iter().map(|r| ((r - max) / tau).exp()).collect();
    let total: f64 = e.iter().sum();
    Ok(e.iter().map(|v| group_size as f64 * v / total).collect())
}

pub fn init_discriminator(seed: u64) -> ParamBundle {
    let mut r = rng::stream(seed, &[rng::tag::DISC_INIT]);
    let bound = (3.0 / PATCH_DIM as f64).sqrt();
    let mut d = ParamBundle::new();
    d.insert("disc_w1", Array::from_fn(&[PATCH_DIM, DISC_HIDDEN], |_| r.gen_range(-bound..bound)));
    d.insert("disc_b1", Array::zeros(&[DISC_HIDDEN]));
    // Zero output layer: every logit starts at 0.
    d.insert("disc_w2", Array::zeros(&[DISC_HIDDEN, 1]));
    d.insert("disc_b2", Array::zeros(&[1]));
    d
}

/// Per-patch MLP scores averaged into one logit per image; input `[n, 768]`.
pub fn discriminator_on_tape(tape: &mut Tape, disc: &BoundParams, images: Var) -> Result<Var> {
    let n = tape.value(images).shape()[0];
    let patches = tape.reshape(images, &[n * NUM_PATCHES, PATCH_DIM])?;
    let h = tape.matmul(patches, disc.var("disc_w1")?)?;
    let h = tape.add_row(h, disc.var("disc_b1")?)?;
    let h = tape.tanh(h);
    let o = tape.matmul(h, disc.var("disc_w2")?)?;
    let o = tape.add_row(o, disc.var("disc_b2")?)?;
    let o = tape.reshape(o, &[n, NUM_PATCHES])?;
    Ok(tape.mean_rows(o))
}

pub fn discriminator_logits(disc: &ParamBundle, images: &Array) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let d = disc.bind(&mut tape, false);
    let x = tape.constant(images.clone());
    let l = discriminator_on_tape(&mut tape, &d, x)?;
    Ok(tape.value(l).data().to_vec())
}

/// Decoded images `[n, 768]` with the decoder bound on the tape and the codebook fixed.
pub fn decode_images_on_tape(
    tape: &mut Tape,
    tokens: &[TokenGrid],
    decoder: &BoundParams,
    codebook: &Codebook,
) -> Result<Var> {
    let cb = tape.constant(codebook.entries().clone());
    let patches = decode_on_tape(tape, tokens, decoder, cb)?;
    Ok(tape.reshape(patches, &[tokens.len(), PIXELS])?)
}

/// (1/n) Σ w_i · softplus(−D(x_i)): the non-saturating generator loss with
/// detached per-sample weights. The discriminator is a constant here.
pub fn rank_gan_on_tape(tape: &mut Tape, decoded: Var, weights: &[f64], disc: &ParamBundle) -> Result<Var> {
    let d = disc.bind(tape, false);
    let logits = discriminator_on_tape(tape, &d, decoded)?;
    let neg = tape.neg(logits);
    let sp = tape.softplus(neg);
    let w = tape.constant(Array::vector(weights.to_vec()));
    let weighted = tape.mul(w, sp)?;
    Ok(tape.mean(weighted))
}

/// Plain non-saturating generator loss mean softplus(−D(x)).
pub fn generator_loss_on_tape(tape: &mut Tape, decoded: Var, disc: &ParamBundle) -> Result<Var> {
    let d = disc.bind(tape, false);
    let logits = discriminator_on_tape(tape, &d, decoded)?;
    let neg = tape.neg(logits);
    let sp = tape.softplus(neg);
    Ok(tape.mean(sp))
}

/// −mean R(D(ẑ), y) through the differentiable reward channel.
pub fn reward_bp_on_tape(
    tape: &mut Tape,
    decoded: Var,
    prompts: &[Prompt],
    channel: RewardChannel,
    extractor: &FeatureExtractor,
) -> Result<Var> {
    let r = reward_on_tape(channel, tape, extractor, decoded, prompts)?;
    let m = tape.mean(r);
    Ok(tape.neg(m))
}

/// Distance between decoded images and a constant teacher decode `[n, 768]`.
pub fn consistency_on_tape(
    tape: &mut Tape,
    decoded: Var,
    teacher_decoded: &Array,
    metric: ConsistencyMetric,
    extractor: &FeatureExtractor,
) -> Result<Var> {
    let t = tape.constant(teacher_decoded.clone());
    match metric {
        ConsistencyMetric::L2 => {
            let d = tape.sub(decoded, t)?;
            let sq = tape.square(d);
            Ok(tape.mean(sq))
        }
        ConsistencyMetric::Feature => {
            let fd = extractor.extract_on_tape(tape, decoded)?;
            let ft = extractor.extract_on_tape(tape, t)?;
            let d = tape.sub(fd, ft)?;
            let sq = tape.square(d);
            let per = tape.sum_rows(sq);
            Ok(tape.mean(per))
        }
    }
}

/// mean |x_gt − D(z_gt)| + mean softplus(−D_disc(D(z_gt))).
pub fn recon_anchor_on_tape(tape: &mut Tape, x_gt: &Array, reconstructed: Var, disc: &ParamBundle) -> Result<Var> {
    let x = tape.constant(x_gt.clone());
    let d = tape.sub(x, reconstructed)?;
    let a = tape.abs(d);
    let l1 = tape.mean(a);
    let gen = generator_loss_on_tape(tape, reconstructed, disc)?;
    Ok(tape.add(l1, gen)?)
}

/// Everything the decoder loss needs besides the decoder itself.
#[derive(Clone, Debug)]
pub struct Stage2Batch {
    /// Policy-sampled grids, prompt-major groups of equal size.
    pub tokens: Vec<TokenGrid>,
    pub prompts: Vec<Prompt>,
    /// Detached rank weights, one per sampled grid.
    pub weights: Vec<f64>,
    /// Teacher decode of `tokens`, `[n, 768]`.
    pub teacher_decoded: Array,
    pub gt_tokens: Vec<TokenGrid>,
    /// Ground-truth images, `[b, 768]` patch-major.
    pub gt_images: Array,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DecoderLossParts {
    pub reward: Option<f64>,
    pub rank_gan: Option<f64>,
    pub recon: Option<f64>,
    pub consist: Option<f64>,
    pub total: f64,
    /// Set when the reward term was requested but the channel is opaque.
    pub reward_term_disabled: bool,
}

/// Shared context of a decoder-loss build.
pub struct Stage2Context<'a> {
    pub codebook: &'a Codebook,
    pub discriminator: &'a ParamBundle,
    pub extractor: &'a FeatureExtractor,
    pub channel: RewardChannel,
    pub config: &'a DecoderLossConfig,
}

/// λ_d·L_reward + λ_g·L_rank + λ_r·L_recon + λ_c·L_consist, skipping zero weights.
pub fn decoder_loss_on_tape(
    tape: &mut Tape,
    decoder: &BoundParams,
    batch: &Stage2Batch,
    ctx: &Stage2Context<'_>,
) -> Result<(Var, DecoderLossParts)> {
    let cfg = ctx.config;
    let disabled = cfg.lambda_d != 0.0 && !ctx.channel.is_differentiable();
    let lambda_d = if disabled { 0.0 } else { cfg.lambda_d };
    if lambda_d == 0.0 && cfg.lambda_g == 0.0 && cfg.lambda_r == 0.0 && cfg.lambda_c == 0.0 {
        return Err(CoevoError::invalid("all decoder loss weights are zero"));
    }
    let mut parts = DecoderLossParts {
        reward_term_disabled: disabled,
        ..Default::default()
    };
    let needs_samples = lambda_d != 0.0 || cfg.lambda_g != 0.0 || cfg.lambda_c != 0.0;
    let decoded = if needs_samples {
        Some(decode_images_on_tape(tape, &batch.tokens, decoder, ctx.codebook)?)
    } else {
        None
    };
    let mut total: Option<Var> = None;
    let mut push = |tape: &mut Tape, term: Var, weight: f64| -> Result<f64> {
        let value = tape.value(term).item();
        let scaled = tape.scale(term, weight);
        total = Some(match total {
            None => scaled,
            Some(acc) => tape.add(acc, scaled)?,
        });
        Ok(value)
    };
    if lambda_d != 0.0 {
        let dec = decoded.expect("decoded");
        let t = reward_bp_on_tape(tape, dec, &batch.prompts, ctx.channel, ctx.extractor)?;
        parts.reward = Some(push(tape, t, lambda_d)?);
    }
    if cfg.lambda_g != 0.0 {
        let t = rank_gan_on_tape(tape, decoded.expect("decoded"), &batch.weights, ctx.discriminator)?;
        parts.rank_gan = Some(push(tape, t, cfg.lambda_g)?);
    }
    if cfg.lambda_r != 0.0 {
        let recon = decode_images_on_tape(tape, &batch.gt_tokens, decoder, ctx.codebook)?;
        let t = recon_anchor_on_tape(tape, &batch.gt_images, recon, ctx.discriminator)?;
        parts.recon = Some(push(tape, t, cfg.lambda_r)?);
    }
    if cfg.lambda_c != 0.0 {
        let t = consistency_on_tape(
            tape,
            decoded.expect("decoded"),
            &batch.teacher_decoded,
            cfg.consistency_metric,
            ctx.extractor,
        )?;
        parts.consist = Some(push(tape, t, cfg.lambda_c)?);
    }
    let total = total.expect("at least one term");
    parts.total = tape.value(total).item();
    Ok((total, parts))
}

pub fn decoder_loss_and_grad(
    decoder: &ParamBundle,
    batch: &Stage2Batch,
    ctx: &Stage2Context<'_>,
) -> Result<(DecoderLossParts, ParamBundle)> {
    let mut tape = Tape::new();
    let bound = decoder.bind(&mut tape, true);
    let (loss, parts) = decoder_loss_on_tape(&mut tape, &bound, batch, ctx)?;
    Ok((parts, bound.gradients(&tape.backward(loss)?)))
}

pub fn decoder_loss(decoder: &ParamBundle, batch: &Stage2Batch, ctx: &Stage2Context<'_>) -> Result<DecoderLossParts> {
    let mut tape = Tape::new();
    let bound = decoder.bind(&mut tape, false);
    Ok(decoder_loss_on_tape(&mut tape, &bound, batch, ctx)?.1)
}

pub fn decoder_step(
    decoder: &mut ParamBundle,
    batch: &Stage2Batch,
    ctx: &Stage2Context<'_>,
    opt: &mut Optimizer,
) -> Result<DecoderLossParts> {
    let (parts, grads) = decoder_loss_and_grad(decoder, batch, ctx)?;
    if !parts.total.is_finite() {
        return Err(CoevoError::NonFinite {
            what: format!("decoder loss {parts:?}"),
            step: opt.steps(),
        });
    }
    opt.step(decoder, &grads)?;
    Ok(parts)
}

/// Assembles a batch: teacher decodes of the samples and rank weights per group.
#[allow(clippy::too_many_arguments)]
pub fn build_batch(
    tokens: Vec<TokenGrid>,
    prompts: Vec<Prompt>,
    rewards: &[f64],
    group_size: usize,
    teacher: &ParamBundle,
    codebook: &Codebook,
    gt_tokens: Vec<TokenGrid>,
    gt_images: Array,
    tau: f64,
) -> Result<Stage2Batch> {
    if tokens.len() != rewards.len() || tokens.len() != prompts.len() || group_size == 0 || !tokens.len().is_multiple_of(group_size) {
        return Err(CoevoError::invalid("stage-2 batch must hold whole groups"));
    }
    let mut weights = Vec::with_capacity(rewards.len());
    for chunk in rewards.chunks(group_size) {
        weights.extend(rank_weights(chunk, tau, group_size)?);
    }
    let teacher_decoded = decode_patch_major(&tokens, teacher, codebook)?;
    Ok(Stage2Batch {
        tokens,
        prompts,
        weights,
        teacher_decoded,
        gt_tokens,
        gt_images,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DiscStats {
    pub loss: f64,
    pub accuracy: f64,
}

/// mean softplus(−D(real)) + mean softplus(D(fake)), with accuracy at threshold 0.
pub fn discriminator_loss_on_tape(
    tape: &mut Tape,
    disc: &BoundParams,
    real: &Array,
    fake: &Array,
) -> Result<(Var, f64)> {
    let r = tape.constant(real.clone());
    let f = tape.constant(fake.clone());
    let lr = discriminator_on_tape(tape, disc, r)?;
    let lf = discriminator_on_tape(tape, disc, f)?;
    let correct = tape.value(lr).data().iter().filter(|&&v| v > 0.0).count()
        + tape.value(lf).data().iter().filter(|&&v| v < 0.0).count();
    let accuracy = correct as f64 / (tape.value(lr).len() + tape.value(lf).len()) as f64;
    let nr = tape.neg(lr);
    let sr = tape.softplus(nr);
    let sr = tape.mean(sr);
    let sf = tape.softplus(lf);
    let sf = tape.mean(sf);
    Ok((tape.add(sr, sf)?, accuracy))
}

/// One step on the logistic real/fake loss. Returns pre-step loss and accuracy.
pub fn discriminator_step(
    real: &Array,
    fake: &Array,
    disc: &mut ParamBundle,
    opt: &mut Optimizer,
) -> Result<DiscStats> {
    let mut tape = Tape::new();
    let bound = disc.bind(&mut tape, true);
    let (loss, accuracy) = discriminator_loss_on_tape(&mut tape, &bound, real, fake)?;
    let value = tape.value(loss).item();
    if !value.is_finite() {
        return Err(CoevoError::NonFinite {
            what: "discriminator loss".into(),
            step: opt.steps(),
        });
    }
    let grads = bound.gradients(&tape.backward(loss)?);
    opt.step(disc, &grads)?;
    Ok(DiscStats { loss: value, accuracy })
}
