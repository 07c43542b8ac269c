//! The alternating training loop: sampling, policy stage, decoder stage, EMA
//! updates, probes, and checkpoints.

use std::path::{Path, PathBuf};

use coevo_autodiff::Array;
use crate::config::{write_effective, Mode, RunConfig};
use crate::decoder_stage::{
    build_batch, decoder_step, discriminator_step, init_discriminator, DecoderLossParts, DiscStats,
    RolloutSource, Stage2Context,
};
use crate::diagnostics::{self, frechet_distance, probe_gt_histogram, PolicySampler, ShiftReport, TokenHistogram};
use crate::domain::{self, exhaustive_dataset, render, FeatureExtractor, Prompt, NUM_PROMPTS, PIXELS};
use crate::error::{CoevoError, Result, StageContext};
use crate::grpo::{policy_step, RolloutGroup, Stage1Stats};
use crate::io::checkpoint::{save_checkpoint, Checkpoint};
use crate::io::metrics::{MetricsRecord, MetricsSink, MetricsWriter};
use crate::params::{Optimizer, OptimizerConfig, ParamBundle};
use crate::policy::{self, rollout_seed, sample_groups, sample_with_seeds, sft_step, Rollout};
use crate::reward::{blackbox_reward, clip_like_patch_major, score_patch_major, RewardChannel};
use crate::rng;
use crate::tokenizer::{decode_patch_major, pretrain_tokenizer, Codebook, TokenGrid, Tokenizer};

/// Frozen quantities shared by every round of a run.
pub struct World {
    pub extractor: FeatureExtractor,
    pub encoder: ParamBundle,
    pub codebook: Codebook,
    /// Ground-truth grid of every prompt id.
    pub gt_grids: Vec<TokenGrid>,
    /// Patch-major render of every prompt id.
    pub gt_images: Vec<Vec<f64>>,
    pub real_features: Vec<Vec<f64>>,
    pub probe_gt: TokenHistogram,
    pub baseline_kl: Option<f64>,
    pub smoothing: f64,
}

impl World {
    pub fn new(tokenizer: &Tokenizer, config: &RunConfig) -> Result<World> {
        let extractor = FeatureExtractor::new(config.domain.feature_seed);
        let data = exhaustive_dataset();
        let images: Vec<_> = data.iter().map(|e| e.image.clone()).collect();
        let gt_grids = tokenizer.tokens_batch(&images)?;
        let vocab = tokenizer.codebook.len();
        let smoothing = config.smoothing(vocab);
        let probe_gt = probe_gt_histogram(&gt_grids, config.diagnostics.probe_samples, vocab)?;
        let baseline_kl = if config.diagnostics.baseline {
            let mut r = rng::stream(config.seeds.baseline_split, &[rng::tag::DATASET]);
            let sample = domain::dataset(2 * config.diagnostics.probe_samples.max(1), &mut r)?;
            Some(diagnostics::real_baseline(&sample, tokenizer, config.seeds.baseline_split, smoothing)?)
        } else {
            None
        };
        Ok(World {
            real_features: extractor.extract_batch(&images).iter().map(|f| f.to_vec()).collect(),
            gt_images: images.iter().map(|i| i.to_patch_major()).collect(),
            extractor,
            encoder: tokenizer.encoder.clone(),
            codebook: tokenizer.codebook.clone(),
            gt_grids,
            probe_gt,
            baseline_kl,
            smoothing,
        })
    }

    pub fn sft_pairs(&self) -> Vec<(usize, TokenGrid)> {
        self.gt_grids.iter().copied().enumerate().collect()
    }

    fn gt_batch(&self, prompts: &[Prompt]) -> Result<Array> {
        let flat: Vec<f64> = prompts.iter().flat_map(|p| self.gt_images[p.id].iter().copied()).collect();
        Ok(Array::matrix(prompts.len(), PIXELS, flat)?)
    }
}

/// Every mutable object of a run.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub step: u64,
    pub policy: ParamBundle,
    pub reference: ParamBundle,
    pub policy_ema: ParamBundle,
    pub decoder: ParamBundle,
    pub teacher: ParamBundle,
    pub discriminator: ParamBundle,
    pub policy_opt: Optimizer,
    pub decoder_opt: Optimizer,
    pub disc_opt: Optimizer,
}

fn policy_optimizer(config: &RunConfig) -> OptimizerConfig {
    if config.driver.mode == Mode::Sft {
        let s = &config.policy.sft;
        OptimizerConfig {
            kind: s.optimizer,
            ..OptimizerConfig::sgd(s.lr)
        }
    } else {
        config.stage1.optimizer_config()
    }
}

impl TrainState {
    /// Reference, policy EMA and teacher start as copies of their live counterparts.
    pub fn new(policy: ParamBundle, decoder: ParamBundle, config: &RunConfig) -> Self {
        TrainState {
            step: 0,
            reference: policy.clone(),
            policy_ema: policy.clone(),
            policy,
            teacher: decoder.clone(),
            decoder,
            discriminator: init_discriminator(config.seeds.run),
            policy_opt: Optimizer::new(policy_optimizer(config)),
            decoder_opt: Optimizer::new(config.stage2.decoder_optimizer()),
            disc_opt: Optimizer::new(config.stage2.discriminator_optimizer()),
        }
    }

    pub fn to_checkpoint(&self, world: &World, config_hash: &str) -> Checkpoint {
        let mut c = Checkpoint::new(config_hash, self.step);
        for (prefix, b) in [
            ("policy", &self.policy),
            ("reference", &self.reference),
            ("policy_ema", &self.policy_ema),
            ("decoder", &self.decoder),
            ("teacher", &self.teacher),
            ("discriminator", &self.discriminator),
            ("encoder", &world.encoder),
        ] {
            c.insert_bundle(prefix, b);
        }
        c.arrays.insert("codebook/entries".into(), world.codebook.entries().clone());
        for (name, opt) in [
            ("opt_policy", &self.policy_opt),
            ("opt_decoder", &self.decoder_opt),
            ("opt_disc", &self.disc_opt),
        ] {
            c.arrays.insert(format!("{name}/steps"), Array::scalar(opt.steps() as f64));
            if let Some((m, v)) = opt.moments() {
                c.insert_bundle(&format!("{name}/m"), m);
                c.insert_bundle(&format!("{name}/v"), v);
            }
        }
        c
    }

    pub fn from_checkpoint(c: &Checkpoint, config: &RunConfig) -> Result<TrainState> {
        let mut s = TrainState::new(c.bundle("policy")?, c.bundle("decoder")?, config);
        s.step = c.step;
        s.reference = c.bundle("reference")?;
        s.policy_ema = c.bundle("policy_ema")?;
        s.teacher = c.bundle("teacher")?;
        s.discriminator = c.bundle("discriminator")?;
        for (name, opt) in [
            ("opt_policy", &mut s.policy_opt),
            ("opt_decoder", &mut s.decoder_opt),
            ("opt_disc", &mut s.disc_opt),
        ] {
            let steps = c.arrays.get(&format!("{name}/steps")).map(|a| a.item() as u64).unwrap_or(0);
            let moments = if c.has_bundle(&format!("{name}/m")) {
                Some((c.bundle(&format!("{name}/m"))?, c.bundle(&format!("{name}/v"))?))
            } else {
                None
            };
            opt.restore(steps, moments);
        }
        Ok(s)
    }
}

/// Which stages run in a given round.
pub fn stages_for(mode: Mode, step: u64, macro_rounds: usize, decoder_every_n: usize) -> (bool, bool) {
    let (mut p, mut d) = (mode.updates_policy(), mode.updates_decoder());
    if mode == Mode::Full && macro_rounds > 1 {
        let policy_block = (step / macro_rounds as u64).is_multiple_of(2);
        p = policy_block;
        d = !policy_block;
    }
    d &= step.is_multiple_of(decoder_every_n as u64);
    (p, d)
}

#[derive(Clone, Debug, Default)]
pub struct RoundStats {
    pub sft_loss: Option<f64>,
    pub stage1: Option<Stage1Stats>,
    pub stage2: Option<DecoderLossParts>,
    pub disc: Option<DiscStats>,
    pub stage2_mean_reward: Option<f64>,
    pub weight_max: Option<f64>,
}

pub fn round_prompts(config: &RunConfig, step: u64) -> Vec<Prompt> {
    let mut r = rng::stream(config.seeds.run, &[rng::tag::ROUND_PROMPTS, step]);
    (0..config.driver.batch_size).map(|_| domain::sample_prompt(&mut r)).collect()
}

fn decode_and_score(
    tokens: &[TokenGrid],
    prompts: &[Prompt],
    decoder: &ParamBundle,
    world: &World,
    channel: RewardChannel,
) -> Result<(Array, Vec<f64>)> {
    let decoded = decode_patch_major(tokens, decoder, &world.codebook)?;
    let rewards = score_patch_major(channel, &world.extractor, &decoded, prompts)?;
    Ok((decoded, rewards))
}

fn expand(prompts: &[Prompt], g: usize) -> Vec<Prompt> {
    prompts.iter().flat_map(|&p| std::iter::repeat_n(p, g)).collect()
}

/// One optimizer round on the given prompts.
pub fn run_round(state: &mut TrainState, world: &World, prompts: &[Prompt], config: &RunConfig) -> Result<RoundStats> {
    let step = state.step;
    let mode = config.driver.mode;
    let g = config.stage1.group_size;
    let channel = config.rewards.reward;
    let sampling = config.policy.sampling;
    let ids: Vec<usize> = prompts.iter().map(|p| p.id).collect();
    let mut stats = RoundStats::default();

    if mode == Mode::Sft {
        let batch: Vec<(usize, TokenGrid)> = ids.iter().map(|&i| (i, world.gt_grids[i])).collect();
        stats.sft_loss = Some(sft_step(&mut state.policy, &mut state.policy_opt, &batch)?);
        state.step += 1;
        return Ok(stats);
    }

    let (do_policy, do_decoder) = stages_for(mode, step, config.driver.macro_rounds, config.stage2.decoder_every_n);
    let mut stage1_rollouts: Option<Vec<Rollout>> = None;

    if do_policy {
        let seed = rng::derive(config.seeds.run, &[rng::tag::STAGE1_ROLLOUT, step]);
        let groups = sample_groups(&state.policy, &ids, g, &sampling, seed)?;
        let flat: Vec<Rollout> = groups.concat();
        let tokens: Vec<TokenGrid> = flat.iter().map(|r| r.tokens).collect();
        let (_, rewards) = decode_and_score(&tokens, &expand(prompts, g), &state.decoder, world, channel)?;
        let groups = groups
            .into_iter()
            .zip(prompts)
            .zip(rewards.chunks(g))
            .map(|((rs, &p), r)| RolloutGroup::new(p, rs, r.to_vec(), &config.stage1))
            .collect::<Result<Vec<_>>>()?;
        stats.stage1 = Some(
            policy_step(&groups, &mut state.policy, &state.reference, &config.stage1, &mut state.policy_opt)
                .map_err(|e| label(e, "stage1", step))?,
        );
        stage1_rollouts = Some(flat);
    }

    if do_decoder {
        let rollouts = match (config.stage2.rollout_source, stage1_rollouts) {
            (RolloutSource::Policy, Some(r)) => r,
            (source, _) => {
                let params = match source {
                    RolloutSource::PolicyEma => &state.policy_ema,
                    RolloutSource::Policy => &state.policy,
                };
                let seed = rng::derive(config.seeds.run, &[rng::tag::STAGE2_ROLLOUT, step]);
                sample_groups(params, &ids, g, &sampling, seed)?.concat()
            }
        };
        let tokens: Vec<TokenGrid> = rollouts.iter().map(|r| r.tokens).collect();
        let sample_prompts = expand(prompts, g);
        let (fakes, rewards) = decode_and_score(&tokens, &sample_prompts, &state.decoder, world, channel)?;
        let gt_images = world.gt_batch(prompts)?;
        let batch = build_batch(
            tokens,
            sample_prompts,
            &rewards,
            g,
            &state.teacher,
            &world.codebook,
            ids.iter().map(|&i| world.gt_grids[i]).collect(),
            gt_images.clone(),
            config.stage2.tau,
        )?;
        let ctx = Stage2Context {
            codebook: &world.codebook,
            discriminator: &state.discriminator,
            extractor: &world.extractor,
            channel,
            config: &config.stage2,
        };
        let parts = decoder_step(&mut state.decoder, &batch, &ctx, &mut state.decoder_opt)
            .map_err(|e| label(e, "stage2-decoder", step))?;
        let disc = discriminator_step(&gt_images, &fakes, &mut state.discriminator, &mut state.disc_opt)
            .map_err(|e| label(e, "stage2-discriminator", step))?;
        stats.stage2_mean_reward = Some(rewards.iter().sum::<f64>() / rewards.len() as f64);
        stats.weight_max = batch.weights.iter().copied().reduce(f64::max);
        stats.stage2 = Some(parts);
        stats.disc = Some(disc);
    }

    if do_policy {
        let mu = config.policy.ema_decay;
        state.policy_ema.ema_update(&state.policy, mu)?;
        if config.stage1.ema_reference {
            state.reference.ema_update(&state.policy, mu)?;
        }
    }
    if do_decoder {
        state.teacher.ema_update(&state.decoder, config.driver.teacher_ema_decay)?;
    }
    state.step += 1;
    Ok(stats)
}

fn label(e: CoevoError, stage: &'static str, step: u64) -> CoevoError {
    match e {
        CoevoError::NonFinite { what, .. } => CoevoError::NonFinite {
            what: format!("{stage}: {what}"),
            step,
        },
        other => CoevoError::Stage {
            stage,
            source: Box::new(other),
        },
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalReport {
    pub step: u64,
    /// Mean reward under the run's channel.
    pub mean_reward: f64,
    pub clip_like: f64,
    pub blackbox: f64,
    pub frechet: f64,
}

/// Decodes a fixed set of policy samples and scores reward and fidelity.
pub fn evaluate(state: &TrainState, world: &World, config: &RunConfig) -> Result<EvalReport> {
    let n = config.diagnostics.eval_samples;
    let ids: Vec<usize> = (0..n).map(|j| j % NUM_PROMPTS).collect();
    let base = rng::derive(config.seeds.run, &[rng::tag::EVAL]);
    let seeds: Vec<u64> = ids.iter().enumerate().map(|(j, &p)| rollout_seed(base, p, j)).collect();
    let rollouts = sample_with_seeds(&state.policy, &ids, &seeds, &config.policy.sampling)?;
    let tokens: Vec<TokenGrid> = rollouts.iter().map(|r| r.tokens).collect();
    let prompts: Vec<Prompt> = ids.iter().map(|&i| Prompt::from_id(i)).collect::<Result<_>>()?;
    let decoded = decode_patch_major(&tokens, &state.decoder, &world.codebook)?;
    let clip = clip_like_patch_major(&world.extractor, &decoded, &prompts)?;
    let mut bb = 0.0;
    for (i, p) in prompts.iter().enumerate() {
        bb += blackbox_reward(&domain::Image::from_patch_major(decoded.row(i))?, p).score;
    }
    let clip_like = clip.iter().sum::<f64>() / n as f64;
    let blackbox = bb / n as f64;
    let gen: Vec<Vec<f64>> = world
        .extractor
        .extract_patch_major(decoded.data())
        .iter()
        .map(|f| f.to_vec())
        .collect();
    let real: Vec<Vec<f64>> = ids.iter().map(|&i| world.real_features[i].clone()).collect();
    Ok(EvalReport {
        step: state.step,
        mean_reward: match config.rewards.reward {
            RewardChannel::ClipLike => clip_like,
            RewardChannel::Blackbox => blackbox,
        },
        clip_like,
        blackbox,
        frechet: frechet_distance(&real, &gen)?,
    })
}

pub fn shift_probe(state: &TrainState, world: &World, config: &RunConfig) -> Result<ShiftReport> {
    let sampler = PolicySampler {
        params: &state.policy,
        sampling: config.policy.sampling,
    };
    let mut report = diagnostics::shift_probe(
        &sampler,
        &world.probe_gt,
        NUM_PROMPTS,
        config.diagnostics.probe_samples,
        config.seeds.run,
        world.smoothing,
        state.step,
    )?;
    report.baseline_kl = world.baseline_kl;
    Ok(report)
}

fn probe_records(state: &TrainState, world: &World, config: &RunConfig) -> Result<[MetricsRecord; 2]> {
    let s = shift_probe(state, world, config)?;
    let mut shift = MetricsRecord::new(s.step, "shift_probe")
        .with("kl_nats", s.kl_nats)
        .with("entropy_bits", s.entropy_bits);
    if let Some(b) = s.baseline_kl {
        shift = shift.with("baseline_kl", b);
    }
    let e = evaluate(state, world, config)?;
    let eval = MetricsRecord::new(e.step, "eval")
        .with("mean_reward", e.mean_reward)
        .with("clip_like", e.clip_like)
        .with("blackbox", e.blackbox)
        .with("frechet", e.frechet);
    Ok([shift, eval])
}

fn round_records(step: u64, stats: &RoundStats) -> Vec<MetricsRecord> {
    let mut out = Vec::new();
    if let Some(l) = stats.sft_loss {
        out.push(MetricsRecord::new(step, "sft").with("cross_entropy", l));
    }
    if let Some(s) = &stats.stage1 {
        out.push(
            MetricsRecord::new(step, "stage1")
                .with("loss", s.loss)
                .with("surrogate", s.surrogate)
                .with("kl", s.kl)
                .with("clip_fraction", s.clip_fraction)
                .with("mean_reward", s.mean_reward)
                .with("reward_std", s.reward_std),
        );
    }
    if let Some(p) = &stats.stage2 {
        let mut r = MetricsRecord::new(step, "stage2").with("loss", p.total);
        for (name, v) in [
            ("reward", p.reward),
            ("rank_gan", p.rank_gan),
            ("recon", p.recon),
            ("consist", p.consist),
            ("mean_reward", stats.stage2_mean_reward),
            ("weight_max", stats.weight_max),
        ] {
            if let Some(v) = v {
                r = r.with(name, v);
            }
        }
        if p.reward_term_disabled {
            r = r.with("warning_reward_term_disabled", 1.0);
        }
        if let Some(d) = &stats.disc {
            r = r.with("disc_loss", d.loss).with("disc_accuracy", d.accuracy);
        }
        out.push(r);
    }
    out
}

/// Whether a probe runs after `step` rounds of a `total`-round run.
pub fn probe_due(step: u64, total: u64, every: u64) -> bool {
    step == 0 || step.is_multiple_of(every) || step == total
}

/// Runs rounds until `config.driver.total_steps`, recording metrics and
/// calling `on_checkpoint` at the configured cadence.
pub fn post_train(
    state: &mut TrainState,
    world: &World,
    config: &RunConfig,
    sink: &mut dyn MetricsSink,
    on_checkpoint: &mut dyn FnMut(&TrainState) -> Result<()>,
) -> Result<()> {
    let total = config.driver.total_steps;
    let every = config.diagnostics.probe_every;
    if state.step == 0 {
        for r in probe_records(state, world, config)? {
            sink.record(r)?;
        }
    }
    while state.step < total {
        let prompts = round_prompts(config, state.step);
        let stats = run_round(state, world, &prompts, config)?;
        let step = state.step;
        if step.is_multiple_of(config.driver.log_every) {
            for r in round_records(step, &stats) {
                sink.record(r)?;
            }
        }
        if probe_due(step, total, every) {
            for r in probe_records(state, world, config)? {
                sink.record(r)?;
            }
        }
        if config.driver.checkpoint_every > 0 && step.is_multiple_of(config.driver.checkpoint_every) && step != total {
            on_checkpoint(state)?;
        }
    }
    Ok(())
}

/// Tokenizer pretraining on every prompt followed by SFT on the ground-truth grids.
pub fn prepare(config: &RunConfig) -> Result<(Tokenizer, World, ParamBundle)> {
    let data = exhaustive_dataset();
    let (tokenizer, _) = pretrain_tokenizer(&data, &config.tokenizer, config.seeds.tokenizer).stage("tokenizer-pretrain")?;
    let world = World::new(&tokenizer, config).stage("ground-truth")?;
    let init = policy::init_policy(tokenizer.codebook.len(), config.policy.sft.init_scale, config.seeds.sft);
    let sft = policy::sft_pretrain(&init, &world.sft_pairs(), &config.policy.sft, config.seeds.sft).stage("sft")?;
    Ok((tokenizer, world, sft))
}

/// Paths written by [`train`].
#[derive(Clone, Debug)]
pub struct TrainOutputs {
    pub out_dir: PathBuf,
    pub tokenizer_checkpoint: PathBuf,
    pub sft_checkpoint: PathBuf,
    pub final_checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub effective_config: PathBuf,
}

/// Hash of the config with output paths removed, so relocated reruns match.
pub fn run_hash(config: &RunConfig) -> String {
    let mut c = config.clone();
    c.paths = Default::default();
    c.hash()
}

pub fn tokenizer_checkpoint(tokenizer: &Tokenizer, hash: &str) -> Checkpoint {
    let mut c = Checkpoint::new(hash, 0);
    c.insert_bundle("encoder", &tokenizer.encoder);
    c.insert_bundle("decoder", &tokenizer.decoder);
    c.arrays.insert("codebook/entries".into(), tokenizer.codebook.entries().clone());
    c
}

pub fn tokenizer_from_checkpoint(c: &Checkpoint) -> Result<Tokenizer> {
    Ok(Tokenizer {
        encoder: c.bundle("encoder")?,
        decoder: c.bundle("decoder")?,
        codebook: Codebook::new(
            c.arrays
                .get("codebook/entries")
                .cloned()
                .ok_or_else(|| CoevoError::invalid("checkpoint has no codebook"))?,
        )?,
    })
}

/// The full pipeline: tokenizer pretraining, SFT, then mode-specific post-training.
pub fn train(config: &RunConfig) -> Result<TrainOutputs> {
    config.validate()?;
    let (tokenizer, world, sft) = prepare(config)?;
    train_prepared(config, &tokenizer, &world, &sft)
}

/// Post-training from an already prepared tokenizer and SFT policy. Writes the
/// effective config, tokenizer, SFT and final checkpoints, and metrics into
/// `config.paths.out_dir`.
pub fn train_prepared(config: &RunConfig, tokenizer: &Tokenizer, world: &World, sft: &ParamBundle) -> Result<TrainOutputs> {
    config.validate()?;
    let dir = config.paths.out_dir.clone();
    let effective_config = write_effective(config, &dir)?;
    let hash = run_hash(config);
    let dtype = config.driver.checkpoint_dtype;

    let tokenizer_checkpoint_path = dir.join("tokenizer.ckpt");
    save_checkpoint(&tokenizer_checkpoint(tokenizer, &hash), &tokenizer_checkpoint_path, dtype)?;
    let mut state = TrainState::new(sft.clone(), tokenizer.decoder.clone(), config);
    let sft_checkpoint = dir.join("sft.ckpt");
    save_checkpoint(&state.to_checkpoint(world, &hash), &sft_checkpoint, dtype)?;

    let metrics = metrics_path(&dir);
    let mut writer = MetricsWriter::create(&metrics, config.driver.record_wall_time)?;
    let mut hook = |s: &TrainState| -> Result<()> {
        let p = dir.join(format!("step_{:06}.ckpt", s.step));
        save_checkpoint(&s.to_checkpoint(world, &hash), &p, dtype)
    };
    post_train(&mut state, world, config, &mut writer, &mut hook).stage("post-train")?;
    let final_checkpoint = dir.join("final.ckpt");
    save_checkpoint(&state.to_checkpoint(world, &hash), &final_checkpoint, dtype)?;
    Ok(TrainOutputs {
        out_dir: dir.clone(),
        tokenizer_checkpoint: tokenizer_checkpoint_path,
        sft_checkpoint,
        final_checkpoint,
        metrics,
        effective_config,
    })
}

/// Renders of the given prompts, patch-major `[n, 768]`.
pub fn render_batch(prompts: &[Prompt]) -> Result<Array> {
    let flat: Vec<f64> = prompts.iter().flat_map(|p| render(p).to_patch_major()).collect();
    Ok(Array::matrix(prompts.len(), PIXELS, flat)?)
}

pub fn metrics_path(dir: &Path) -> PathBuf {
    dir.join("metrics.jsonl")
}

