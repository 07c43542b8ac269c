//! Whole-system checks shared by the training tests and the acceptance report.
//! Each returns a short summary on success and a description of the first
//! violation otherwise.

use coevo_autodiff::Tape;
use coevo_core::config::{Mode, RunConfig};
use coevo_core::decoder_stage::{
    consistency_on_tape, decode_images_on_tape, decoder_loss_and_grad, decoder_step, rank_gan_on_tape,
    recon_anchor_on_tape, reward_bp_on_tape, Stage2Context,
};
use coevo_core::driver::{prepare, round_prompts, run_round, train, TrainState};
use coevo_core::grpo::{policy_loss, policy_step, GrpoConfig};
use coevo_core::params::{Optimizer, OptimizerConfig, ParamBundle};
use coevo_core::reward::RewardChannel;

use super::{decoder_fixture, policy_fixture, DecoderFixture};

pub type Outcome = std::result::Result<String, String>;

/// Runs 100 rounds per mode from a shared start and checks which parameter
/// groups moved.
pub fn mode_isolation(base: &RunConfig, rounds: usize) -> Outcome {
    let (tokenizer, world, sft) = prepare(base).map_err(|e| e.to_string())?;
    let frozen_before = TrainState::new(sft.clone(), tokenizer.decoder.clone(), base).to_checkpoint(&world, "x");
    for mode in [Mode::PolicyOnly, Mode::DecoderOnly, Mode::Full] {
        let mut config = base.clone();
        config.driver.mode = mode;
        let mut state = TrainState::new(sft.clone(), tokenizer.decoder.clone(), &config);
        let start = state.clone();
        for _ in 0..rounds {
            let prompts = round_prompts(&config, state.step);
            run_round(&mut state, &world, &prompts, &config).map_err(|e| e.to_string())?;
        }
        let policy_same = start.policy.bitwise_eq(&state.policy)
            && start.reference.bitwise_eq(&state.reference)
            && start.policy_ema.bitwise_eq(&state.policy_ema);
        let decoder_same = start.decoder.bitwise_eq(&state.decoder)
            && start.teacher.bitwise_eq(&state.teacher)
            && start.discriminator.bitwise_eq(&state.discriminator);
        let ok = match mode {
            Mode::PolicyOnly => decoder_same && !policy_same,
            Mode::DecoderOnly => policy_same && !decoder_same,
            _ => !policy_same && !decoder_same,
        };
        if !ok {
            return Err(format!(
                "{}: policy side unchanged={policy_same}, decoder side unchanged={decoder_same}",
                mode.name()
            ));
        }
        let after = state.to_checkpoint(&world, "x");
        for (name, arr) in &frozen_before.arrays {
            if (name.starts_with("encoder/") || name.starts_with("codebook/")) && arr != &after.arrays[name] {
                return Err(format!("{name} changed in {}", mode.name()));
            }
        }
    }
    Ok(format!("3 modes x {rounds} rounds, frozen groups bitwise constant"))
}

pub fn context(f: &DecoderFixture) -> Stage2Context<'_> {
    Stage2Context {
        codebook: &f.codebook,
        discriminator: &f.discriminator,
        extractor: &f.extractor,
        channel: RewardChannel::ClipLike,
        config: &f.config,
    }
}

/// Hand-built sum of the terms whose weight is nonzero, in the loss's fixed order.
pub fn reduced_loss_grad(f: &DecoderFixture, weights: [f64; 4]) -> ParamBundle {
    let [lambda_d, lambda_g, lambda_r, lambda_c] = weights;
    let mut t = Tape::new();
    let dec = f.decoder.bind(&mut t, true);
    let b = &f.batch;
    let x = decode_images_on_tape(&mut t, &b.tokens, &dec, &f.codebook).unwrap();
    let mut terms = Vec::new();
    if lambda_d != 0.0 {
        let v = reward_bp_on_tape(&mut t, x, &b.prompts, RewardChannel::ClipLike, &f.extractor).unwrap();
        terms.push(t.scale(v, lambda_d));
    }
    if lambda_g != 0.0 {
        let v = rank_gan_on_tape(&mut t, x, &b.weights, &f.discriminator).unwrap();
        terms.push(t.scale(v, lambda_g));
    }
    if lambda_r != 0.0 {
        let recon = decode_images_on_tape(&mut t, &b.gt_tokens, &dec, &f.codebook).unwrap();
        let v = recon_anchor_on_tape(&mut t, &b.gt_images, recon, &f.discriminator).unwrap();
        terms.push(t.scale(v, lambda_r));
    }
    if lambda_c != 0.0 {
        let v = consistency_on_tape(&mut t, x, &b.teacher_decoded, f.config.consistency_metric, &f.extractor).unwrap();
        terms.push(t.scale(v, lambda_c));
    }
    let mut total = terms[0];
    for &term in &terms[1..] {
        total = t.add(total, term).unwrap();
    }
    dec.gradients(&t.backward(total).unwrap())
}

/// Drops each weight in turn and compares the gradient bitwise with a build
/// of the reduced loss.
pub fn lambda_ablation(seeds: u64) -> Outcome {
    let mut comparisons = 0;
    for seed in 0..seeds {
        let mut f = decoder_fixture(40 + seed, 2, 4);
        let c = f.config.clone();
        let full = [c.lambda_d, c.lambda_g, c.lambda_r, c.lambda_c];
        let (_, all_terms) = decoder_loss_and_grad(&f.decoder, &f.batch, &context(&f)).map_err(|e| e.to_string())?;
        if !all_terms.bitwise_eq(&reduced_loss_grad(&f, full)) {
            return Err(format!("seed {seed}: full loss differs from the hand-built sum"));
        }
        for drop in 0..4 {
            let mut w = full;
            w[drop] = 0.0;
            [f.config.lambda_d, f.config.lambda_g, f.config.lambda_r, f.config.lambda_c] = w;
            let (parts, grads) = decoder_loss_and_grad(&f.decoder, &f.batch, &context(&f)).map_err(|e| e.to_string())?;
            let present = [parts.reward, parts.rank_gan, parts.recon, parts.consist];
            if !grads.bitwise_eq(&reduced_loss_grad(&f, w)) {
                return Err(format!("seed {seed}, term {drop}: gradient differs from reduced build"));
            }
            if grads.bitwise_eq(&all_terms) || present[drop].is_some() {
                return Err(format!("seed {seed}, term {drop}: dropping the weight had no effect"));
            }
            comparisons += 1;
            f.config = c.clone();
        }
    }
    Ok(format!("{comparisons} bitwise gradient comparisons"))
}

/// One SGD step at lr 1e-4 on a frozen rollout batch; returns the largest drop
/// of the stage-1 objective.
pub fn policy_step_worst(batches: u64) -> f64 {
    let mut worst = f64::NEG_INFINITY;
    for seed in 0..batches {
        let f = policy_fixture(500 + seed, 64, 4, 8, 0.0);
        let config = GrpoConfig { lr: 1e-4, ..f.config.clone() };
        let objective = |p: &ParamBundle| -policy_loss(&f.groups, p, &f.reference, &config).unwrap().loss;
        let before = objective(&f.policy);
        let mut policy = f.policy.clone();
        let mut opt = Optimizer::new(OptimizerConfig::sgd(1e-4));
        policy_step(&f.groups, &mut policy, &f.reference, &config, &mut opt).unwrap();
        worst = worst.max(before - objective(&policy));
    }
    worst
}

/// One SGD step at lr 1e-4 on a frozen decoder batch; returns the largest rise
/// of the decoder loss.
pub fn decoder_step_worst(batches: u64) -> f64 {
    let mut worst = f64::NEG_INFINITY;
    for seed in 0..batches {
        let f = decoder_fixture(600 + seed, 4, 8);
        let loss = |d: &ParamBundle| decoder_loss_and_grad(d, &f.batch, &context(&f)).unwrap().0.total;
        let before = loss(&f.decoder);
        let mut decoder = f.decoder.clone();
        let mut opt = Optimizer::new(OptimizerConfig::sgd(1e-4));
        decoder_step(&mut decoder, &f.batch, &context(&f), &mut opt).unwrap();
        worst = worst.max(loss(&decoder) - before);
    }
    worst
}

/// Trains the same config twice into separate directories and compares the
/// final checkpoint and metrics bytes.
pub fn rerun_identical(config: &RunConfig) -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut outputs = Vec::new();
    for run in ["a", "b"] {
        let mut c = config.clone();
        c.paths.out_dir = dir.path().join(run);
        outputs.push(train(&c).map_err(|e| e.to_string())?);
    }
    let read = |p: &std::path::Path| std::fs::read(p).map_err(|e| e.to_string());
    let (ca, cb) = (read(&outputs[0].final_checkpoint)?, read(&outputs[1].final_checkpoint)?);
    let (ma, mb) = (read(&outputs[0].metrics)?, read(&outputs[1].metrics)?);
    if ca != cb {
        return Err("final checkpoints differ".into());
    }
    if ma != mb {
        return Err("metrics files differ".into());
    }
    Ok(format!("checkpoint {} bytes and metrics {} bytes identical", ca.len(), ma.len()))
}
