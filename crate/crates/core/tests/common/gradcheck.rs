//! Central finite-difference checks of the composite losses.

use coevo_autodiff::{evaluate, grad_check, value_and_grad, Bindings, Graph, NamedArrays, Tape, Var};
use coevo_core::decoder_stage::{
    decode_images_on_tape, decoder_loss_on_tape, discriminator_loss_on_tape, rank_gan_on_tape, recon_anchor_on_tape,
    reward_bp_on_tape, consistency_on_tape, ConsistencyMetric, Stage2Context,
};
use coevo_core::grpo::{policy_loss_on_tape, reference_trace};
use coevo_core::params::{BoundParams, ParamBundle};
use coevo_core::reward::RewardChannel;

use super::{decoder_fixture, policy_fixture, DecoderFixture};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
pub const POINTS: u64 = 5;

fn named(bundle: &ParamBundle) -> NamedArrays {
    bundle.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
}

fn bound(b: &Bindings) -> BoundParams {
    BoundParams::from_vars(b.iter())
}

fn lift(e: coevo_core::CoevoError) -> coevo_autodiff::AutodiffError {
    match e {
        coevo_core::CoevoError::Autodiff(a) => a,
        other => panic!("loss build failed: {other}"),
    }
}

/// Central-difference check restricted to the listed `(array, index)` pairs,
/// with the same error measure as `grad_check`.
fn grad_check_at(graph: &impl Graph, point: &NamedArrays, coords: &[(String, usize)]) -> f64 {
    let (_, analytic) = value_and_grad(graph, point).unwrap();
    let mut probe = point.clone();
    let mut worst = 0.0f64;
    for (name, k) in coords {
        let x0 = point[name].data()[*k];
        let mut at = |x: f64| {
            probe.get_mut(name).unwrap().data_mut()[*k] = x;
            evaluate(graph, &probe).unwrap().item()
        };
        let fd = (at(x0 + STEP) - at(x0 - STEP)) / (2.0 * STEP);
        probe.get_mut(name).unwrap().data_mut()[*k] = x0;
        worst = worst.max((analytic[name].data()[*k] - fd).abs() / fd.abs().max(1.0));
    }
    worst
}

/// Worst relative error of the GRPO policy loss over five random points. Every
/// coordinate is checked except prompt-embedding rows no rollout uses, whose
/// loss dependence is identically zero.
pub fn policy_loss_error() -> f64 {
    let mut worst = 0.0f64;
    for seed in 0..POINTS {
        let f = policy_fixture(100 + seed, 8, 1, 3, 0.03);
        let point = named(&f.policy);
        let used: Vec<usize> = f.groups.iter().map(|g| g.prompt.id).collect();
        let emb_dim = point["prompt_emb"].last_dim();
        let mut coords = Vec::new();
        for (name, value) in &point {
            for k in 0..value.len() {
                if name != "prompt_emb" || used.contains(&(k / emb_dim)) {
                    coords.push((name.clone(), k));
                }
            }
        }
        let reference = reference_trace(&f.groups, &f.reference).unwrap();
        let graph = |t: &mut Tape, b: &Bindings| -> coevo_autodiff::Result<Var> {
            let p = bound(b);
            Ok(policy_loss_on_tape(t, &p, &f.groups, &reference, &f.config).map_err(lift)?.0)
        };
        let (_, analytic) = value_and_grad(&graph, &point).unwrap();
        let unused_grad = analytic["prompt_emb"]
            .data()
            .iter()
            .enumerate()
            .filter(|(k, _)| !used.contains(&(k / emb_dim)))
            .all(|(_, g)| *g == 0.0);
        assert!(unused_grad, "unused prompt rows received gradient");
        worst = worst.max(grad_check_at(&graph, &point, &coords));
    }
    worst
}

pub const DECODER_TERMS: [&str; 6] = ["reward", "rank_gan", "recon", "consist_l2", "consist_feature", "total"];

fn decoder_graph(f: &DecoderFixture, term: &str, t: &mut Tape, b: &Bindings) -> coevo_core::Result<Var> {
    let dec = bound(b);
    let batch = &f.batch;
    match term {
        "reward" => {
            let x = decode_images_on_tape(t, &batch.tokens, &dec, &f.codebook)?;
            reward_bp_on_tape(t, x, &batch.prompts, RewardChannel::ClipLike, &f.extractor)
        }
        "rank_gan" => {
            let x = decode_images_on_tape(t, &batch.tokens, &dec, &f.codebook)?;
            rank_gan_on_tape(t, x, &batch.weights, &f.discriminator)
        }
        "recon" => {
            let x = decode_images_on_tape(t, &batch.gt_tokens, &dec, &f.codebook)?;
            recon_anchor_on_tape(t, &batch.gt_images, x, &f.discriminator)
        }
        "consist_l2" | "consist_feature" => {
            let metric = if term == "consist_l2" { ConsistencyMetric::L2 } else { ConsistencyMetric::Feature };
            let x = decode_images_on_tape(t, &batch.tokens, &dec, &f.codebook)?;
            consistency_on_tape(t, x, &batch.teacher_decoded, metric, &f.extractor)
        }
        _ => {
            let ctx = Stage2Context {
                codebook: &f.codebook,
                discriminator: &f.discriminator,
                extractor: &f.extractor,
                channel: RewardChannel::ClipLike,
                config: &f.config,
            };
            Ok(decoder_loss_on_tape(t, &dec, batch, &ctx)?.0)
        }
    }
}

/// Worst relative error of one decoder loss term over five random points.
pub fn decoder_term_error(term: &str) -> f64 {
    let mut worst = 0.0f64;
    for seed in 0..POINTS {
        let f = decoder_fixture(200 + seed, 1, 2);
        let graph = |t: &mut Tape, b: &Bindings| decoder_graph(&f, term, t, b).map_err(lift);
        worst = worst.max(grad_check(&graph, &named(&f.decoder), STEP).unwrap());
    }
    worst
}

/// Worst relative error of the discriminator loss over five random points.
pub fn discriminator_loss_error() -> f64 {
    let mut worst = 0.0f64;
    for seed in 0..POINTS {
        let f = decoder_fixture(300 + seed, 2, 2);
        let fakes = f.batch.teacher_decoded.clone();
        let graph = |t: &mut Tape, b: &Bindings| -> coevo_autodiff::Result<Var> {
            Ok(discriminator_loss_on_tape(t, &bound(b), &f.batch.gt_images, &fakes).map_err(lift)?.0)
        };
        worst = worst.max(grad_check(&graph, &named(&f.discriminator), STEP).unwrap());
    }
    worst
}
