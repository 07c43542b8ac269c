//! Shared fixtures for the integration tests.
#![allow(dead_code)]

pub mod criteria;
pub mod gradcheck;

use coevo_autodiff::Array;
use coevo_core::decoder_stage::{build_batch, init_discriminator, DecoderLossConfig, Stage2Batch, DISC_HIDDEN};
use coevo_core::domain::{render, sample_prompt, FeatureExtractor, Prompt, PIXELS};
use coevo_core::grpo::{GrpoConfig, RolloutGroup};
use coevo_core::params::ParamBundle;
use coevo_core::policy::{init_policy, sample_groups, SamplingConfig};
use coevo_core::tokenizer::{init_decoder, Codebook, TokenGrid, CODEBOOK_SIZE, LATENT_DIM, SEQ_LEN};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Adds uniform noise of half-width `scale` to every parameter.
pub fn jitter(bundle: &ParamBundle, scale: f64, r: &mut impl Rng) -> ParamBundle {
    if scale == 0.0 {
        return bundle.clone();
    }
    bundle
        .iter()
        .map(|(k, v)| {
            let data = v.data().iter().map(|x| x + r.gen_range(-scale..scale)).collect();
            (k.to_string(), Array::new(v.shape().to_vec(), data).unwrap())
        })
        .collect()
}

pub fn random_grid(r: &mut impl Rng, vocab: usize) -> TokenGrid {
    let mut g = [0usize; SEQ_LEN];
    for t in g.iter_mut() {
        *t = r.gen_range(0..vocab);
    }
    TokenGrid(g)
}

pub fn random_codebook(r: &mut impl Rng) -> Codebook {
    Codebook::new(Array::from_fn(&[CODEBOOK_SIZE, LATENT_DIM], |_| r.gen_range(-1.0..1.0))).unwrap()
}

/// Discriminator with a nonzero output layer so its logits vary.
pub fn random_discriminator(r: &mut impl Rng) -> ParamBundle {
    let mut d = init_discriminator(r.gen());
    d.insert("disc_w2", Array::from_fn(&[DISC_HIDDEN, 1], |_| r.gen_range(-1.0..1.0)));
    d.insert("disc_b2", Array::vector(vec![r.gen_range(-0.5..0.5)]));
    d
}

pub struct DecoderFixture {
    pub decoder: ParamBundle,
    pub codebook: Codebook,
    pub discriminator: ParamBundle,
    pub extractor: FeatureExtractor,
    pub batch: Stage2Batch,
    pub config: DecoderLossConfig,
}

/// A random stage-2 problem with `b` prompts and groups of `g`.
pub fn decoder_fixture(seed: u64, b: usize, g: usize) -> DecoderFixture {
    let mut r = rng(seed);
    let codebook = random_codebook(&mut r);
    let decoder = jitter(&init_decoder(&mut r), 0.3, &mut r);
    let teacher = jitter(&decoder, 0.05, &mut r);
    let prompts: Vec<Prompt> = (0..b).map(|_| sample_prompt(&mut r)).collect();
    let sample_prompts: Vec<Prompt> = prompts.iter().flat_map(|&p| std::iter::repeat_n(p, g)).collect();
    let tokens: Vec<TokenGrid> = (0..b * g).map(|_| random_grid(&mut r, CODEBOOK_SIZE)).collect();
    let rewards: Vec<f64> = (0..b * g).map(|_| r.gen_range(-50.0..90.0)).collect();
    let gt_tokens: Vec<TokenGrid> = (0..b).map(|_| random_grid(&mut r, CODEBOOK_SIZE)).collect();
    let gt_images = Array::matrix(
        b,
        PIXELS,
        prompts.iter().flat_map(|p| render(p).to_patch_major()).collect(),
    )
    .unwrap();
    let config = DecoderLossConfig::default();
    let batch = build_batch(
        tokens,
        sample_prompts,
        &rewards,
        g,
        &teacher,
        &codebook,
        gt_tokens,
        gt_images,
        config.tau,
    )
    .unwrap();
    DecoderFixture {
        decoder,
        codebook,
        discriminator: random_discriminator(&mut r),
        extractor: FeatureExtractor::new(r.gen()),
        batch,
        config,
    }
}

pub struct PolicyFixture {
    pub policy: ParamBundle,
    pub reference: ParamBundle,
    pub groups: Vec<RolloutGroup>,
    pub config: GrpoConfig,
}

/// Groups sampled from a behaviour policy; the live policy is a small
/// perturbation of it so importance ratios differ from one.
pub fn policy_fixture(seed: u64, vocab: usize, b: usize, g: usize, drift: f64) -> PolicyFixture {
    let mut r = rng(seed);
    let behaviour = init_policy(vocab, 1.0, r.gen());
    let config = GrpoConfig {
        group_size: g,
        ..GrpoConfig::default()
    };
    let prompts: Vec<usize> = (0..b).map(|_| r.gen_range(0..coevo_core::domain::NUM_PROMPTS)).collect();
    let sampling = SamplingConfig {
        temperature: 1.0,
        top_p: 1.0,
    };
    let sampled = sample_groups(&behaviour, &prompts, g, &sampling, r.gen()).unwrap();
    let groups = sampled
        .into_iter()
        .zip(&prompts)
        .map(|(rollouts, &p)| {
            let rewards = (0..g).map(|_| r.gen_range(-20.0..80.0)).collect();
            RolloutGroup::new(Prompt::from_id(p).unwrap(), rollouts, rewards, &config).unwrap()
        })
        .collect();
    PolicyFixture {
        policy: jitter(&behaviour, drift, &mut r),
        reference: jitter(&behaviour, 0.05, &mut r),
        groups,
        config,
    }
}

/// A quick configuration: short tokenizer and SFT phases and small probes.
pub fn small_config() -> coevo_core::config::RunConfig {
    coevo_core::config::RunConfig::from_json_str(
        r#"{
            "tokenizer": {"steps": 300},
            "policy": {"sft": {"steps": 40}},
            "driver": {"total_steps": 20, "log_every": 5, "record_wall_time": false},
            "diagnostics": {"probe_every": 10, "probe_samples": 256, "eval_samples": 64, "baseline": false}
        }"#,
    )
    .unwrap()
}
