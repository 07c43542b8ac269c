//! Behaviour of the domain, tokenizer, policy, reward and decoder-stage pieces.

mod common;

use coevo_autodiff::{grad_check, Array, Bindings, NamedArrays, Tape, Var};
use coevo_core::decoder_stage::{
    consistency_on_tape, decoder_loss, discriminator_logits, discriminator_step, init_discriminator, rank_gan_on_tape,
    rank_weights, recon_anchor_on_tape, reward_bp_on_tape, ConsistencyMetric, Stage2Context,
};
use coevo_core::domain::{
    dataset, exhaustive_dataset, render, FeatureExtractor, Image, Prompt, Shape, NUM_PATCHES, NUM_PROMPTS,
    PATCH_DIM, PIXELS,
};
use coevo_core::params::{BoundParams, Optimizer, OptimizerConfig, ParamBundle};
use coevo_core::policy::{
    cross_entropy, init_policy, kl_estimate, log_prob, sample_rollouts, sample_with_seeds, sft_pretrain,
    trace_on_tape, zero_policy, SamplingConfig, SftConfig,
};
use coevo_core::reward::{blackbox_reward, clip_like_on_tape, RewardChannel};
use coevo_core::tokenizer::{
    decode, decode_patch_major, encode, pretrain_tokenizer, TokenGrid, TokenizerConfig, CODEBOOK_SIZE, SEQ_LEN,
};
use common::{decoder_fixture, jitter, random_codebook, random_grid, rng};
use rand::Rng;

const FD_STEP: f64 = 1e-5;
const FD_TOL: f64 = 1e-4;

fn plain() -> SamplingConfig {
    SamplingConfig {
        temperature: 1.0,
        top_p: 1.0,
    }
}

fn named(bundle: &ParamBundle) -> NamedArrays {
    bundle.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
}

fn lift(e: coevo_core::CoevoError) -> coevo_autodiff::AutodiffError {
    match e {
        coevo_core::CoevoError::Autodiff(a) => a,
        other => panic!("graph build failed: {other}"),
    }
}

fn random_image(r: &mut impl Rng) -> Image {
    Image::new((0..PIXELS).map(|_| r.gen_range(0.0..1.0)).collect()).unwrap()
}

// ---- domain ----

#[test]
fn renders_are_deterministic_and_in_range() {
    for p in Prompt::all() {
        let a = render(&p);
        assert_eq!(a, render(&p));
        assert!(a.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn one_flipped_pixel_changes_the_features() {
    let fx = FeatureExtractor::new(7);
    let img = render(&Prompt::new(2, 5, Shape::Circle).unwrap());
    let mut pixels = img.pixels().to_vec();
    pixels[100] = 1.0 - pixels[100];
    let flipped = Image::new(pixels).unwrap();
    assert_eq!(fx.extract(&img), fx.extract(&img.clone()));
    assert_ne!(fx.extract(&img), fx.extract(&flipped));
}

#[test]
fn exhaustive_dataset_lists_every_prompt_once() {
    let ids: Vec<usize> = exhaustive_dataset().iter().map(|e| e.prompt.id).collect();
    assert_eq!(ids, (0..NUM_PROMPTS).collect::<Vec<_>>());
}

#[test]
fn prompt_frequencies_are_uniform_within_three_sigma() {
    let n = 10_000;
    let data = dataset(n, &mut rng(2024)).unwrap();
    let mut counts = vec![0usize; NUM_PROMPTS];
    for e in &data {
        counts[e.prompt.id] += 1;
    }
    let p = 1.0 / NUM_PROMPTS as f64;
    let mean = n as f64 * p;
    let sigma = (n as f64 * p * (1.0 - p)).sqrt();
    for (id, &c) in counts.iter().enumerate() {
        assert!((c as f64 - mean).abs() <= 3.0 * sigma, "prompt {id}: {c} vs {mean:.1}±{sigma:.2}");
    }
}

// ---- tokenizer ----

#[test]
fn zero_encoder_maps_zero_image_to_zero_latents() {
    let mut enc = ParamBundle::new();
    enc.insert("enc_w", Array::zeros(&[PATCH_DIM, 8]));
    enc.insert("enc_b", Array::zeros(&[8]));
    let z = encode(&Image::filled(0.0), &enc).unwrap();
    assert_eq!(z.shape(), &[NUM_PATCHES, 8]);
    assert!(z.data().iter().all(|&v| v == 0.0));
}

#[test]
fn permuting_patches_permutes_latents() {
    let mut r = rng(3);
    let (tok, _) = pretrain_tokenizer(&exhaustive_dataset()[..8], &TokenizerConfig { steps: 0, ..Default::default() }, 1)
        .unwrap();
    let img = random_image(&mut r);
    let perm: Vec<usize> = (0..NUM_PATCHES).rev().collect();
    let pm = img.to_patch_major();
    let permuted: Vec<f64> = perm.iter().flat_map(|&p| pm[p * PATCH_DIM..(p + 1) * PATCH_DIM].to_vec()).collect();
    let a = encode(&img, &tok.encoder).unwrap();
    let b = encode(&Image::from_patch_major(&permuted).unwrap(), &tok.encoder).unwrap();
    for (i, &p) in perm.iter().enumerate() {
        assert_eq!(b.row(i), a.row(p));
    }
}

#[test]
fn decodes_are_in_unit_range_and_match_equal_parameters() {
    let mut r = rng(4);
    let (tok, _) = pretrain_tokenizer(&exhaustive_dataset()[..8], &TokenizerConfig { steps: 0, ..Default::default() }, 2)
        .unwrap();
    let codebook = random_codebook(&mut r);
    let grids: Vec<TokenGrid> = (0..20).map(|_| random_grid(&mut r, CODEBOOK_SIZE)).collect();
    let decoder = jitter(&tok.decoder, 2.0, &mut r);
    let teacher = decoder.clone();
    let a = decode(&grids, &decoder, &codebook).unwrap();
    assert!(a.iter().flat_map(|i| i.pixels()).all(|v| (0.0..=1.0).contains(v)));
    assert_eq!(a, decode(&grids, &teacher, &codebook).unwrap());
}

#[test]
fn tokenizer_pretraining_is_seeded_and_zero_steps_keep_the_init() {
    let data = &exhaustive_dataset()[..16];
    let cfg = TokenizerConfig { steps: 50, ..Default::default() };
    let (a, la) = pretrain_tokenizer(data, &cfg, 11).unwrap();
    let (b, lb) = pretrain_tokenizer(data, &cfg, 11).unwrap();
    assert_eq!(a, b);
    assert_eq!(la.to_bits(), lb.to_bits());

    let (z, _) = pretrain_tokenizer(data, &TokenizerConfig { steps: 0, ..Default::default() }, 11).unwrap();
    let mut init = coevo_core::rng::stream(11, &[coevo_core::rng::tag::TOKENIZER_INIT]);
    assert!(z.encoder.bitwise_eq(&coevo_core::tokenizer::init_encoder(&mut init)));
    for name in ["dec_b1", "dec_b2"] {
        assert!(z.decoder.get(name).unwrap().data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn single_image_is_fit_almost_exactly() {
    let data = &exhaustive_dataset()[37..38];
    let cfg = TokenizerConfig { steps: 2000, ..Default::default() };
    let (tok, _) = pretrain_tokenizer(data, &cfg, 5).unwrap();
    let l1 = tok.reconstruction_l1(&[data[0].image.clone()]).unwrap();
    assert!(l1 <= 0.02, "single-image L1 {l1}");
}

// ---- policy ----

#[test]
fn sequence_log_prob_gradient_matches_finite_differences() {
    let mut r = rng(6);
    let params = init_policy(4, 1.0, 9);
    let seq = random_grid(&mut r, 4);
    let graph = |t: &mut Tape, b: &Bindings| -> coevo_autodiff::Result<Var> {
        let p = BoundParams::from_vars(b.iter());
        let trace = trace_on_tape(t, &p, &[17], &[seq]).map_err(lift)?;
        Ok(t.sum(trace.log_prob))
    };
    let err = grad_check(&graph, &named(&params), FD_STEP).unwrap();
    assert!(err <= FD_TOL, "log-prob gradient error {err}");
}

#[test]
fn plain_sampling_matches_softmax_frequencies() {
    let logits = [0.3, -1.2, 1.0, 0.0];
    let mut params = zero_policy(4);
    params.insert("b_o", Array::vector(logits.to_vec()));
    let n = 50_000;
    let prompts = vec![0usize; n];
    let seeds: Vec<u64> = (0..n as u64).collect();
    let rolls = sample_with_seeds(&params, &prompts, &seeds, &plain()).unwrap();
    let z: f64 = logits.iter().map(|l: &f64| l.exp()).sum();
    for (k, l) in logits.iter().enumerate() {
        let p = l.exp() / z;
        let count = rolls.iter().filter(|r| r.tokens.0[0] == k).count() as f64;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        assert!((count - n as f64 * p).abs() <= 3.0 * sigma, "token {k}: {count} vs {}", n as f64 * p);
    }
}

#[test]
fn saturated_logit_is_always_sampled_with_zero_log_prob() {
    let mut params = zero_policy(4);
    params.insert("b_o", Array::vector(vec![0.0, 0.0, 1e9, 0.0]));
    let rolls = sample_rollouts(5, 8, &params, &plain(), 3).unwrap();
    for r in &rolls {
        assert!(r.tokens.0.iter().all(|&t| t == 2));
        assert!(log_prob(&r.tokens, 5, &params).unwrap().abs() < 1e-12);
    }
}

#[test]
fn uniform_policy_log_prob() {
    let mut r = rng(8);
    let seq = random_grid(&mut r, 4);
    let lp = log_prob(&seq, 0, &zero_policy(4)).unwrap();
    assert!((lp - (-22.18070977791825)).abs() < 1e-12, "{lp}");
}

#[test]
fn rollouts_are_seeded_and_record_their_log_probs() {
    let params = init_policy(CODEBOOK_SIZE, 1.0, 4);
    let a = sample_rollouts(12, 8, &params, &plain(), 99).unwrap();
    let b = sample_rollouts(12, 8, &params, &plain(), 99).unwrap();
    assert_eq!(a, b);
    for r in &a {
        let direct = log_prob(&r.tokens, 12, &params).unwrap();
        assert!((direct - r.log_prob()).abs() <= 1e-10 * direct.abs().max(1.0));
    }
}

#[test]
fn kl_estimate_is_zero_on_itself_and_never_negative() {
    let p = init_policy(16, 1.0, 1);
    assert_eq!(kl_estimate(&p, &p, &[0, 1, 2], 8, &plain(), 5).unwrap(), 0.0);
    let mut r = rng(10);
    for i in 0..100 {
        let a = init_policy(16, 1.0, r.gen());
        let b = init_policy(16, 1.0, r.gen());
        let kl = kl_estimate(&a, &b, &[i % NUM_PROMPTS], 2, &plain(), i as u64).unwrap();
        assert!(kl >= 0.0, "pair {i}: {kl}");
    }
}

#[test]
fn sft_zero_steps_and_uniform_cross_entropy() {
    let mut r = rng(12);
    let data: Vec<(usize, TokenGrid)> = (0..4).map(|i| (i, random_grid(&mut r, CODEBOOK_SIZE))).collect();
    let zero = zero_policy(CODEBOOK_SIZE);
    let per_sequence = cross_entropy(&zero, &data).unwrap() * SEQ_LEN as f64;
    assert!((per_sequence - 66.54212933375474).abs() < 1e-9, "{per_sequence}");
    let init = init_policy(CODEBOOK_SIZE, 0.5, 1);
    let same = sft_pretrain(&init, &data, &SftConfig { steps: 0, ..Default::default() }, 3).unwrap();
    assert!(same.bitwise_eq(&init));
}

#[test]
fn sft_memorises_a_single_sequence() {
    let mut r = rng(13);
    let data = vec![(40usize, random_grid(&mut r, CODEBOOK_SIZE))];
    let init = init_policy(CODEBOOK_SIZE, 0.5, 2);
    let cfg = SftConfig { steps: 2000, ..Default::default() };
    let trained = sft_pretrain(&init, &data, &cfg, 4).unwrap();
    let ce = cross_entropy(&trained, &data).unwrap();
    assert!(ce <= 0.2, "held-in cross-entropy {ce}");
}

// ---- reward ----

#[test]
fn clip_like_gradient_matches_finite_differences() {
    let mut r = rng(14);
    let fx = FeatureExtractor::new(3);
    let prompts = [Prompt::from_id(9).unwrap(), Prompt::from_id(150).unwrap()];
    let images = Array::matrix(2, PIXELS, (0..2 * PIXELS).map(|_| r.gen_range(0.0..1.0)).collect()).unwrap();
    let graph = |t: &mut Tape, b: &Bindings| -> coevo_autodiff::Result<Var> {
        let x = b.get("x")?;
        let s = clip_like_on_tape(t, &fx, x, &prompts).map_err(lift)?;
        Ok(t.sum(s))
    };
    let point: NamedArrays = [("x".to_string(), images)].into_iter().collect();
    let err = grad_check(&graph, &point, FD_STEP).unwrap();
    assert!(err <= FD_TOL, "reward gradient error {err}");
}

#[test]
fn blackbox_of_inverted_render_is_the_histogram_intersection() {
    let p = Prompt::new(1, 6, Shape::Cross).unwrap();
    let inv = render(&Prompt::new(6, 1, Shape::Cross).unwrap());
    assert_eq!(blackbox_reward(&render(&p), &p).score, 1.0);

    // Brute force: pixel values are 0 or 1, so each channel histogram has
    // mass only in the lowest and highest bins.
    let fg_share = |img: &Image, c: usize| {
        let ones = (0..16 * 16).filter(|&i| img.pixels()[3 * i + c] == 1.0).count();
        ones as f64 / 256.0
    };
    let target = render(&p);
    let mut total = 0.0;
    for c in 0..3 {
        let (a, b) = (fg_share(&inv, c), fg_share(&target, c));
        total += a.min(b) + (1.0 - a).min(1.0 - b);
    }
    let expected = total / 3.0;
    let got = blackbox_reward(&inv, &p).score;
    assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
}

#[test]
fn blackbox_stays_in_unit_interval() {
    let mut r = rng(15);
    for _ in 0..1000 {
        let img = random_image(&mut r);
        let p = Prompt::from_id(r.gen_range(0..NUM_PROMPTS)).unwrap();
        let s = blackbox_reward(&img, &p).score;
        assert!((0.0..=1.0).contains(&s));
    }
}

// ---- decoder stage ----

#[test]
fn equal_rewards_give_unit_weights() {
    assert_eq!(rank_weights(&[3.5; 8], 0.1, 8).unwrap(), vec![1.0; 8]);
}

#[test]
fn zero_weight_sample_has_no_decoder_gradient() {
    let f = decoder_fixture(20, 1, 2);
    let with = |w: Vec<f64>, tokens: Vec<TokenGrid>| {
        let graph = |t: &mut Tape, b: &Bindings| -> coevo_autodiff::Result<Var> {
            let dec = BoundParams::from_vars(b.iter());
            let x = coevo_core::decoder_stage::decode_images_on_tape(t, &tokens, &dec, &f.codebook).map_err(lift)?;
            rank_gan_on_tape(t, x, &w, &f.discriminator).map_err(lift)
        };
        coevo_autodiff::value_and_grad(&graph, &named(&f.decoder)).unwrap().1
    };
    let a = with(vec![0.0, 2.0], f.batch.tokens.clone());
    let mut swapped = f.batch.tokens.clone();
    swapped[0] = TokenGrid([7; SEQ_LEN]);
    let b = with(vec![0.0, 2.0], swapped);
    for (k, g) in &a {
        assert_eq!(g.data(), b[k].data(), "{k}");
    }
}

#[test]
fn reward_term_of_a_perfect_decode_is_minus_one_hundred() {
    let fx = FeatureExtractor::new(1);
    let p = Prompt::from_id(77).unwrap();
    let mut t = Tape::new();
    let x = t.constant(Array::matrix(1, PIXELS, render(&p).to_patch_major()).unwrap());
    let l = reward_bp_on_tape(&mut t, x, &[p], RewardChannel::ClipLike, &fx).unwrap();
    assert!((t.value(l).item() + 100.0).abs() < 1e-9);
}

#[test]
fn consistency_values() {
    let fx = FeatureExtractor::new(1);
    let mut t = Tape::new();
    let teacher = Array::matrix(1, 2, vec![0.2, 0.9]).unwrap();
    let x = t.constant(Array::matrix(1, 2, vec![0.5, 0.1]).unwrap());
    let l = consistency_on_tape(&mut t, x, &teacher, ConsistencyMetric::L2, &fx).unwrap();
    let expected = (0.3f64 * 0.3 + 0.8 * 0.8) / 2.0;
    assert!((t.value(l).item() - expected).abs() < 1e-15);

    let f = decoder_fixture(21, 2, 2);
    let same = decode_patch_major(&f.batch.tokens, &f.decoder, &f.codebook).unwrap();
    let mut t = Tape::new();
    let dec = f.decoder.bind(&mut t, true);
    let x = coevo_core::decoder_stage::decode_images_on_tape(&mut t, &f.batch.tokens, &dec, &f.codebook).unwrap();
    let l = consistency_on_tape(&mut t, x, &same, ConsistencyMetric::L2, &fx).unwrap();
    assert_eq!(t.value(l).item(), 0.0);
}

#[test]
fn recon_l1_values() {
    let disc = init_discriminator(0);
    let l1_of = |gt: f64, out: f64| {
        let mut t = Tape::new();
        let x = t.constant(Array::from_fn(&[1, PIXELS], |_| out));
        let l = recon_anchor_on_tape(&mut t, &Array::from_fn(&[1, PIXELS], |_| gt), x, &disc).unwrap();
        // The fresh discriminator outputs logit 0, so the adversarial part is ln 2.
        t.value(l).item() - std::f64::consts::LN_2
    };
    assert!(l1_of(0.3, 0.3).abs() < 1e-15);
    assert!((l1_of(0.0, 0.5) - 0.5).abs() < 1e-15);
}

#[test]
fn default_weights_combine_the_four_terms() {
    let f = decoder_fixture(22, 2, 4);
    let ctx = |cfg| Stage2Context {
        codebook: &f.codebook,
        discriminator: &f.discriminator,
        extractor: &f.extractor,
        channel: RewardChannel::ClipLike,
        config: cfg,
    };
    let parts = decoder_loss(&f.decoder, &f.batch, &ctx(&f.config)).unwrap();
    let expected =
        0.1 * parts.reward.unwrap() + 0.5 * parts.rank_gan.unwrap() + 1.0 * parts.recon.unwrap() + 1.0 * parts.consist.unwrap();
    assert!((parts.total - expected).abs() <= 1e-9 * expected.abs().max(1.0));
    let cfg = coevo_core::config::RunConfig::from_json_str("{}").unwrap().stage2;
    assert_eq!((cfg.lambda_r, cfg.lambda_g, cfg.lambda_c, cfg.lambda_d), (1.0, 0.5, 1.0, 0.1));
}

#[test]
fn discriminator_zero_lr_is_a_noop_and_separable_sets_are_learned() {
    let real = Array::from_fn(&[8, PIXELS], |_| 0.8);
    let fake = Array::from_fn(&[8, PIXELS], |_| 0.2);
    let mut disc = init_discriminator(4);
    let before = disc.clone();
    let mut opt = Optimizer::new(OptimizerConfig::sgd(0.0));
    discriminator_step(&real, &fake, &mut disc, &mut opt).unwrap();
    assert!(disc.bitwise_eq(&before));

    let mut r = rng(16);
    let sample = |r: &mut rand_chacha::ChaCha8Rng, lo: f64, hi: f64| {
        Array::from_fn(&[16, PIXELS], |_| r.gen_range(lo..hi))
    };
    let mut opt = Optimizer::new(OptimizerConfig::sgd(5e-2));
    for _ in 0..500 {
        let (a, b) = (sample(&mut r, 0.55, 1.0), sample(&mut r, 0.0, 0.45));
        discriminator_step(&a, &b, &mut disc, &mut opt).unwrap();
    }
    let (a, b) = (sample(&mut r, 0.55, 1.0), sample(&mut r, 0.0, 0.45));
    let correct = discriminator_logits(&disc, &a).unwrap().iter().filter(|&&v| v > 0.0).count()
        + discriminator_logits(&disc, &b).unwrap().iter().filter(|&&v| v < 0.0).count();
    assert!(correct as f64 / 32.0 >= 0.95, "accuracy {}", correct as f64 / 32.0);
}
