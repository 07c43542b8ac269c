//! Reward channels: a differentiable feature-cosine score and an opaque
//! colour-histogram score.

use coevo_autodiff::{Array, Tape, Var};
use serde::{Deserialize, Serialize};

use crate::domain::{render, FeatureExtractor, Image, Prompt, FEATURE_DIM, PIXELS};
use crate::error::{CoevoError, Result};

pub const HISTOGRAM_BINS: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RewardChannel {
    #[default]
    ClipLike,
    Blackbox,
}

impl RewardChannel {
    pub fn name(self) -> &'static str {
        match self {
            RewardChannel::ClipLike => "clip_like",
            RewardChannel::Blackbox => "blackbox",
        }
    }

    pub fn is_differentiable(self) -> bool {
        matches!(self, RewardChannel::ClipLike)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RewardValue {
    pub score: f64,
    pub differentiable: bool,
}

/// 100·cos(f(x), f(render(y))) for a batch of patch-major images `[n, 768]`.
pub fn clip_like_on_tape(
    tape: &mut Tape,
    extractor: &FeatureExtractor,
    images: Var,
    prompts: &[Prompt],
) -> Result<Var> {
    let targets = extractor.extract_batch(&prompts.iter().map(render).collect::<Vec<_>>());
    let norms: Vec<f64> = targets
        .iter()
        .map(|t| t.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    if norms.contains(&0.0) {
        return Err(CoevoError::invalid("zero-norm target feature"));
    }
    let n = prompts.len();
    let target = tape.constant(Array::matrix(n, FEATURE_DIM, targets.concat())?);
    let target_norm = tape.constant(Array::vector(norms));
    let f = extractor.extract_on_tape(tape, images)?;
    let prod = tape.mul(f, target)?;
    let dot = tape.sum_rows(prod);
    let sq = tape.square(f);
    let sq = tape.sum_rows(sq);
    if tape.value(sq).data().contains(&0.0) {
        return Err(CoevoError::invalid("zero-norm image feature"));
    }
    let norm = tape.sqrt(sq);
    let denom = tape.mul(norm, target_norm)?;
    let cos = tape.div(dot, denom)?;
    Ok(tape.scale(cos, 100.0))
}

pub fn clip_like_batch(extractor: &FeatureExtractor, images: &[Image], prompts: &[Prompt]) -> Result<Vec<f64>> {
    let flat: Vec<f64> = images.iter().flat_map(Image::to_patch_major).collect();
    clip_like_patch_major(extractor, &Array::matrix(images.len(), PIXELS, flat)?, prompts)
}

/// Scores patch-major rows `[n, 768]` without recording gradients.
pub fn clip_like_patch_major(extractor: &FeatureExtractor, images: &Array, prompts: &[Prompt]) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let x = tape.constant(images.clone());
    let r = clip_like_on_tape(&mut tape, extractor, x, prompts)?;
    Ok(tape.value(r).data().to_vec())
}

pub fn clip_like_reward(extractor: &FeatureExtractor, image: &Image, prompt: &Prompt) -> Result<RewardValue> {
    Ok(RewardValue {
        score: clip_like_batch(extractor, std::slice::from_ref(image), std::slice::from_ref(prompt))?[0],
        differentiable: true,
    })
}

/// Per-channel normalized counts over 8 equal bins of [0, 1].
pub fn channel_histograms(image: &Image) -> [[f64; HISTOGRAM_BINS]; 3] {
    let mut h = [[0.0; HISTOGRAM_BINS]; 3];
    let unit = 1.0 / (PIXELS / 3) as f64;
    for (i, &v) in image.pixels().iter().enumerate() {
        let bin = ((v * HISTOGRAM_BINS as f64) as usize).min(HISTOGRAM_BINS - 1);
        h[i % 3][bin] += unit;
    }
    h
}

/// Mean over channels of the histogram intersection with the prompt's render.
/// Only the scalar is exposed.
pub fn blackbox_reward(image: &Image, prompt: &Prompt) -> RewardValue {
    let a = channel_histograms(image);
    let b = channel_histograms(&render(prompt));
    let score = a
        .iter()
        .zip(&b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p.min(*q)).sum::<f64>())
        .sum::<f64>()
        / 3.0;
    RewardValue {
        score: score.clamp(0.0, 1.0),
        differentiable: false,
    }
}

/// Scores with the configured channel.
pub fn score_patch_major(
    channel: RewardChannel,
    extractor: &FeatureExtractor,
    images: &Array,
    prompts: &[Prompt],
) -> Result<Vec<f64>> {
    match channel {
        RewardChannel::ClipLike => clip_like_patch_major(extractor, images, prompts),
        RewardChannel::Blackbox => prompts
            .iter()
            .enumerate()
            .map(|(i, p)| Ok(blackbox_reward(&Image::from_patch_major(images.row(i))?, p).score))
            .collect(),
    }
}

/// Differentiable reward node; the black-box channel refuses.
pub fn reward_on_tape(
    channel: RewardChannel,
    tape: &mut Tape,
    extractor: &FeatureExtractor,
    images: Var,
    prompts: &[Prompt],
) -> Result<Var> {
    match channel {
        RewardChannel::ClipLike => clip_like_on_tape(tape, extractor, images, prompts),
        RewardChannel::Blackbox => Err(CoevoError::NotDifferentiable("blackbox")),
    }
}
