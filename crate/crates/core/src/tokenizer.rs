//! Patch encoder, nearest-neighbour quantizer, per-token decoder, and their pretraining.

use std::cell::Cell;
use std::collections::HashSet;

use coevo_autodiff::{Array, Tape, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{Example, Image, NUM_PATCHES, PATCH_DIM, PIXELS};
use crate::error::{CoevoError, Result};
use crate::params::{BoundParams, Optimizer, OptimizerConfig, OptimizerKind, ParamBundle};
use crate::rng;

pub const CODEBOOK_SIZE: usize = 64;
pub const LATENT_DIM: usize = 8;
pub const DECODER_HIDDEN: usize = 32;
pub const SEQ_LEN: usize = NUM_PATCHES;

/// Row-major 4×4 grid of codebook indices.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TokenGrid(pub [usize; SEQ_LEN]);

impl TokenGrid {
    pub fn new(indices: &[usize], vocab: usize) -> Result<Self> {
        if indices.len() != SEQ_LEN {
            return Err(CoevoError::invalid(format!(
                "token grid needs {SEQ_LEN} indices, got {}",
                indices.len()
            )));
        }
        if let Some(&token) = indices.iter().find(|&&t| t >= vocab) {
            return Err(CoevoError::TokenOutOfRange { token, vocab });
        }
        let mut grid = [0; SEQ_LEN];
        grid.copy_from_slice(indices);
        Ok(TokenGrid(grid))
    }

    pub fn indices(&self) -> &[usize] {
        &self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    entries: Array,
}

impl Codebook {
    pub fn new(entries: Array) -> Result<Self> {
        if entries.shape().len() != 2 || entries.shape()[0] == 0 {
            return Err(CoevoError::invalid(format!(
                "codebook must be [K, d], got {:?}",
                entries.shape()
            )));
        }
        Ok(Codebook { entries })
    }

    pub fn entries(&self) -> &Array {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.entries.shape()[1]
    }

    pub fn has_duplicates(&self) -> bool {
        let mut seen = HashSet::new();
        (0..self.len()).any(|i| {
            let bits: Vec<u64> = self.entries.row(i).iter().map(|x| x.to_bits()).collect();
            !seen.insert(bits)
        })
    }
}

thread_local! {
    static DECODE_CALLS: Cell<u64> = const { Cell::new(0) };
}

/// Number of decode invocations made on the current thread.
pub fn decode_calls() -> u64 {
    DECODE_CALLS.with(Cell::get)
}

fn count_decode() {
    DECODE_CALLS.with(|c| c.set(c.get() + 1));
}

/// Latents for every patch of every image, laid out `[16·n, d]`.
pub fn encode_batch(images: &[Image], encoder: &ParamBundle) -> Result<Array> {
    let flat: Vec<f64> = images.iter().flat_map(Image::to_patch_major).collect();
    let mut tape = Tape::new();
    let enc = encoder.bind(&mut tape, false);
    let x = tape.constant(Array::matrix(images.len() * NUM_PATCHES, PATCH_DIM, flat)?);
    let z = encode_on_tape(&mut tape, x, &enc)?;
    Ok(tape.value(z).clone())
}

/// One latent per 4×4×3 patch, in row-major patch order: `[16, d]`.
pub fn encode(image: &Image, encoder: &ParamBundle) -> Result<Array> {
    encode_batch(std::slice::from_ref(image), encoder)
}

/// `patches` is `[rows, 48]`.
pub fn encode_on_tape(tape: &mut Tape, patches: Var, encoder: &BoundParams) -> Result<Var> {
    let m = tape.matmul(patches, encoder.var("enc_w")?)?;
    Ok(tape.add_row(m, encoder.var("enc_b")?)?)
}

/// Index of the nearest entry for each latent row; ties go to the lowest index.
pub fn quantize(latents: &Array, codebook: &Codebook) -> Result<Vec<usize>> {
    let d = codebook.dim();
    if latents.shape().len() != 2 || latents.shape()[1] != d {
        return Err(CoevoError::invalid(format!(
            "latents {:?} do not match codebook dim {d}",
            latents.shape()
        )));
    }
    let entries = codebook.entries();
    Ok((0..latents.shape()[0])
        .map(|i| {
            let z = latents.row(i);
            let mut best = (0, f64::INFINITY);
            for k in 0..codebook.len() {
                let dist: f64 = z
                    .iter()
                    .zip(entries.row(k))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                if dist < best.1 {
                    best = (k, dist);
                }
            }
            best.0
        })
        .collect())
}

/// Decoded patches `[16·n, 48]` for a batch of grids. The codebook enters as a
/// tape variable (constant or trainable); token indices never do.
pub fn decode_on_tape(
    tape: &mut Tape,
    tokens: &[TokenGrid],
    decoder: &BoundParams,
    codebook: Var,
) -> Result<Var> {
    count_decode();
    let vocab = tape.value(codebook).shape()[0];
    let mut flat = Vec::with_capacity(tokens.len() * SEQ_LEN);
    for grid in tokens {
        if let Some(&token) = grid.0.iter().find(|&&t| t >= vocab) {
            return Err(CoevoError::TokenOutOfRange { token, vocab });
        }
        flat.extend_from_slice(&grid.0);
    }
    let q = tape.gather_rows(codebook, &flat)?;
    decode_latents_on_tape(tape, q, decoder)
}

/// Decoder MLP on quantized latents `[rows, d]` → patches `[rows, 48]`.
pub fn decode_latents_on_tape(tape: &mut Tape, q: Var, decoder: &BoundParams) -> Result<Var> {
    let h = tape.matmul(q, decoder.var("dec_w1")?)?;
    let h = tape.add_row(h, decoder.var("dec_b1")?)?;
    let h = tape.tanh(h);
    let o = tape.matmul(h, decoder.var("dec_w2")?)?;
    let o = tape.add_row(o, decoder.var("dec_b2")?)?;
    Ok(tape.sigmoid(o))
}

/// Decodes to patch-major rows `[n, 768]` without recording gradients.
pub fn decode_patch_major(
    tokens: &[TokenGrid],
    decoder: &ParamBundle,
    codebook: &Codebook,
) -> Result<Array> {
    let mut tape = Tape::new();
    let dec = decoder.bind(&mut tape, false);
    let cb = tape.constant(codebook.entries().clone());
    let out = decode_on_tape(&mut tape, tokens, &dec, cb)?;
    let out = tape.reshape(out, &[tokens.len(), PIXELS])?;
    Ok(tape.value(out).clone())
}

pub fn decode(tokens: &[TokenGrid], decoder: &ParamBundle, codebook: &Codebook) -> Result<Vec<Image>> {
    let pm = decode_patch_major(tokens, decoder, codebook)?;
    (0..tokens.len())
        .map(|i| Image::from_patch_major(pm.row(i)))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TokenizerConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Weight of the pull of selected entries toward their latents.
    pub codebook_weight: f64,
    /// Weight of the pull of latents toward their selected entries.
    pub commitment_weight: f64,
    pub optimizer: OptimizerKind,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        TokenizerConfig {
            steps: 5000,
            batch_size: 16,
            lr: 1e-3,
            codebook_weight: 0.25,
            commitment_weight: 0.25,
            optimizer: OptimizerKind::Adamw,
        }
    }
}

/// Frozen-after-pretraining encoder and codebook plus the pretrained decoder.
#[derive(Clone, Debug, PartialEq)]
pub struct Tokenizer {
    pub encoder: ParamBundle,
    pub codebook: Codebook,
    pub decoder: ParamBundle,
}

impl Tokenizer {
    pub fn tokens(&self, image: &Image) -> Result<TokenGrid> {
        let idx = quantize(&encode(image, &self.encoder)?, &self.codebook)?;
        TokenGrid::new(&idx, self.codebook.len())
    }

    pub fn tokens_batch(&self, images: &[Image]) -> Result<Vec<TokenGrid>> {
        let idx = quantize(&encode_batch(images, &self.encoder)?, &self.codebook)?;
        idx.chunks(SEQ_LEN)
            .map(|c| TokenGrid::new(c, self.codebook.len()))
            .collect()
    }

    pub fn decode(&self, tokens: &[TokenGrid]) -> Result<Vec<Image>> {
        decode(tokens, &self.decoder, &self.codebook)
    }

    /// Mean absolute pixel error of decode(quantize(encode(x))) over the images.
    pub fn reconstruction_l1(&self, images: &[Image]) -> Result<f64> {
        let tokens = self.tokens_batch(images)?;
        let recon = decode_patch_major(&tokens, &self.decoder, &self.codebook)?;
        let total: f64 = images
            .iter()
            .enumerate()
            .map(|(i, img)| {
                img.to_patch_major()
                    .iter()
                    .zip(recon.row(i))
                    .map(|(a, b)| (a - b).abs())
                    .sum::<f64>()
            })
            .sum();
        Ok(total / (images.len() * PIXELS) as f64)
    }
}

fn uniform(r: &mut impl Rng, shape: &[usize], bound: f64) -> Array {
    Array::from_fn(shape, |_| r.gen_range(-bound..bound))
}

pub fn init_decoder(r: &mut impl Rng) -> ParamBundle {
    let mut dec = ParamBundle::new();
    dec.insert("dec_w1", uniform(r, &[LATENT_DIM, DECODER_HIDDEN], (1.0 / LATENT_DIM as f64).sqrt()));
    dec.insert("dec_b1", Array::zeros(&[DECODER_HIDDEN]));
    dec.insert("dec_w2", uniform(r, &[DECODER_HIDDEN, PATCH_DIM], (1.0 / DECODER_HIDDEN as f64).sqrt()));
    dec.insert("dec_b2", Array::zeros(&[PATCH_DIM]));
    dec
}

pub fn init_encoder(r: &mut impl Rng) -> ParamBundle {
    let mut enc = ParamBundle::new();
    enc.insert("enc_w", uniform(r, &[PATCH_DIM, LATENT_DIM], (3.0 / PATCH_DIM as f64).sqrt()));
    enc.insert("enc_b", Array::zeros(&[LATENT_DIM]));
    enc
}

/// Picks `k` well-spread distinct rows of `latents` by farthest-point selection.
fn farthest_point_codebook(latents: &Array, k: usize, r: &mut impl Rng) -> Result<Codebook> {
    let d = latents.shape()[1];
    let mut seen = HashSet::new();
    let distinct: Vec<&[f64]> = (0..latents.shape()[0])
        .map(|i| latents.row(i))
        .filter(|row| seen.insert(row.iter().map(|x| x.to_bits()).collect::<Vec<_>>()))
        .collect();
    let mut chosen: Vec<Vec<f64>> = vec![distinct[r.gen_range(0..distinct.len())].to_vec()];
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    let mut nearest: Vec<f64> = distinct.iter().map(|z| dist(z, &chosen[0])).collect();
    while chosen.len() < k {
        let (idx, &far) = nearest
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
            .expect("nonempty");
        let entry: Vec<f64> = if far > 0.0 {
            distinct[idx].to_vec()
        } else {
            // Fewer distinct latents than entries: jitter an existing one.
            let base = &chosen[r.gen_range(0..chosen.len())];
            base.iter().map(|x| x + r.gen_range(-1e-3..1e-3)).collect()
        };
        for (n, z) in nearest.iter_mut().zip(&distinct) {
            *n = n.min(dist(z, &entry));
        }
        chosen.push(entry);
    }
    Codebook::new(Array::matrix(k, d, chosen.concat())?)
}

/// Trains encoder, codebook and decoder on the dataset. Returns the tokenizer and
/// the loss of the final step.
pub fn pretrain_tokenizer(
    data: &[Example],
    config: &TokenizerConfig,
    seed: u64,
) -> Result<(Tokenizer, f64)> {
    if data.is_empty() {
        return Err(CoevoError::invalid("tokenizer pretraining needs a nonempty dataset"));
    }
    if config.batch_size == 0 {
        return Err(CoevoError::invalid("tokenizer batch_size must be ≥ 1"));
    }
    let mut r = rng::stream(seed, &[rng::tag::TOKENIZER_INIT]);
    let encoder = init_encoder(&mut r);
    let images: Vec<Image> = data.iter().map(|e| e.image.clone()).collect();
    let latents = encode_batch(&images, &encoder)?;
    let codebook = farthest_point_codebook(&latents, CODEBOOK_SIZE, &mut r)?;
    let decoder = init_decoder(&mut r);

    let mut params = ParamBundle::new();
    for (k, v) in encoder.iter().chain(decoder.iter()) {
        params.insert(k, v.clone());
    }
    params.insert("codebook", codebook.entries().clone());

    let mut opt = Optimizer::new(OptimizerConfig {
        kind: config.optimizer,
        ..OptimizerConfig::sgd(config.lr)
    });
    let mut last = f64::NAN;
    for step in 0..config.steps {
        let mut br = rng::stream(seed, &[rng::tag::TOKENIZER_BATCH, step as u64]);
        let batch: Vec<f64> = (0..config.batch_size)
            .flat_map(|_| data[br.gen_range(0..data.len())].image.to_patch_major())
            .collect();
        let rows = config.batch_size * NUM_PATCHES;

        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, true);
        let x = tape.constant(Array::matrix(rows, PATCH_DIM, batch)?);
        let z = encode_on_tape(&mut tape, x, &bound)?;
        let cb_var = bound.var("codebook")?;
        let cb = Codebook::new(params.get("codebook")?.clone())?;
        let idx = quantize(tape.value(z), &cb)?;
        let q = tape.gather_rows(cb_var, &idx)?;
        let recon = decode_latents_on_tape(&mut tape, q, &bound)?;

        let diff = tape.sub(x, recon)?;
        let abs = tape.abs(diff);
        let l1 = tape.mean(abs);
        let z_sg = tape.stop_gradient(z);
        let pull = tape.sub(q, z_sg)?;
        let pull = tape.square(pull);
        let pull = tape.mean(pull);
        let q_sg = tape.stop_gradient(q);
        let commit = tape.sub(z, q_sg)?;
        let commit = tape.square(commit);
        let commit = tape.mean(commit);
        let pull = tape.scale(pull, config.codebook_weight);
        let commit = tape.scale(commit, config.commitment_weight);
        let loss = tape.add(l1, pull)?;
        let loss = tape.add(loss, commit)?;

        last = tape.value(loss).item();
        if !last.is_finite() {
            return Err(CoevoError::NonFinite {
                what: "tokenizer loss".into(),
                step: step as u64,
            });
        }
        let grads = bound.gradients(&tape.backward(loss)?);
        opt.step(&mut params, &grads)?;
    }

    let pick = |names: &[&str]| -> Result<ParamBundle> {
        names
            .iter()
            .map(|n| Ok((n.to_string(), params.get(n)?.clone())))
            .collect()
    };
    let tokenizer = Tokenizer {
        encoder: pick(&["enc_b", "enc_w"])?,
        codebook: Codebook::new(params.get("codebook")?.clone())?,
        decoder: pick(&["dec_b1", "dec_b2", "dec_w1", "dec_w2"])?,
    };
    Ok((tokenizer, last))
}
