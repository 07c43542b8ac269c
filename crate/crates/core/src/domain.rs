//! Procedural prompt → image domain and the frozen feature extractor.

use std::fmt;
use std::sync::Arc;

use coevo_autodiff::{kernels, Array, Tape, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoevoError, Result};
use crate::rng;

pub const IMAGE_SIDE: usize = 16;
pub const CHANNELS: usize = 3;
pub const PATCH_SIDE: usize = 4;
pub const GRID_SIDE: usize = IMAGE_SIDE / PATCH_SIDE;
pub const NUM_PATCHES: usize = GRID_SIDE * GRID_SIDE;
pub const PATCH_DIM: usize = PATCH_SIDE * PATCH_SIDE * CHANNELS;
pub const PIXELS: usize = IMAGE_SIDE * IMAGE_SIDE * CHANNELS;
pub const FEATURE_DIM: usize = 16;
pub const NUM_COLORS: usize = 8;
pub const NUM_SHAPES: usize = 4;
/// 4 shapes × 8 foreground colors × 7 distinct background colors.
pub const NUM_PROMPTS: usize = NUM_SHAPES * NUM_COLORS * (NUM_COLORS - 1);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Square,
    Circle,
    Cross,
    Stripes,
}

impl Shape {
    pub const ALL: [Shape; NUM_SHAPES] = [Shape::Square, Shape::Circle, Shape::Cross, Shape::Stripes];

    fn index(self) -> usize {
        Shape::ALL.iter().position(|&s| s == self).expect("listed")
    }

    /// Whether pixel (row, col) belongs to the foreground.
    pub fn covers(self, row: usize, col: usize) -> bool {
        let inner = |v: usize| (4..12).contains(&v);
        match self {
            Shape::Square => inner(row) && inner(col),
            Shape::Cross => inner(row) || inner(col),
            Shape::Stripes => (col / 4).is_multiple_of(2),
            Shape::Circle => {
                let dy = row as f64 + 0.5 - 8.0;
                let dx = col as f64 + 0.5 - 8.0;
                dy * dy + dx * dx <= 16.0
            }
        }
    }
}

/// RGB triple of a palette color: the corners of the unit cube.
pub fn palette(color: usize) -> [f64; 3] {
    [
        ((color >> 2) & 1) as f64,
        ((color >> 1) & 1) as f64,
        (color & 1) as f64,
    ]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Prompt {
    pub fg: usize,
    pub bg: usize,
    pub shape: Shape,
    pub id: usize,
}

impl Prompt {
    pub fn new(fg: usize, bg: usize, shape: Shape) -> Result<Self> {
        if fg >= NUM_COLORS || bg >= NUM_COLORS || fg == bg {
            return Err(CoevoError::invalid(format!(
                "invalid color pair fg={fg} bg={bg}"
            )));
        }
        let bg_slot = if bg > fg { bg - 1 } else { bg };
        let id = (shape.index() * NUM_COLORS + fg) * (NUM_COLORS - 1) + bg_slot;
        Ok(Prompt { fg, bg, shape, id })
    }

    pub fn from_id(id: usize) -> Result<Self> {
        if id >= NUM_PROMPTS {
            return Err(CoevoError::invalid(format!(
                "prompt id {id} outside 0..{NUM_PROMPTS}"
            )));
        }
        let bg_slot = id % (NUM_COLORS - 1);
        let fg = (id / (NUM_COLORS - 1)) % NUM_COLORS;
        let shape = Shape::ALL[id / ((NUM_COLORS - 1) * NUM_COLORS)];
        let bg = if bg_slot >= fg { bg_slot + 1 } else { bg_slot };
        Ok(Prompt { fg, bg, shape, id })
    }

    pub fn all() -> Vec<Prompt> {
        (0..NUM_PROMPTS)
            .map(|id| Prompt::from_id(id).expect("in range"))
            .collect()
    }
}

impl fmt::Display for Prompt {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?} fg={} bg={}", self.shape, self.fg, self.bg)
    }
}

/// A 16×16×3 image, row-major with interleaved channels.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pixels: Vec<f64>,
}

impl Image {
    pub fn new(pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != PIXELS {
            return Err(CoevoError::invalid(format!(
                "image needs {PIXELS} values, got {}",
                pixels.len()
            )));
        }
        if pixels.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(CoevoError::invalid("pixel outside [0, 1]"));
        }
        Ok(Image { pixels })
    }

    pub fn filled(value: f64) -> Self {
        Image {
            pixels: vec![value.clamp(0.0, 1.0); PIXELS],
        }
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn pixel(&self, row: usize, col: usize) -> [f64; 3] {
        let o = (row * IMAGE_SIDE + col) * CHANNELS;
        [self.pixels[o], self.pixels[o + 1], self.pixels[o + 2]]
    }

    /// Flattened in patch order: 16 patches of 48 values, each patch row-major.
    pub fn to_patch_major(&self) -> Vec<f64> {
        PATCH_ORDER.with(|order| order.iter().map(|&i| self.pixels[i]).collect())
    }

    pub fn from_patch_major(values: &[f64]) -> Result<Self> {
        if values.len() != PIXELS {
            return Err(CoevoError::invalid(format!(
                "patch-major image needs {PIXELS} values, got {}",
                values.len()
            )));
        }
        let mut pixels = vec![0.0; PIXELS];
        PATCH_ORDER.with(|order| {
            for (k, &i) in order.iter().enumerate() {
                pixels[i] = values[k];
            }
        });
        Image::new(pixels)
    }

    /// The 48 values of patch `p` (row-major patch index).
    pub fn patch(&self, p: usize) -> Vec<f64> {
        let pm = self.to_patch_major();
        pm[p * PATCH_DIM..(p + 1) * PATCH_DIM].to_vec()
    }
}

/// Position in row-major image storage of the k-th patch-major value.
pub fn patch_major_source(k: usize) -> usize {
    let patch = k / PATCH_DIM;
    let within = k % PATCH_DIM;
    let (pr, pc) = (patch / GRID_SIDE, patch % GRID_SIDE);
    let pixel = within / CHANNELS;
    let channel = within % CHANNELS;
    let row = pr * PATCH_SIDE + pixel / PATCH_SIDE;
    let col = pc * PATCH_SIDE + pixel % PATCH_SIDE;
    (row * IMAGE_SIDE + col) * CHANNELS + channel
}

thread_local! {
    static PATCH_ORDER: Arc<[usize]> = (0..PIXELS).map(patch_major_source).collect();
}

pub fn render(prompt: &Prompt) -> Image {
    let fg = palette(prompt.fg);
    let bg = palette(prompt.bg);
    let mut pixels = Vec::with_capacity(PIXELS);
    for row in 0..IMAGE_SIDE {
        for col in 0..IMAGE_SIDE {
            let c = if prompt.shape.covers(row, col) { fg } else { bg };
            pixels.extend_from_slice(&c);
        }
    }
    Image { pixels }
}

/// Frozen random projection followed by tanh.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureExtractor {
    seed: u64,
    /// Projection with rows in patch-major pixel order, shape [768, 16].
    proj: Array,
    bias: Array,
}

impl FeatureExtractor {
    pub fn new(seed: u64) -> Self {
        let mut r = rng::stream(seed, &[rng::tag::FEATURES]);
        // Unit-variance entries; pre-activations on centered images have std ≈ 1.
        let spread = 3f64.sqrt() * 2.0 / (PIXELS as f64).sqrt();
        let p: Vec<f64> = (0..PIXELS * FEATURE_DIM)
            .map(|_| r.gen_range(-spread..spread))
            .collect();
        // p is stored [16, 768] in image order; transpose into patch-major [768, 16].
        let mut proj = vec![0.0; PIXELS * FEATURE_DIM];
        for k in 0..PIXELS {
            let src = patch_major_source(k);
            for j in 0..FEATURE_DIM {
                proj[k * FEATURE_DIM + j] = p[j * PIXELS + src];
            }
        }
        let bias = (0..FEATURE_DIM)
            .map(|j| {
                let row_sum: f64 = p[j * PIXELS..(j + 1) * PIXELS].iter().sum();
                -0.5 * row_sum + r.gen_range(-0.1..0.1)
            })
            .collect();
        FeatureExtractor {
            seed,
            proj: Array::matrix(PIXELS, FEATURE_DIM, proj).expect("sized"),
            bias: Array::vector(bias),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn bias(&self) -> &Array {
        &self.bias
    }

    /// Features of a batch of patch-major images laid out as [n, 768].
    pub fn extract_patch_major(&self, batch: &[f64]) -> Vec<[f64; FEATURE_DIM]> {
        let n = batch.len() / PIXELS;
        let mut out = kernels::matmul(batch, self.proj.data(), n, PIXELS, FEATURE_DIM);
        kernels::add_row_inplace(&mut out, self.bias.data());
        out.chunks(FEATURE_DIM)
            .map(|row| {
                let mut f = [0.0; FEATURE_DIM];
                for (d, s) in f.iter_mut().zip(row) {
                    *d = s.tanh();
                }
                f
            })
            .collect()
    }

    pub fn extract(&self, image: &Image) -> [f64; FEATURE_DIM] {
        self.extract_patch_major(&image.to_patch_major())[0]
    }

    pub fn extract_batch(&self, images: &[Image]) -> Vec<[f64; FEATURE_DIM]> {
        let flat: Vec<f64> = images.iter().flat_map(|i| i.to_patch_major()).collect();
        self.extract_patch_major(&flat)
    }

    /// Tape version on patch-major images `[n, 768]`; the extractor is a constant.
    pub fn extract_on_tape(&self, tape: &mut Tape, images: Var) -> Result<Var> {
        let p = tape.constant(self.proj.clone());
        let b = tape.constant(self.bias.clone());
        let m = tape.matmul(images, p)?;
        let m = tape.add_row(m, b)?;
        Ok(tape.tanh(m))
    }
}

pub fn sample_prompt(rng: &mut impl Rng) -> Prompt {
    Prompt::from_id(rng.gen_range(0..NUM_PROMPTS)).expect("in range")
}

#[derive(Clone, Debug)]
pub struct Example {
    pub prompt: Prompt,
    pub image: Image,
}

/// `n` uniformly drawn prompts paired with their renders.
pub fn dataset(n: usize, rng: &mut impl Rng) -> Result<Vec<Example>> {
    if n == 0 {
        return Err(CoevoError::invalid("dataset size must be ≥ 1"));
    }
    Ok((0..n)
        .map(|_| {
            let prompt = sample_prompt(rng);
            Example {
                image: render(&prompt),
                prompt,
            }
        })
        .collect())
}

/// Every prompt exactly once, in id order.
pub fn exhaustive_dataset() -> Vec<Example> {
    Prompt::all()
        .into_iter()
        .map(|prompt| Example {
            image: render(&prompt),
            prompt,
        })
        .collect()
}
