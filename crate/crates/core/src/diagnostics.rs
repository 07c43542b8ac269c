//! Token-distribution shift, codebook entropy, and the toy Fréchet distance.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::domain::Example;
use crate::error::{CoevoError, Result};
use crate::params::ParamBundle;
use crate::policy::{rollout_seed, sample_with_seeds, SamplingConfig};
use crate::rng;
use crate::tokenizer::{TokenGrid, Tokenizer};

/// Exact unigram counts over a vocabulary of size K.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenHistogram {
    counts: Vec<u64>,
    total: u64,
}

impl TokenHistogram {
    pub fn empty(vocab: usize) -> Self {
        TokenHistogram {
            counts: vec![0; vocab],
            total: 0,
        }
    }

    pub fn from_counts(counts: Vec<u64>) -> Self {
        let total = counts.iter().sum();
        TokenHistogram { counts, total }
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn vocab(&self) -> usize {
        self.counts.len()
    }

    pub fn add(&mut self, tokens: &[usize]) -> Result<()> {
        let vocab = self.vocab();
        if let Some(&token) = tokens.iter().find(|&&t| t >= vocab) {
            return Err(CoevoError::TokenOutOfRange { token, vocab });
        }
        for &t in tokens {
            self.counts[t] += 1;
        }
        self.total += tokens.len() as u64;
        Ok(())
    }

    pub fn merge(&self, other: &TokenHistogram) -> Result<TokenHistogram> {
        if self.vocab() != other.vocab() {
            return Err(CoevoError::invalid("histogram vocabularies differ"));
        }
        Ok(TokenHistogram::from_counts(
            self.counts.iter().zip(&other.counts).map(|(a, b)| a + b).collect(),
        ))
    }

    /// (count_c + λ) / (total + λK)
    pub fn smoothed(&self, smoothing: f64) -> Result<Vec<f64>> {
        if self.total == 0 {
            return Err(CoevoError::invalid("histogram is empty"));
        }
        if smoothing.is_nan() || smoothing < 0.0 {
            return Err(CoevoError::invalid("smoothing must be ≥ 0"));
        }
        let denom = self.total as f64 + smoothing * self.vocab() as f64;
        Ok(self.counts.iter().map(|&c| (c as f64 + smoothing) / denom).collect())
    }
}

pub fn token_histogram<'a>(sequences: impl IntoIterator<Item = &'a [usize]>, vocab: usize) -> Result<TokenHistogram> {
    let mut h = TokenHistogram::empty(vocab);
    for s in sequences {
        h.add(s)?;
    }
    Ok(h)
}

pub fn grid_histogram(grids: &[TokenGrid], vocab: usize) -> Result<TokenHistogram> {
    token_histogram(grids.iter().map(|g| g.indices()), vocab)
}

/// Default add-λ smoothing for a vocabulary of size K.
pub fn default_smoothing(vocab: usize) -> f64 {
    0.5 / vocab as f64
}

/// KL(p ‖ q) in nats between smoothed unigram frequencies.
pub fn lcs_kl(policy_hist: &TokenHistogram, gt_hist: &TokenHistogram, smoothing: f64) -> Result<f64> {
    if policy_hist.vocab() != gt_hist.vocab() {
        return Err(CoevoError::invalid("histogram vocabularies differ"));
    }
    let p = policy_hist.smoothed(smoothing)?;
    let q = gt_hist.smoothed(smoothing)?;
    let mut kl = 0.0;
    for (&pc, &qc) in p.iter().zip(&q) {
        if pc > 0.0 {
            if qc == 0.0 {
                return Ok(f64::INFINITY);
            }
            kl += pc * (pc / qc).ln();
        }
    }
    Ok(kl.max(0.0))
}

/// Shannon entropy in bits of the smoothed frequencies.
pub fn codebook_entropy(hist: &TokenHistogram, smoothing: f64) -> Result<f64> {
    let p = hist.smoothed(smoothing)?;
    let h: f64 = p.iter().filter(|&&v| v > 0.0).map(|&v| -v * v.log2()).sum();
    Ok(h.max(0.0))
}

fn moments(samples: &[Vec<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let dim = samples.first().map(Vec::len).unwrap_or(0);
    if samples.len() < dim + 1 || dim == 0 {
        return Err(CoevoError::invalid(format!(
            "Fréchet distance needs ≥ dim+1 samples, got {} for dim {dim}",
            samples.len()
        )));
    }
    if samples.iter().any(|s| s.len() != dim) {
        return Err(CoevoError::invalid("feature vectors have differing lengths"));
    }
    let n = samples.len() as f64;
    let mut mean = DVector::zeros(dim);
    for s in samples {
        mean += DVector::from_column_slice(s);
    }
    mean /= n;
    let mut cov = DMatrix::zeros(dim, dim);
    for s in samples {
        let d = DVector::from_column_slice(s) - &mean;
        cov += &d * d.transpose();
    }
    cov /= n - 1.0;
    Ok((mean, cov))
}

const NEGATIVE_EIGEN_TOLERANCE: f64 = -1e-8;

fn clamped_eigen(m: DMatrix<f64>) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    let sym = (&m + m.transpose()) * 0.5;
    let mut eig = SymmetricEigen::new(sym);
    for v in eig.eigenvalues.iter_mut() {
        if *v < NEGATIVE_EIGEN_TOLERANCE {
            return Err(CoevoError::invalid(format!("matrix has negative eigenvalue {v}")));
        }
        *v = v.max(0.0);
    }
    Ok(eig)
}

/// ‖μ₁−μ₂‖² + Tr(Σ₁ + Σ₂ − 2(Σ₁^½ Σ₂ Σ₁^½)^½).
pub fn frechet_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    let (mu_a, cov_a) = moments(a)?;
    let (mu_b, cov_b) = moments(b)?;
    if mu_a.len() != mu_b.len() {
        return Err(CoevoError::invalid("feature sets have different dimensions"));
    }
    let ea = clamped_eigen(cov_a.clone())?;
    let root_a = &ea.eigenvectors
        * DMatrix::from_diagonal(&ea.eigenvalues.map(f64::sqrt))
        * ea.eigenvectors.transpose();
    let inner = &root_a * &cov_b * &root_a;
    let tr_root: f64 = clamped_eigen(inner)?.eigenvalues.iter().map(|v| v.sqrt()).sum();
    let diff = mu_a - mu_b;
    let d = diff.dot(&diff) + cov_a.trace() + cov_b.trace() - 2.0 * tr_root;
    Ok(d.max(0.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShiftReport {
    pub kl_nats: f64,
    pub entropy_bits: f64,
    pub step: u64,
    pub baseline_kl: Option<f64>,
}

/// Source of token grids for a probe. Implementations must not decode.
pub trait TokenSampler {
    fn sample(&self, prompts: &[usize], seed: u64) -> Result<Vec<TokenGrid>>;
    fn vocab(&self) -> usize;
}

pub struct PolicySampler<'a> {
    pub params: &'a ParamBundle,
    pub sampling: SamplingConfig,
}

impl TokenSampler for PolicySampler<'_> {
    fn sample(&self, prompts: &[usize], seed: u64) -> Result<Vec<TokenGrid>> {
        let seeds: Vec<u64> = prompts
            .iter()
            .enumerate()
            .map(|(j, &p)| rollout_seed(seed, p, j))
            .collect();
        Ok(sample_with_seeds(self.params, prompts, &seeds, &self.sampling)?
            .into_iter()
            .map(|r| r.tokens)
            .collect())
    }

    fn vocab(&self) -> usize {
        self.params.get("b_o").map(|b| b.len()).unwrap_or(0)
    }
}

/// Replays each prompt's ground-truth grid.
pub struct ReplaySampler {
    pub grids: Vec<TokenGrid>,
    pub vocab: usize,
}

impl TokenSampler for ReplaySampler {
    fn sample(&self, prompts: &[usize], _seed: u64) -> Result<Vec<TokenGrid>> {
        prompts
            .iter()
            .map(|&p| {
                self.grids
                    .get(p)
                    .copied()
                    .ok_or_else(|| CoevoError::invalid(format!("no grid for prompt {p}")))
            })
            .collect()
    }

    fn vocab(&self) -> usize {
        self.vocab
    }
}

/// Probe prompt list: `n` ids cycling through `0..num_prompts`.
pub fn probe_prompts(n: usize, num_prompts: usize) -> Vec<usize> {
    (0..n).map(|j| j % num_prompts).collect()
}

/// Samples `n` grids over the prompt cycle, then compares their unigram
/// histogram with `gt_hist`.
pub fn shift_probe(
    sampler: &dyn TokenSampler,
    gt_hist: &TokenHistogram,
    num_prompts: usize,
    n: usize,
    seed: u64,
    smoothing: f64,
    step: u64,
) -> Result<ShiftReport> {
    if n == 0 {
        return Err(CoevoError::invalid("probe needs n ≥ 1"));
    }
    let prompts = probe_prompts(n, num_prompts);
    let grids = sampler.sample(&prompts, rng::derive(seed, &[rng::tag::PROBE]))?;
    let hist = grid_histogram(&grids, sampler.vocab())?;
    Ok(ShiftReport {
        kl_nats: lcs_kl(&hist, gt_hist, smoothing)?,
        entropy_bits: codebook_entropy(&hist, smoothing)?,
        step,
        baseline_kl: None,
    })
}

/// Histogram of the ground-truth grids over the probe prompt cycle.
pub fn probe_gt_histogram(gt_grids: &[TokenGrid], n: usize, vocab: usize) -> Result<TokenHistogram> {
    let prompts = probe_prompts(n, gt_grids.len());
    token_histogram(prompts.iter().map(|&p| gt_grids[p].indices()), vocab)
}

/// KL between the token histograms of two disjoint random halves of the dataset.
pub fn real_baseline(data: &[Example], tokenizer: &Tokenizer, split_seed: u64, smoothing: f64) -> Result<f64> {
    if data.len() < 2 {
        return Err(CoevoError::invalid("real baseline needs at least 2 examples"));
    }
    let mut idx: Vec<usize> = (0..data.len()).collect();
    idx.shuffle(&mut rng::stream(split_seed, &[rng::tag::BASELINE]));
    let half = data.len() / 2;
    let vocab = tokenizer.codebook.len();
    let hist = |ids: &[usize]| -> Result<TokenHistogram> {
        let images: Vec<_> = ids.iter().map(|&i| data[i].image.clone()).collect();
        grid_histogram(&tokenizer.tokens_batch(&images)?, vocab)
    };
    lcs_kl(&hist(&idx[..half])?, &hist(&idx[half..2 * half])?, smoothing)
}
