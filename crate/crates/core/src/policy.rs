//! Recurrent autoregressive policy over token grids, with nucleus sampling,
//! exact log-probabilities, and analytic per-position KL.

use coevo_autodiff::{kernels, Array, Tape, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::domain::NUM_PROMPTS;
use crate::error::{CoevoError, Result};
use crate::params::{BoundParams, Optimizer, OptimizerConfig, OptimizerKind, ParamBundle};
use crate::rng;
use crate::tokenizer::{TokenGrid, SEQ_LEN};

pub const HIDDEN: usize = 64;
pub const EMBED: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplingConfig {
    pub temperature: f64,
    pub top_p: f64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig {
            temperature: 1.0,
            top_p: 0.9,
        }
    }
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.temperature.is_finite() || self.temperature <= 0.0 {
            return Err(CoevoError::invalid("temperature must be > 0"));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(CoevoError::invalid("top_p must lie in (0, 1]"));
        }
        Ok(())
    }
}

/// Vocabulary size of a policy bundle (number of output logits).
pub fn vocab_size(params: &ParamBundle) -> Result<usize> {
    Ok(params.get("b_o")?.len())
}

/// Policy parameters with every array zero: uniform over tokens.
pub fn zero_policy(vocab: usize) -> ParamBundle {
    let mut p = ParamBundle::new();
    p.insert("prompt_emb", Array::zeros(&[NUM_PROMPTS, EMBED]));
    p.insert("tok_emb", Array::zeros(&[vocab + 1, EMBED]));
    p.insert("w_h", Array::zeros(&[HIDDEN, HIDDEN]));
    p.insert("w_e", Array::zeros(&[EMBED, HIDDEN]));
    p.insert("w_p", Array::zeros(&[EMBED, HIDDEN]));
    p.insert("b", Array::zeros(&[HIDDEN]));
    p.insert("w_o", Array::zeros(&[HIDDEN, vocab]));
    p.insert("b_o", Array::zeros(&[vocab]));
    p
}

/// Small random initialization; `scale` multiplies the fan-in bound.
pub fn init_policy(vocab: usize, scale: f64, seed: u64) -> ParamBundle {
    let mut r = rng::stream(seed, &[rng::tag::POLICY_INIT]);
    let mut p = zero_policy(vocab);
    for name in ["prompt_emb", "tok_emb", "w_h", "w_e", "w_p", "w_o"] {
        let arr = p.get_mut(name).expect("present");
        let fan_in = if name.ends_with("emb") { 1 } else { arr.shape()[0] };
        let bound = scale * (3.0 / fan_in as f64).sqrt();
        for x in arr.data_mut() {
            *x = r.gen_range(-bound..bound);
        }
    }
    p
}

/// Direct (tape-free) evaluation of the recurrence over a batch of rows.
struct Stepper<'a> {
    params: &'a ParamBundle,
    vocab: usize,
    rows: usize,
    prompt_proj: Vec<f64>,
    hidden: Vec<f64>,
}

impl<'a> Stepper<'a> {
    fn new(params: &'a ParamBundle, prompts: &[usize]) -> Result<Self> {
        let vocab = vocab_size(params)?;
        let table = params.get("prompt_emb")?;
        let mut emb = Vec::with_capacity(prompts.len() * EMBED);
        for &id in prompts {
            if id >= table.shape()[0] {
                return Err(CoevoError::invalid(format!("prompt id {id} out of range")));
            }
            emb.extend_from_slice(table.row(id));
        }
        let rows = prompts.len();
        let prompt_proj = kernels::matmul(&emb, params.get("w_p")?.data(), rows, EMBED, HIDDEN);
        Ok(Stepper {
            params,
            vocab,
            rows,
            prompt_proj,
            hidden: vec![0.0; rows * HIDDEN],
        })
    }

    /// Advances one position given the previous tokens (or the begin sentinel `vocab`)
    /// and returns the next-token logits `[rows, vocab]`.
    fn step(&mut self, prev: &[usize]) -> Result<Vec<f64>> {
        let p = self.params;
        let table = p.get("tok_emb")?;
        let mut emb = Vec::with_capacity(self.rows * EMBED);
        for &t in prev {
            if t > self.vocab {
                return Err(CoevoError::TokenOutOfRange {
                    token: t,
                    vocab: self.vocab,
                });
            }
            emb.extend_from_slice(table.row(t));
        }
        let a = kernels::matmul(&self.hidden, p.get("w_h")?.data(), self.rows, HIDDEN, HIDDEN);
        let e = kernels::matmul(&emb, p.get("w_e")?.data(), self.rows, EMBED, HIDDEN);
        let mut s: Vec<f64> = a.iter().zip(&e).map(|(x, y)| x + y).collect();
        for (x, y) in s.iter_mut().zip(&self.prompt_proj) {
            *x += y;
        }
        kernels::add_row_inplace(&mut s, p.get("b")?.data());
        self.hidden = s.into_iter().map(f64::tanh).collect();
        let mut logits = kernels::matmul(&self.hidden, p.get("w_o")?.data(), self.rows, HIDDEN, self.vocab);
        kernels::add_row_inplace(&mut logits, p.get("b_o")?.data());
        Ok(logits)
    }
}

/// One recurrence step for a single sequence: returns (logits, next hidden).
pub fn step_logits(
    hidden: &[f64],
    prev_token: usize,
    prompt: usize,
    params: &ParamBundle,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if hidden.len() != HIDDEN {
        return Err(CoevoError::invalid(format!("hidden state must have {HIDDEN} values")));
    }
    let mut s = Stepper::new(params, &[prompt])?;
    s.hidden = hidden.to_vec();
    let logits = s.step(&[prev_token])?;
    Ok((logits, s.hidden))
}

/// Tokens fed at position `t`: the begin sentinel at t = 0, else the previous token.
fn inputs_at(seqs: &[TokenGrid], t: usize, vocab: usize) -> Vec<usize> {
    seqs.iter()
        .map(|s| if t == 0 { vocab } else { s.0[t - 1] })
        .collect()
}

fn check_tokens(seqs: &[TokenGrid], vocab: usize) -> Result<()> {
    for s in seqs {
        if let Some(&token) = s.0.iter().find(|&&t| t >= vocab) {
            return Err(CoevoError::TokenOutOfRange { token, vocab });
        }
    }
    Ok(())
}

/// Teacher-forced log-softmax at every position: 16 arrays of `[n, vocab]`.
pub fn log_softmax_trace(params: &ParamBundle, prompts: &[usize], seqs: &[TokenGrid]) -> Result<Vec<Vec<f64>>> {
    if prompts.len() != seqs.len() {
        return Err(CoevoError::invalid("one prompt per sequence required"));
    }
    let vocab = vocab_size(params)?;
    check_tokens(seqs, vocab)?;
    let mut s = Stepper::new(params, prompts)?;
    (0..SEQ_LEN)
        .map(|t| Ok(kernels::log_softmax_rows(&s.step(&inputs_at(seqs, t, vocab))?, vocab)))
        .collect()
}

/// Σ_t log π(z_t | z_<t, y) for each sequence.
pub fn log_probs(params: &ParamBundle, prompts: &[usize], seqs: &[TokenGrid]) -> Result<Vec<f64>> {
    let vocab = vocab_size(params)?;
    let trace = log_softmax_trace(params, prompts, seqs)?;
    let mut total = vec![0.0; seqs.len()];
    for (t, lp) in trace.iter().enumerate() {
        for (i, s) in seqs.iter().enumerate() {
            total[i] += lp[i * vocab + s.0[t]];
        }
    }
    Ok(total)
}

pub fn log_prob(sequence: &TokenGrid, prompt: usize, params: &ParamBundle) -> Result<f64> {
    Ok(log_probs(params, &[prompt], std::slice::from_ref(sequence))?[0])
}

/// Σ_k p_k (ln p_k − ln q_k) for two log-probability rows.
pub fn categorical_kl(log_p: &[f64], log_q: &[f64]) -> f64 {
    log_p
        .iter()
        .zip(log_q)
        .map(|(&lp, &lq)| if lp == f64::NEG_INFINITY { 0.0 } else { lp.exp() * (lp - lq) })
        .sum()
}

/// Analytic KL(policy ‖ reference) summed over the 16 positions of each sequence.
pub fn sequence_kl(
    policy: &ParamBundle,
    reference: &ParamBundle,
    prompts: &[usize],
    seqs: &[TokenGrid],
) -> Result<Vec<f64>> {
    let vocab = vocab_size(policy)?;
    let p = log_softmax_trace(policy, prompts, seqs)?;
    let q = log_softmax_trace(reference, prompts, seqs)?;
    let mut out = vec![0.0; seqs.len()];
    for (lp, lq) in p.iter().zip(&q) {
        for (i, o) in out.iter_mut().enumerate() {
            let r = i * vocab..(i + 1) * vocab;
            *o += categorical_kl(&lp[r.clone()], &lq[r]);
        }
    }
    Ok(out)
}

/// Samples an index from `probs` with uniform draw `u ∈ [0, 1)`, restricted to the
/// smallest probability-sorted prefix of mass ≥ `top_p` (ties by lower index).
pub fn nucleus_sample(probs: &[f64], top_p: f64, u: f64) -> usize {
    if top_p >= 1.0 {
        let total: f64 = probs.iter().sum();
        let target = u * total;
        let mut acc = 0.0;
        for (i, &p) in probs.iter().enumerate() {
            acc += p;
            if target < acc {
                return i;
            }
        }
        return probs.iter().rposition(|&p| p > 0.0).unwrap_or(0);
    }
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let mut kept = 0;
    let mut mass = 0.0;
    for &i in &order {
        mass += probs[i];
        kept += 1;
        if mass >= top_p {
            break;
        }
    }
    let target = u * mass;
    let mut acc = 0.0;
    for &i in &order[..kept] {
        acc += probs[i];
        if target < acc {
            return i;
        }
    }
    order[kept - 1]
}

/// One sampled sequence with the full-distribution log-probability of each token.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rollout {
    pub prompt: usize,
    pub tokens: TokenGrid,
    pub log_probs: Vec<f64>,
    pub seed: u64,
}

impl Rollout {
    pub fn log_prob(&self) -> f64 {
        self.log_probs.iter().fold(0.0, |a, b| a + b)
    }
}

/// Samples one sequence per `(prompt, seed)` pair in a single batched pass.
pub fn sample_with_seeds(
    params: &ParamBundle,
    prompts: &[usize],
    seeds: &[u64],
    sampling: &SamplingConfig,
) -> Result<Vec<Rollout>> {
    sampling.validate()?;
    let vocab = vocab_size(params)?;
    let n = prompts.len();
    let mut rngs: Vec<_> = seeds.iter().map(|&s| rng::stream(s, &[])).collect();
    let mut stepper = Stepper::new(params, prompts)?;
    let mut tokens = vec![[0usize; SEQ_LEN]; n];
    let mut lps = vec![Vec::with_capacity(SEQ_LEN); n];
    let mut prev = vec![vocab; n];
    #[allow(clippy::needless_range_loop)]
    for t in 0..SEQ_LEN {
        let logits = stepper.step(&prev)?;
        let lp = kernels::log_softmax_rows(&logits, vocab);
        let scaled: Vec<f64> = if sampling.temperature == 1.0 {
            logits
        } else {
            logits.iter().map(|l| l / sampling.temperature).collect()
        };
        let probs = kernels::softmax_rows(&scaled, vocab);
        for i in 0..n {
            let row = &probs[i * vocab..(i + 1) * vocab];
            let u: f64 = rngs[i].gen();
            let tok = nucleus_sample(row, sampling.top_p, u);
            tokens[i][t] = tok;
            lps[i].push(lp[i * vocab + tok]);
            prev[i] = tok;
        }
    }
    Ok((0..n)
        .map(|i| Rollout {
            prompt: prompts[i],
            tokens: TokenGrid(tokens[i]),
            log_probs: std::mem::take(&mut lps[i]),
            seed: seeds[i],
        })
        .collect())
}

/// Per-rollout seed: a hash of the base seed, the prompt id and the member index.
pub fn rollout_seed(base_seed: u64, prompt: usize, member: usize) -> u64 {
    rng::derive(base_seed, &[prompt as u64, member as u64])
}

/// G rollouts for every prompt, grouped prompt-major.
pub fn sample_groups(
    params: &ParamBundle,
    prompts: &[usize],
    group_size: usize,
    sampling: &SamplingConfig,
    base_seed: u64,
) -> Result<Vec<Vec<Rollout>>> {
    if group_size < 2 {
        return Err(CoevoError::invalid("group size G must be ≥ 2"));
    }
    let flat_prompts: Vec<usize> = prompts
        .iter()
        .flat_map(|&p| std::iter::repeat_n(p, group_size))
        .collect();
    let seeds: Vec<u64> = prompts
        .iter()
        .flat_map(|&p| (0..group_size).map(move |i| rollout_seed(base_seed, p, i)))
        .collect();
    let flat = sample_with_seeds(params, &flat_prompts, &seeds, sampling)?;
    Ok(flat.chunks(group_size).map(<[Rollout]>::to_vec).collect())
}

pub fn sample_rollouts(
    prompt: usize,
    group_size: usize,
    params: &ParamBundle,
    sampling: &SamplingConfig,
    base_seed: u64,
) -> Result<Vec<Rollout>> {
    Ok(sample_groups(params, &[prompt], group_size, sampling, base_seed)?.remove(0))
}

/// Mean over `n_samples` sampled sequences of the summed per-position analytic KL.
pub fn kl_estimate(
    policy: &ParamBundle,
    reference: &ParamBundle,
    prompts: &[usize],
    n_samples: usize,
    sampling: &SamplingConfig,
    seed: u64,
) -> Result<f64> {
    if n_samples == 0 || prompts.is_empty() {
        return Err(CoevoError::invalid("kl_estimate needs n_samples ≥ 1 and prompts"));
    }
    let ps: Vec<usize> = (0..n_samples).map(|j| prompts[j % prompts.len()]).collect();
    let seeds: Vec<u64> = (0..n_samples).map(|j| rollout_seed(seed, ps[j], j)).collect();
    let seqs: Vec<TokenGrid> = sample_with_seeds(policy, &ps, &seeds, sampling)?
        .into_iter()
        .map(|r| r.tokens)
        .collect();
    let kl = sequence_kl(policy, reference, &ps, &seqs)?;
    Ok(kl.iter().sum::<f64>() / n_samples as f64)
}

/// Teacher-forced forward pass on a tape.
pub struct TapeTrace {
    /// Log-softmax `[n, vocab]` at each of the 16 positions.
    pub log_softmax: Vec<Var>,
    /// Sequence log-probabilities `[n]`.
    pub log_prob: Var,
}

pub fn trace_on_tape(
    tape: &mut Tape,
    policy: &BoundParams,
    prompts: &[usize],
    seqs: &[TokenGrid],
) -> Result<TapeTrace> {
    if prompts.len() != seqs.len() || seqs.is_empty() {
        return Err(CoevoError::invalid("one prompt per sequence required"));
    }
    let vocab = tape.value(policy.var("b_o")?).len();
    check_tokens(seqs, vocab)?;
    let n = seqs.len();
    let p = tape.gather_rows(policy.var("prompt_emb")?, prompts)?;
    let pp = tape.matmul(p, policy.var("w_p")?)?;
    let mut h = tape.constant(Array::zeros(&[n, HIDDEN]));
    let mut lps = Vec::with_capacity(SEQ_LEN);
    let mut total: Option<Var> = None;
    for t in 0..SEQ_LEN {
        let e = tape.gather_rows(policy.var("tok_emb")?, &inputs_at(seqs, t, vocab))?;
        let a = tape.matmul(h, policy.var("w_h")?)?;
        let e = tape.matmul(e, policy.var("w_e")?)?;
        let s = tape.add(a, e)?;
        let s = tape.add(s, pp)?;
        let s = tape.add_row(s, policy.var("b")?)?;
        h = tape.tanh(s);
        let logits = tape.matmul(h, policy.var("w_o")?)?;
        let logits = tape.add_row(logits, policy.var("b_o")?)?;
        let lp = tape.log_softmax(logits);
        let targets: Vec<usize> = seqs.iter().map(|s| s.0[t]).collect();
        let picked = tape.pick(lp, &targets)?;
        total = Some(match total {
            None => picked,
            Some(acc) => tape.add(acc, picked)?,
        });
        lps.push(lp);
    }
    Ok(TapeTrace {
        log_softmax: lps,
        log_prob: total.expect("nonzero length"),
    })
}

/// Summed per-position analytic KL `[n]` of the traced policy against fixed
/// reference log-probabilities (one `[n·vocab]` array per position).
pub fn kl_on_tape(tape: &mut Tape, trace: &TapeTrace, reference: &[Vec<f64>]) -> Result<Var> {
    let mut total: Option<Var> = None;
    for (&lp, q) in trace.log_softmax.iter().zip(reference) {
        let shape = tape.value(lp).shape().to_vec();
        let lq = tape.constant(Array::new(shape, q.clone())?);
        let p = tape.exp(lp);
        let d = tape.sub(lp, lq)?;
        let m = tape.mul(p, d)?;
        let kl = tape.sum_rows(m);
        total = Some(match total {
            None => kl,
            Some(acc) => tape.add(acc, kl)?,
        });
    }
    total.ok_or_else(|| CoevoError::invalid("empty trace"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SftConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub init_scale: f64,
}

impl Default for SftConfig {
    fn default() -> Self {
        SftConfig {
            steps: 600,
            batch_size: 16,
            lr: 3e-3,
            optimizer: OptimizerKind::Adamw,
            init_scale: 0.5,
        }
    }
}

/// Mean per-token cross-entropy of the policy on (prompt, grid) pairs.
pub fn cross_entropy(params: &ParamBundle, data: &[(usize, TokenGrid)]) -> Result<f64> {
    let prompts: Vec<usize> = data.iter().map(|d| d.0).collect();
    let seqs: Vec<TokenGrid> = data.iter().map(|d| d.1).collect();
    let lp = log_probs(params, &prompts, &seqs)?;
    Ok(-lp.iter().sum::<f64>() / (data.len() * SEQ_LEN) as f64)
}

/// One supervised step on a batch; returns the pre-step mean per-token cross-entropy.
pub fn sft_step(
    params: &mut ParamBundle,
    opt: &mut Optimizer,
    batch: &[(usize, TokenGrid)],
) -> Result<f64> {
    let prompts: Vec<usize> = batch.iter().map(|d| d.0).collect();
    let seqs: Vec<TokenGrid> = batch.iter().map(|d| d.1).collect();
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, true);
    let trace = trace_on_tape(&mut tape, &bound, &prompts, &seqs)?;
    let m = tape.mean(trace.log_prob);
    let loss = tape.scale(m, -1.0 / SEQ_LEN as f64);
    let value = tape.value(loss).item();
    let grads = bound.gradients(&tape.backward(loss)?);
    opt.step(params, &grads)?;
    Ok(value)
}

/// Supervised next-token training on ground-truth grids.
pub fn sft_pretrain(
    policy: &ParamBundle,
    data: &[(usize, TokenGrid)],
    config: &SftConfig,
    seed: u64,
) -> Result<ParamBundle> {
    if data.is_empty() {
        return Err(CoevoError::invalid("SFT needs a nonempty dataset"));
    }
    let mut params = policy.clone();
    let mut opt = Optimizer::new(OptimizerConfig {
        kind: config.optimizer,
        ..OptimizerConfig::sgd(config.lr)
    });
    for step in 0..config.steps {
        let mut r = rng::stream(seed, &[rng::tag::SFT_BATCH, step as u64]);
        let batch: Vec<(usize, TokenGrid)> = (0..config.batch_size.max(1))
            .map(|_| data[r.gen_range(0..data.len())])
            .collect();
        let loss = sft_step(&mut params, &mut opt, &batch)?;
        if !loss.is_finite() {
            return Err(CoevoError::NonFinite {
                what: "SFT cross-entropy".into(),
                step: step as u64,
            });
        }
    }
    Ok(params)
}
