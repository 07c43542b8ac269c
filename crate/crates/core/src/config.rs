//! Run configuration: JSON sections with defaults, strict keys, and validation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::decoder_stage::DecoderLossConfig;
use crate::error::{CoevoError, Result};
use crate::grpo::GrpoConfig;
use crate::policy::{SamplingConfig, SftConfig};
use crate::reward::RewardChannel;
use crate::tokenizer::TokenizerConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Sft,
    PolicyOnly,
    DecoderOnly,
    #[default]
    Full,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Sft, Mode::PolicyOnly, Mode::DecoderOnly, Mode::Full];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Sft => "sft",
            Mode::PolicyOnly => "policy_only",
            Mode::DecoderOnly => "decoder_only",
            Mode::Full => "full",
        }
    }

    pub fn parse(s: &str) -> Result<Mode> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| CoevoError::invalid(format!("unknown mode `{s}`")))
    }

    pub fn updates_policy(self) -> bool {
        matches!(self, Mode::PolicyOnly | Mode::Full)
    }

    pub fn updates_decoder(self) -> bool {
        matches!(self, Mode::DecoderOnly | Mode::Full)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Dtype {
    F32,
    #[default]
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DomainConfig {
    /// Seed of the frozen feature extractor.
    pub feature_seed: u64,
}

impl Default for DomainConfig {
    fn default() -> Self {
        DomainConfig { feature_seed: 17 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyConfig {
    pub sampling: SamplingConfig,
    /// Decay of the policy's EMA shadow (and of the EMA reference).
    pub ema_decay: f64,
    pub sft: SftConfig,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            sampling: SamplingConfig::default(),
            ema_decay: 0.999,
            sft: SftConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardsConfig {
    pub reward: RewardChannel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DriverConfig {
    pub mode: Mode,
    pub total_steps: u64,
    /// Prompts per round.
    pub batch_size: usize,
    pub teacher_ema_decay: f64,
    /// Rounds per alternation block; 1 runs both stages every round.
    pub macro_rounds: usize,
    /// Checkpoint cadence in rounds; 0 writes only the final checkpoint.
    pub checkpoint_every: u64,
    /// Cadence of per-round training rows in the metrics stream.
    pub log_every: u64,
    pub checkpoint_dtype: Dtype,
    /// Write wall-clock seconds into metrics rows (null otherwise).
    pub record_wall_time: bool,
}

impl Default for DriverConfig {
    fn default() -> Self {
        DriverConfig {
            mode: Mode::Full,
            total_steps: 3000,
            batch_size: 4,
            teacher_ema_decay: 0.999,
            macro_rounds: 1,
            checkpoint_every: 0,
            log_every: 10,
            checkpoint_dtype: Dtype::F64,
            record_wall_time: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiagnosticsConfig {
    pub probe_every: u64,
    pub probe_samples: usize,
    pub eval_samples: usize,
    /// Add-λ smoothing; `null` means 0.5/K.
    pub smoothing: Option<f64>,
    pub baseline: bool,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        DiagnosticsConfig {
            probe_every: 100,
            probe_samples: 2048,
            eval_samples: 448,
            smoothing: None,
            baseline: true,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SeedsConfig {
    pub run: u64,
    pub tokenizer: u64,
    pub sft: u64,
    pub baseline_split: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub out_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub domain: DomainConfig,
    pub tokenizer: TokenizerConfig,
    pub policy: PolicyConfig,
    pub rewards: RewardsConfig,
    pub stage1: GrpoConfig,
    pub stage2: DecoderLossConfig,
    pub driver: DriverConfig,
    pub diagnostics: DiagnosticsConfig,
    pub seeds: SeedsConfig,
    pub paths: PathsConfig,
}

fn reject(path: &str, message: impl Into<String>) -> CoevoError {
    CoevoError::Config {
        path: path.to_string(),
        message: message.into(),
    }
}

fn require(ok: bool, path: &str, message: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(reject(path, message))
    }
}

fn unit_decay(v: f64) -> bool {
    (0.0..1.0).contains(&v)
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let s1 = &self.stage1;
        require(s1.group_size >= 2, "stage1.group_size", "G ≥ 2")?;
        require(s1.clip_eps > 0.0 && s1.clip_eps < 1.0, "stage1.clip_eps", "ε ∈ (0, 1)")?;
        require(s1.kl_beta >= 0.0, "stage1.kl_beta", "β ≥ 0")?;
        require(s1.lr >= 0.0 && s1.lr.is_finite(), "stage1.lr", "lr ≥ 0")?;
        require(s1.sigma_floor >= 0.0, "stage1.sigma_floor", "floor ≥ 0")?;
        require(s1.weight_decay >= 0.0, "stage1.weight_decay", "weight decay ≥ 0")?;
        require(unit_decay(s1.betas.0) && unit_decay(s1.betas.1), "stage1.betas", "betas ∈ [0, 1)")?;
        require(s1.ppo_epochs >= 1, "stage1.ppo_epochs", "ppo_epochs ≥ 1")?;

        let s2 = &self.stage2;
        for (name, v) in [
            ("stage2.lambda_r", s2.lambda_r),
            ("stage2.lambda_g", s2.lambda_g),
            ("stage2.lambda_c", s2.lambda_c),
            ("stage2.lambda_d", s2.lambda_d),
        ] {
            require(v >= 0.0 && v.is_finite(), name, "λ ≥ 0")?;
        }
        require(
            s2.lambda_r + s2.lambda_g + s2.lambda_c + s2.lambda_d > 0.0,
            "stage2",
            "at least one λ must be positive",
        )?;
        require(s2.tau > 0.0, "stage2.tau", "τ > 0")?;
        require(s2.dec_lr >= 0.0, "stage2.dec_lr", "lr ≥ 0")?;
        require(s2.disc_lr >= 0.0, "stage2.disc_lr", "lr ≥ 0")?;
        require(s2.weight_decay >= 0.0, "stage2.weight_decay", "weight decay ≥ 0")?;
        require(unit_decay(s2.betas.0) && unit_decay(s2.betas.1), "stage2.betas", "betas ∈ [0, 1)")?;
        require(s2.decoder_every_n >= 1, "stage2.decoder_every_n", "≥ 1")?;
        require(s2.discriminator == "patch", "stage2.discriminator", "only \"patch\" is available")?;

        let p = &self.policy;
        require(p.sampling.temperature > 0.0, "policy.sampling.temperature", "temperature > 0")?;
        require(
            p.sampling.top_p > 0.0 && p.sampling.top_p <= 1.0,
            "policy.sampling.top_p",
            "top_p ∈ (0, 1]",
        )?;
        require(unit_decay(p.ema_decay), "policy.ema_decay", "decay ∈ [0, 1)")?;
        require(p.sft.lr >= 0.0, "policy.sft.lr", "lr ≥ 0")?;
        require(p.sft.batch_size >= 1, "policy.sft.batch_size", "≥ 1")?;

        let t = &self.tokenizer;
        require(t.batch_size >= 1, "tokenizer.batch_size", "≥ 1")?;
        require(t.lr >= 0.0, "tokenizer.lr", "lr ≥ 0")?;

        let d = &self.driver;
        require(d.batch_size >= 1, "driver.batch_size", "B ≥ 1")?;
        require(unit_decay(d.teacher_ema_decay), "driver.teacher_ema_decay", "decay ∈ [0, 1)")?;
        require(d.macro_rounds >= 1, "driver.macro_rounds", "≥ 1")?;
        require(d.log_every >= 1, "driver.log_every", "≥ 1")?;

        let g = &self.diagnostics;
        require(g.probe_every >= 1, "diagnostics.probe_every", "≥ 1")?;
        require(g.probe_samples >= 1, "diagnostics.probe_samples", "n ≥ 1")?;
        require(g.eval_samples >= 17, "diagnostics.eval_samples", "≥ 17 (feature dim + 1)")?;
        if let Some(l) = g.smoothing {
            require(l >= 0.0, "diagnostics.smoothing", "λ ≥ 0")?;
        }
        Ok(())
    }

    pub fn from_json_str(text: &str) -> Result<RunConfig> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            reject(if path.is_empty() { "." } else { &path }, e.into_inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the compact JSON form, hex encoded.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        hex(&Sha256::digest(text.as_bytes()))
    }

    /// Applies `COEVO_SEED` if set.
    pub fn apply_env_overrides(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var("COEVO_SEED") {
            self.seeds.run = v
                .trim()
                .parse()
                .map_err(|_| reject("COEVO_SEED", format!("not an unsigned integer: `{v}`")))?;
        }
        Ok(())
    }

    pub fn smoothing(&self, vocab: usize) -> f64 {
        self.diagnostics
            .smoothing
            .unwrap_or_else(|| crate::diagnostics::default_smoothing(vocab))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| CoevoError::io(path, e))?;
    RunConfig::from_json_str(&text)
}

/// Writes `config.effective.json` into `dir` and returns its path.
pub fn write_effective(config: &RunConfig, dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| CoevoError::io(dir, e))?;
    let path = dir.join("config.effective.json");
    std::fs::write(&path, config.to_json()).map_err(|e| CoevoError::io(&path, e))?;
    Ok(path)
}
