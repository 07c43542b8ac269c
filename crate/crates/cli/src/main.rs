//! `coevo`: command-line entry point for pretraining, post-training, probing,
//! ablations and plotting.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use coevo_core::config::{load_config, write_effective, Mode, RunConfig};
use coevo_core::diagnostics::codebook_entropy;
use coevo_core::domain;
use coevo_core::driver::{
    evaluate, prepare, run_hash, shift_probe, tokenizer_checkpoint, tokenizer_from_checkpoint, train_prepared,
    TrainState, World,
};
use coevo_core::io::checkpoint::{load_checkpoint, save_checkpoint};
use coevo_core::io::export::export_dataset;
use coevo_core::io::metrics::read_metrics;
use coevo_core::io::plots::emit_plots;
use coevo_core::tokenizer::pretrain_tokenizer;
use coevo_core::{CoevoError, Result};
use serde_json::json;

#[derive(Parser)]
#[command(name = "coevo", version, about = "Joint policy/decoder post-training on a procedural image domain")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// JSON run config; omitted keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `paths.out_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides `driver.total_steps`.
    #[arg(long)]
    steps: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain the VQ tokenizer and save it.
    TokenizerPretrain(Common),
    /// Pretrain the tokenizer, then run supervised policy pretraining.
    Sft(Common),
    /// Full pipeline in the configured mode.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        mode: Option<String>,
    },
    /// Shift probe and evaluation of a saved training checkpoint.
    Probe {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Tokenizer checkpoint; defaults to `tokenizer.ckpt` beside the checkpoint.
        #[arg(long)]
        tokenizer: Option<PathBuf>,
    },
    /// One run per mode from a shared SFT initialisation, plus comparison plots.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "sft,policy_only,decoder_only,full")]
        modes: Vec<String>,
    },
    /// Full-mode runs with one decoder loss weight zeroed per run.
    AblateLosses {
        #[command(flatten)]
        common: Common,
        /// Any of r (recon), g (rank-gan), c (consistency), d (reward).
        #[arg(long, value_delimiter = ',', required = true)]
        zero: Vec<String>,
    },
    /// CSV and SVG plots from one or more metrics files given as `label=path`.
    Plot {
        #[arg(long = "run", required = true)]
        runs: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Writes rendered images and their prompts.
    ExportDataset {
        #[arg(long)]
        out: PathBuf,
        /// Number of random samples; every prompt once if omitted.
        #[arg(long)]
        n: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn config_from(common: &Common) -> Result<RunConfig> {
    let mut config = match &common.config {
        Some(p) => load_config(p)?,
        None => RunConfig::default(),
    };
    config.apply_env_overrides()?;
    if let Some(out) = &common.out {
        config.paths.out_dir = out.clone();
    }
    if let Some(steps) = common.steps {
        config.driver.total_steps = steps;
    }
    config.validate()?;
    Ok(config)
}

fn run(cli: Cli) -> Result<serde_json::Value> {
    match cli.command {
        Command::TokenizerPretrain(common) => {
            let config = config_from(&common)?;
            let dir = &config.paths.out_dir;
            write_effective(&config, dir)?;
            let (tokenizer, loss) =
                pretrain_tokenizer(&domain::exhaustive_dataset(), &config.tokenizer, config.seeds.tokenizer)?;
            let path = dir.join("tokenizer.ckpt");
            save_checkpoint(&tokenizer_checkpoint(&tokenizer, &run_hash(&config)), &path, config.driver.checkpoint_dtype)?;
            Ok(json!({"tokenizer": path, "final_loss": loss}))
        }
        Command::Sft(common) => {
            let config = config_from(&common)?;
            let dir = &config.paths.out_dir;
            write_effective(&config, dir)?;
            let (tokenizer, world, sft) = prepare(&config)?;
            let hash = run_hash(&config);
            let state = TrainState::new(sft, tokenizer.decoder.clone(), &config);
            let dtype = config.driver.checkpoint_dtype;
            save_checkpoint(&tokenizer_checkpoint(&tokenizer, &hash), &dir.join("tokenizer.ckpt"), dtype)?;
            save_checkpoint(&state.to_checkpoint(&world, &hash), &dir.join("sft.ckpt"), dtype)?;
            Ok(json!({"out_dir": dir, "probe": probe_json(&state, &world, &config)?}))
        }
        Command::Train { common, mode } => {
            let mut config = config_from(&common)?;
            if let Some(m) = mode {
                config.driver.mode = Mode::parse(&m)?;
            }
            let (tokenizer, world, sft) = prepare(&config)?;
            let out = train_prepared(&config, &tokenizer, &world, &sft)?;
            Ok(json!({"out_dir": out.out_dir, "final_checkpoint": out.final_checkpoint, "metrics": out.metrics}))
        }
        Command::Probe {
            common,
            checkpoint,
            tokenizer,
        } => {
            let config = config_from(&common)?;
            let tok_path = tokenizer.unwrap_or_else(|| sibling(&checkpoint, "tokenizer.ckpt"));
            let tokenizer = tokenizer_from_checkpoint(&load_checkpoint(&tok_path)?)?;
            let world = World::new(&tokenizer, &config)?;
            let ckpt = load_checkpoint(&checkpoint)?;
            let state = TrainState::from_checkpoint(&ckpt, &config)?;
            let mut out = probe_json(&state, &world, &config)?;
            if ckpt.config_hash != run_hash(&config) {
                out["warning_config_hash_mismatch"] = json!(1.0);
            }
            Ok(out)
        }
        Command::Ablate { common, modes } => {
            let config = config_from(&common)?;
            let modes = modes.iter().map(|m| Mode::parse(m)).collect::<Result<Vec<_>>>()?;
            let variants = modes
                .into_iter()
                .map(|m| {
                    let mut c = config.clone();
                    c.driver.mode = m;
                    (m.name().to_string(), c)
                })
                .collect();
            run_variants(&config, variants)
        }
        Command::AblateLosses { common, zero } => {
            let mut config = config_from(&common)?;
            config.driver.mode = Mode::Full;
            let mut variants = Vec::new();
            for z in &zero {
                let mut c = config.clone();
                let lambdas = &mut c.stage2;
                match z.as_str() {
                    "r" => lambdas.lambda_r = 0.0,
                    "g" => lambdas.lambda_g = 0.0,
                    "c" => lambdas.lambda_c = 0.0,
                    "d" => lambdas.lambda_d = 0.0,
                    other => return Err(CoevoError::invalid(format!("--zero expects r, g, c or d, got `{other}`"))),
                }
                c.validate()?;
                variants.push((format!("zero_{z}"), c));
            }
            run_variants(&config, variants)
        }
        Command::Plot { runs, out } => {
            let mut loaded = Vec::new();
            for r in &runs {
                let (label, path) = match r.split_once('=') {
                    Some((l, p)) => (l.to_string(), PathBuf::from(p)),
                    None => (r.clone(), PathBuf::from(r)),
                };
                loaded.push((label, read_metrics(&path)?));
            }
            let files = emit_plots(&loaded, &out)?;
            Ok(json!({"files": files}))
        }
        Command::ExportDataset { out, n, seed } => {
            let data = match n {
                Some(n) => domain::dataset(n, &mut coevo_core::rng::stream(seed, &[coevo_core::rng::tag::DATASET]))?,
                None => domain::exhaustive_dataset(),
            };
            export_dataset(&data, &out)?;
            Ok(json!({"out_dir": out, "images": data.len()}))
        }
    }
}

/// Runs each variant from one shared tokenizer and SFT policy, each into
/// `<out_dir>/<label>`, then plots them together into `<out_dir>/plots`.
fn run_variants(base: &RunConfig, variants: Vec<(String, RunConfig)>) -> Result<serde_json::Value> {
    let (tokenizer, world, sft) = prepare(base)?;
    let root = base.paths.out_dir.clone();
    let mut runs = Vec::new();
    let mut summary = serde_json::Map::new();
    for (label, mut c) in variants {
        c.paths.out_dir = root.join(&label);
        let out = train_prepared(&c, &tokenizer, &world, &sft)?;
        summary.insert(label.clone(), json!(out.out_dir));
        runs.push((label, read_metrics(&out.metrics)?));
    }
    let plots = emit_plots(&runs, &root.join("plots"))?;
    Ok(json!({"runs": summary, "plots": plots.len()}))
}

fn probe_json(state: &TrainState, world: &World, config: &RunConfig) -> Result<serde_json::Value> {
    let shift = shift_probe(state, world, config)?;
    let eval = evaluate(state, world, config)?;
    Ok(json!({
        "step": state.step,
        "kl_nats": shift.kl_nats,
        "entropy_bits": shift.entropy_bits,
        "baseline_kl": shift.baseline_kl,
        "gt_entropy_bits": codebook_entropy(&world.probe_gt, world.smoothing)?,
        "mean_reward": eval.mean_reward,
        "clip_like": eval.clip_like,
        "blackbox": eval.blackbox,
        "frechet": eval.frechet,
    }))
}

fn sibling(path: &Path, name: &str) -> PathBuf {
    path.parent().unwrap_or(Path::new(".")).join(name)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("{}", json!({"error": "usage", "message": first}));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(v) => {
            println!("{v}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", json!({"error": e.kind(), "message": e.to_string()}));
            ExitCode::FAILURE
        }
    }
}
