//! Command-line interface.
//!
//! Exit codes: 0 on success, 1 on usage errors, 2 on data/config/protocol
//! errors. All subcommands accept `--config <file>` (a JSON
//! [`ExperimentConfig`], or the builtin names `default` / `in-class`),
//! `--seed`, and `--out <dir>` where applicable.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use crate::harness::experiments::{
    ablation_suite, bench, linear_vs_ssm_noise, noise_sweep, require_threshold_checkpoint, NOISE_LEVELS_DB,
};
use crate::harness::{
    bundle_hash, history_to_csv, read_bundle, read_raw_bundle, ExperimentConfig, ExperimentReport,
};
use crate::model::{load_checkpoint, save_checkpoint, CheckpointMeta, ModelState};
use crate::preprocess::build_dataset;
use crate::synth::{generate_dataset, GeneratedData};
use crate::train::{evaluate, train, SplitGuard};
use crate::{Error, Result};

#[derive(Parser)]
#[command(name = "pdsovnet", version, about = "Wheel roughness regression from axle-box vibration")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset bundle.
    Gen {
        #[arg(long, default_value = "default")]
        config: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Convert a raw-mode bundle into a cached bundle via the preprocessing
    /// pipeline (speed filter, revolution cuts, angle resampling, labels).
    Preprocess {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on a bundle: n_runs seeded runs, per-epoch history, final and
    /// threshold checkpoints.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "default")]
        config: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on one split of a bundle.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Which split to evaluate: train or val.
        #[arg(long, default_value = "val")]
        split: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the two ablation grids (branches; MIMO x adaptive).
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "default")]
        config: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Noise robustness sweep from the MAE-threshold checkpoint.
    NoiseSweep {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated SNR levels in dB.
        #[arg(long, default_value = "2,1,-1,-2")]
        levels: String,
        /// Noise draws per level.
        #[arg(long, default_value_t = 5)]
        seeds: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train ssm and linear temporal variants to the threshold, then
    /// noise-sweep both.
    LinearVsSsm {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "default")]
        config: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Parameter count and per-sample latency self-profile.
    Bench {
        #[arg(long, default_value = "default")]
        config: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Parses argv and runs; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e);
            e.exit_code()
        }
    }
}

fn write_report(out: &Path, name: &str, report: &ExperimentReport) -> Result<()> {
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join(format!("{}.csv", name)), report.to_csv())?;
    std::fs::write(out.join(format!("{}_table.txt", name)), report.to_table())?;
    println!("{}", report.to_table());
    Ok(())
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Gen { config, seed, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let data = generate_dataset(&cfg.dataset, seed)?;
            crate::harness::write_bundle(&out, &data)?;
            println!(
                "bundle written to {}: {} train + {} val samples, {} groups",
                out.display(),
                data.train.len(),
                data.val.len(),
                cfg.dataset.groups
            );
            Ok(())
        }
        Command::Preprocess { data, out } => {
            let (records, profiles, split) = read_raw_bundle(&data)?;
            let manifest = crate::harness::read_manifest(&data)?;
            let (train_batch, val_batch) = build_dataset(&records, &profiles, &split)?;
            let processed = GeneratedData {
                train: train_batch,
                val: val_batch,
                split,
                config: manifest.generator.clone().unwrap_or_default(),
                seed: manifest.seed,
                truths: Vec::new(),
                raw: None,
            };
            crate::harness::write_bundle(&out, &processed)?;
            println!(
                "preprocessed {} raw records into {} train + {} val samples at {}",
                records.len(),
                processed.train.len(),
                processed.val.len(),
                out.display()
            );
            Ok(())
        }
        Command::Train { data, config, seed, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let bundle = read_bundle(&data)?;
            std::fs::create_dir_all(&out)?;
            let mut all_history = Vec::new();
            let mut summary = Vec::new();
            for run in 0..cfg.train.n_runs {
                let run_seed = seed + run as u64;
                let result = train(&bundle.train, &bundle.val, &cfg.model, &cfg.train, run as u64, run_seed)?;
                let last_train = result
                    .history
                    .iter()
                    .rev()
                    .find(|r| r.split == crate::preprocess::Split::Train)
                    .map(|r| r.mae)
                    .unwrap_or(f64::NAN);
                let meta = CheckpointMeta {
                    config: cfg.model.clone(),
                    epoch: cfg.train.epochs,
                    seed: run_seed,
                    metrics: [("train_mae".to_string(), last_train)].into_iter().collect(),
                };
                let final_path = out.join(format!("checkpoint_final_run{}.bin", run));
                save_checkpoint(&result.final_state, &meta, &final_path)?;
                if run == 0 {
                    save_checkpoint(&result.final_state, &meta, &out.join("checkpoint_final.bin"))?;
                }
                match &result.threshold_state {
                    Some((epoch, state)) => {
                        let tmeta = CheckpointMeta {
                            config: cfg.model.clone(),
                            epoch: *epoch,
                            seed: run_seed,
                            metrics: meta.metrics.clone(),
                        };
                        let tpath = out.join(format!("checkpoint_threshold_run{}.bin", run));
                        save_checkpoint(state, &tmeta, &tpath)?;
                        if run == 0 {
                            save_checkpoint(state, &tmeta, &out.join("checkpoint_threshold.bin"))?;
                        }
                        summary.push(format!("run {}: threshold MAE reached at epoch {}", run, epoch));
                    }
                    None => summary.push(format!(
                        "run {}: training MAE never reached {}; no threshold checkpoint",
                        run, cfg.train.checkpoint_mae_threshold
                    )),
                }
                all_history.extend(result.history);
            }
            std::fs::write(out.join("history.csv"), history_to_csv(&all_history))?;
            let manifest = serde_json::json!({
                "config": cfg,
                "config_hash": cfg.hash(),
                "bundle": data.display().to_string(),
                "bundle_hash": bundle_hash(&data)?,
                "base_seed": seed,
                "notes": summary,
            });
            std::fs::write(out.join("run_manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
            for line in &summary {
                println!("{}", line);
            }
            println!("history and checkpoints written to {}", out.display());
            Ok(())
        }
        Command::Eval { checkpoint, data, split, out } => {
            let (state, meta) = load_checkpoint(&checkpoint)?;
            let bundle = read_bundle(&data)?;
            let (batch, guard) = match split.as_str() {
                "train" => (&bundle.train, None),
                "val" => (&bundle.val, Some(SplitGuard { forbidden_groups: bundle.train_groups() })),
                other => return Err(Error::Usage(format!("unknown split '{}'; use train or val", other))),
            };
            let report = evaluate(&state, batch, guard.as_ref())?;
            println!(
                "split={} n={} mae={:.4} r2={:.4} (checkpoint epoch {})",
                split, report.n_samples, report.mae, report.r2, meta.epoch
            );
            if let Some(out) = out {
                std::fs::create_dir_all(&out)?;
                let mut csv = String::from("order,mae\n");
                for (k, v) in report.per_order_mae.iter().enumerate() {
                    csv.push_str(&format!("{},{:.9}\n", k + 1, v));
                }
                let mut channel_csv = String::from("channel,mae\n");
                for (c, v) in report.per_channel_mae.iter().enumerate() {
                    channel_csv.push_str(&format!("{},{:.9}\n", c, v));
                }
                std::fs::write(out.join("per_order_mae.csv"), csv)?;
                std::fs::write(out.join("per_channel_mae.csv"), channel_csv)?;
                println!("per-order and per-channel breakdowns written to {}", out.display());
            }
            Ok(())
        }
        Command::Ablate { data, config, seed, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let bundle = read_bundle(&data)?;
            let mut report = ablation_suite(&bundle.train, &bundle.val, &cfg, seed)?;
            report.header.push(format!("config_hash={} bundle_hash={}", cfg.hash(), bundle_hash(&data)?));
            write_report(&out, "ablation", &report)
        }
        Command::NoiseSweep { checkpoint, data, levels, seeds, seed, out } => {
            require_threshold_checkpoint(&checkpoint)?;
            let (state, _meta) = load_checkpoint(&checkpoint)?;
            let bundle = read_bundle(&data)?;
            let levels: Vec<f64> = if levels.trim().is_empty() {
                NOISE_LEVELS_DB.to_vec()
            } else {
                levels
                    .split(',')
                    .map(|s| {
                        s.trim()
                            .parse::<f64>()
                            .map_err(|_| Error::Usage(format!("invalid noise level '{}'", s)))
                    })
                    .collect::<Result<Vec<f64>>>()?
            };
            let mut report = ExperimentReport::default();
            report.header.push(
                "noise levels are per-channel SNR in dB; noise injected on the training split \
                 from the MAE<=0.8 reference checkpoint"
                    .into(),
            );
            report.header.push(format!("checkpoint={} bundle_hash={}", checkpoint.display(), bundle_hash(&data)?));
            noise_sweep(&state, &bundle.train, &levels, seeds, seed, "checkpoint", "train", &mut report)?;
            write_report(&out, "noise_sweep", &report)
        }
        Command::LinearVsSsm { data, config, seed, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let bundle = read_bundle(&data)?;
            let mut report = linear_vs_ssm_noise(&bundle.train, &bundle.val, &cfg, seed)?;
            report.header.push(format!("config_hash={} bundle_hash={}", cfg.hash(), bundle_hash(&data)?));
            write_report(&out, "linear_vs_ssm", &report)
        }
        Command::Bench { config, seed, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let report = bench(&cfg, seed)?;
            match out {
                Some(out) => write_report(&out, "bench", &report),
                None => {
                    println!("{}", report.to_table());
                    Ok(())
                }
            }
        }
    }
}

// Re-exported for integration tests that drive the CLI in-process.
pub use self::main_with_args as run;

#[allow(unused)]
fn _assert_state_is_send(_: ModelState) {}
