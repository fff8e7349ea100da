//! Experiment suites: noise sweeps from the threshold checkpoint, the
//! branch/module ablation grids, the linear-vs-ssm temporal comparison, and
//! the parameter/latency profile.

use rand_chacha::ChaCha8Rng;

use rand::SeedableRng;

use crate::harness::{ExperimentConfig, ExperimentReport, MetricRecord};
use crate::model::{predict_batch, ModelConfig, ModelState, VariantFlags};
use crate::preprocess::{SampleBatch, ANGLE_POINTS};
use crate::synth::add_noise_at_snr;
use crate::temporal::TemporalVariant;
use crate::train::{evaluate, train, HistoryRow, SplitGuard};
use crate::{Error, Result};

/// The four perturbation levels of the noise protocol, as per-channel SNR
/// in dB; smaller SNR means stronger noise.
pub const NOISE_LEVELS_DB: [f64; 4] = [2.0, 1.0, -1.0, -2.0];

/// Returns a copy of `batch` with white Gaussian noise at `snr_db` added to
/// every sample, per channel, with exact injected power.
pub fn perturb_batch(batch: &SampleBatch, snr_db: f64, seed: u64) -> SampleBatch {
    let mut out = batch.clone();
    for i in 0..out.len() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let w = ANGLE_POINTS * crate::preprocess::N_CHANNELS;
        add_noise_at_snr(&mut out.x[i * w..(i + 1) * w], ANGLE_POINTS, snr_db, &mut rng);
    }
    out
}

/// Evaluates a trained state under the noise protocol: for every level, adds
/// noise to the inputs over `n_seeds` draws and records the MAE (plus a
/// clean control row per seed).
pub fn noise_sweep(
    state: &ModelState,
    batch: &SampleBatch,
    levels: &[f64],
    n_seeds: usize,
    base_seed: u64,
    variant: &str,
    split: &str,
    report: &mut ExperimentReport,
) -> Result<()> {
    for run in 0..n_seeds {
        let seed = base_seed + run as u64;
        let clean = evaluate(state, batch, None)?;
        report.push(MetricRecord {
            variant: variant.into(),
            run: run as u64,
            seed,
            noise_snr_db: None,
            split: split.into(),
            metric: "mae".into(),
            value: clean.mae,
        });
        for &level in levels {
            let noisy = perturb_batch(batch, level, seed ^ level.to_bits());
            let eval = evaluate(state, &noisy, None)?;
            report.push(MetricRecord {
                variant: variant.into(),
                run: run as u64,
                seed,
                noise_snr_db: Some(level),
                split: split.into(),
                metric: "mae".into(),
                value: eval.mae,
            });
        }
    }
    Ok(())
}

/// Output of one grid cell: the report rows are appended; the trained states
/// are returned for reuse (e.g. the noise sweep after training).
pub struct TrainedVariant {
    pub flags: VariantFlags,
    pub run: u64,
    pub seed: u64,
    pub history: Vec<HistoryRow>,
    pub final_state: ModelState,
    pub threshold_state: Option<(usize, ModelState)>,
}

/// Trains one variant for `n_runs` seeds and records final train/val metrics.
pub fn train_variant(
    flags: VariantFlags,
    bundle_train: &SampleBatch,
    bundle_val: &SampleBatch,
    config: &ExperimentConfig,
    base_seed: u64,
    report: &mut ExperimentReport,
) -> Result<Vec<TrainedVariant>> {
    let tag = flags.tag();
    let mut out = Vec::new();
    let guard = SplitGuard { forbidden_groups: bundle_train.group_ids.clone() };
    for run in 0..config.train.n_runs {
        let seed = base_seed + run as u64;
        let model_config = ModelConfig { flags, ..config.model.clone() };
        let result = train(bundle_train, bundle_val, &model_config, &config.train, run as u64, seed)?;
        let train_eval = evaluate(&result.final_state, bundle_train, None)?;
        let val_eval = evaluate(&result.final_state, bundle_val, Some(&guard))?;
        for (split, eval) in [("train", &train_eval), ("val", &val_eval)] {
            report.push(MetricRecord {
                variant: tag.clone(),
                run: run as u64,
                seed,
                noise_snr_db: None,
                split: split.into(),
                metric: "mae".into(),
                value: eval.mae,
            });
            report.push(MetricRecord {
                variant: tag.clone(),
                run: run as u64,
                seed,
                noise_snr_db: None,
                split: split.into(),
                metric: "r2".into(),
                value: eval.r2,
            });
        }
        out.push(TrainedVariant {
            flags,
            run: run as u64,
            seed,
            history: result.history,
            final_state: result.final_state,
            threshold_state: result.threshold_state,
        });
    }
    Ok(out)
}

/// The two ablation grids: {time-only, phys-only, full} and the 2x2
/// {use_mimo} x {use_adaptive} grid, `n_runs` seeds each.
pub fn ablation_suite(
    bundle_train: &SampleBatch,
    bundle_val: &SampleBatch,
    config: &ExperimentConfig,
    base_seed: u64,
) -> Result<ExperimentReport> {
    let mut report = ExperimentReport::default();
    report.header.push(format!("ablation grids; n_runs={} base_seed={}", config.train.n_runs, base_seed));
    let grid: Vec<VariantFlags> = vec![
        VariantFlags::time_only(),
        VariantFlags::phys_only(),
        VariantFlags::default(),
        // 2x2 over MIMO coupling and adaptive correction.
        VariantFlags { use_mimo: false, use_adaptive: false, ..Default::default() },
        VariantFlags { use_mimo: false, use_adaptive: true, ..Default::default() },
        VariantFlags { use_mimo: true, use_adaptive: false, ..Default::default() },
        VariantFlags::default(),
    ];
    for flags in grid {
        train_variant(flags, bundle_train, bundle_val, config, base_seed, &mut report)?;
    }
    Ok(report)
}

/// Trains the ssm and linear temporal variants to the MAE threshold, then
/// noise-sweeps both from their threshold checkpoints and reports paired
/// per-level deltas.
pub fn linear_vs_ssm_noise(
    bundle_train: &SampleBatch,
    bundle_val: &SampleBatch,
    config: &ExperimentConfig,
    base_seed: u64,
) -> Result<ExperimentReport> {
    let mut report = ExperimentReport::default();
    report
        .header
        .push(format!("temporal variant noise comparison; n_runs={} base_seed={}", config.train.n_runs, base_seed));
    let mut threshold_states: Vec<(String, u64, Option<ModelState>)> = Vec::new();
    for variant in [TemporalVariant::Ssm, TemporalVariant::Linear] {
        let flags = VariantFlags { temporal_variant: variant, ..Default::default() };
        let tag = match variant {
            TemporalVariant::Ssm => "temporal-ssm",
            TemporalVariant::Linear => "temporal-linear",
        };
        for run in 0..config.train.n_runs {
            let seed = base_seed + run as u64;
            let model_config = ModelConfig { flags, ..config.model.clone() };
            let result = train(bundle_train, bundle_val, &model_config, &config.train, run as u64, seed)?;
            match result.threshold_state {
                Some((epoch, state)) => {
                    report.header.push(format!(
                        "{} run {}: threshold reached at epoch {}",
                        tag, run, epoch
                    ));
                    threshold_states.push((tag.to_string(), run as u64, Some(state)));
                }
                None => {
                    report.header.push(format!(
                        "{} run {}: training MAE never reached {}; sweep skipped",
                        tag, run, config.train.checkpoint_mae_threshold
                    ));
                    threshold_states.push((tag.to_string(), run as u64, None));
                }
            }
        }
    }
    for (tag, run, state) in &threshold_states {
        if let Some(state) = state {
            let mut sub = ExperimentReport::default();
            noise_sweep(state, bundle_train, &NOISE_LEVELS_DB, 1, base_seed + *run, tag, "train", &mut sub)?;
            for mut record in sub.records {
                record.run = *run;
                report.push(record);
            }
        }
    }
    // Paired per-level deltas (linear - ssm), averaged over runs.
    for level in NOISE_LEVELS_DB {
        if let (Some(ssm), Some(lin)) = (
            report.mean("temporal-ssm", "mae", Some(level), "train"),
            report.mean("temporal-linear", "mae", Some(level), "train"),
        ) {
            report.push(MetricRecord {
                variant: "delta-linear-minus-ssm".into(),
                run: 0,
                seed: base_seed,
                noise_snr_db: Some(level),
                split: "train".into(),
                metric: "mae_delta".into(),
                value: lin - ssm,
            });
        }
    }
    Ok(report)
}

/// Parameter count plus wall-clock per-sample forward latency.
pub fn bench(config: &ExperimentConfig, seed: u64) -> Result<ExperimentReport> {
    let state = ModelState::init(&config.model, seed)?;
    let data = crate::synth::generate_dataset(
        &crate::synth::SynthConfig { groups: 2, train_groups: 1, samples_per_group: 8, ..config.dataset.clone() },
        seed,
    )?;
    let batch = &data.train;
    // Warm-up pass, then timed passes.
    predict_batch(&state, batch)?;
    let start = std::time::Instant::now();
    let reps = 3;
    for _ in 0..reps {
        predict_batch(&state, batch)?;
    }
    let per_sample_ms = start.elapsed().as_secs_f64() * 1e3 / (reps * batch.len()) as f64;
    let mut report = ExperimentReport::default();
    report.header.push("self-profile: parameter count and per-sample forward latency".into());
    report.push(MetricRecord {
        variant: config.model.flags.tag(),
        run: 0,
        seed,
        noise_snr_db: None,
        split: "n/a".into(),
        metric: "param_count".into(),
        value: state.param_count() as f64,
    });
    report.push(MetricRecord {
        variant: config.model.flags.tag(),
        run: 0,
        seed,
        noise_snr_db: None,
        split: "n/a".into(),
        metric: "latency_ms_per_sample".into(),
        value: per_sample_ms,
    });
    Ok(report)
}

/// Errors when the threshold checkpoint required by the noise protocol is
/// missing.
pub fn require_threshold_checkpoint(path: &std::path::Path) -> Result<()> {
    if !path.exists() {
        return Err(Error::Protocol(format!(
            "noise sweep requires the reference checkpoint saved when the training MAE first \
             dropped to the 0.8 level; '{}' does not exist (run `train` first)",
            path.display()
        )));
    }
    Ok(())
}
