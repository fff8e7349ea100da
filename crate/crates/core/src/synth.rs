//! Physics-based synthetic data oracle.
//!
//! Ground truth is a bank of second-order modal responses with cross-channel
//! coupling: per group, roughness spectra are drawn from a per-order
//! log-amplitude band (with a few emphasized "polygon" orders), the transfer
//! magnitude `G_k = sum_m |H_m(k)|` shapes per-order tone amplitudes, tones
//! are mixed across channels by a diagonally dominant 4x4 matrix, and white
//! Gaussian noise is added at an exact per-channel SNR. Held-out groups get
//! jittered modal parameters, mirroring the unseen-wheel setting.
//!
//! Samples are keyed to rng streams derived from (seed, sample index), so a
//! bundle is bit-identical for a fixed seed.

use std::f64::consts::TAU;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::physbranch::sos_kernel_magnitude;
use crate::preprocess::{
    db_floor, RawRecord, SampleBatch, Split, SplitMap, WheelProfile, ANGLE_POINTS, LABEL_REF_MM,
    N_CHANNELS, N_ORDERS, VIB_RATE_HZ,
};
use crate::{Error, Result};

/// Ground-truth modal parameters of one group.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TruthModes {
    pub centers: Vec<f64>,
    pub dampings: Vec<f64>,
    pub gains: Vec<f64>,
}

impl TruthModes {
    fn validate(&self) -> Result<()> {
        for &c in &self.centers {
            if !(1.0 < c && c < 40.0) {
                return Err(Error::Config(format!("truth center {} outside (1, 40)", c)));
            }
        }
        if self.dampings.iter().any(|&z| z <= 0.0) || self.gains.iter().any(|&g| g <= 0.0) {
            return Err(Error::Config("truth dampings and gains must be positive".into()));
        }
        Ok(())
    }

    /// Transfer magnitude `G_k = sum_m |H_m(o_k)|` on the order grid.
    pub fn transfer_magnitude(&self) -> Vec<f64> {
        (1..=N_ORDERS)
            .map(|k| {
                self.centers
                    .iter()
                    .zip(&self.dampings)
                    .zip(&self.gains)
                    .map(|((&c, &z), &g)| sos_kernel_magnitude(c, z, g, k as f64, 0.0))
                    .sum()
            })
            .collect()
    }
}

/// Ground-truth generative system of one group.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TruthModel {
    pub modes: TruthModes,
    /// Row-major 4x4 channel mixing matrix, diagonally dominant.
    pub coupling: Vec<f64>,
    /// Per-channel SNR of added white noise; None for a clean bundle.
    pub snr_db: Option<f64>,
}

impl TruthModel {
    fn validate(&self) -> Result<()> {
        self.modes.validate()?;
        for i in 0..N_CHANNELS {
            let diag = self.coupling[i * N_CHANNELS + i].abs();
            let off: f64 =
                (0..N_CHANNELS).filter(|&j| j != i).map(|j| self.coupling[i * N_CHANNELS + j].abs()).sum();
            if diag <= off {
                return Err(Error::Config(format!(
                    "coupling row {} not diagonally dominant ({} <= {})",
                    i, diag, off
                )));
            }
        }
        Ok(())
    }
}

/// Per-order roughness band of one group: log10 amplitudes are drawn
/// uniformly in `mean +- spread`, and each channel's polygon orders are
/// boosted by a factor drawn in `[boost_lo, boost_hi]`.
#[derive(Debug, Clone)]
pub struct RoughnessProfile {
    /// Per-order mean of log10(amplitude in mm), length 40.
    pub log10_mean: Vec<f64>,
    pub log10_spread: f64,
    /// Emphasized polygon orders (1-based) per channel.
    pub polygon_orders: [Vec<usize>; N_CHANNELS],
    pub boost_lo: f64,
    pub boost_hi: f64,
}

/// Draws one group's roughness spectrum, shape [40, 4] row-major, linear mm.
pub fn sample_roughness_spectrum(rng: &mut impl Rng, profile: &RoughnessProfile) -> Vec<f64> {
    let mut spec = vec![0.0; N_ORDERS * N_CHANNELS];
    for c in 0..N_CHANNELS {
        for k in 0..N_ORDERS {
            let mean = profile.log10_mean[k];
            let draw = if profile.log10_spread > 0.0 {
                rng.gen_range(mean - profile.log10_spread..mean + profile.log10_spread)
            } else {
                mean
            };
            spec[k * N_CHANNELS + c] = 10f64.powf(draw);
        }
        for &k in &profile.polygon_orders[c] {
            let boost = if profile.boost_hi > profile.boost_lo {
                rng.gen_range(profile.boost_lo..profile.boost_hi)
            } else {
                profile.boost_lo
            };
            spec[(k - 1) * N_CHANNELS + c] *= boost;
        }
    }
    spec
}

/// Synthesizes one angle-domain sample x [400, 4] from a roughness spectrum.
/// Phases are uniform per (order, channel); noise power is scaled per channel
/// to hit the requested SNR exactly.
pub fn synthesize_vibration(spectrum: &[f64], truth: &TruthModel, rng: &mut impl Rng) -> Vec<f64> {
    let transfer = truth.modes.transfer_magnitude();
    let mut clean = vec![0.0; ANGLE_POINTS * N_CHANNELS];
    for c in 0..N_CHANNELS {
        for k in 0..N_ORDERS {
            let amp = spectrum[k * N_CHANNELS + c] * transfer[k];
            let phase: f64 = rng.gen_range(0.0..TAU);
            let omega = TAU * (k + 1) as f64 / ANGLE_POINTS as f64;
            for j in 0..ANGLE_POINTS {
                clean[j * N_CHANNELS + c] += amp * (omega * j as f64 + phase).cos();
            }
        }
    }
    // Channel mixing: x = s * C^T.
    let mut x = vec![0.0; ANGLE_POINTS * N_CHANNELS];
    for j in 0..ANGLE_POINTS {
        for i in 0..N_CHANNELS {
            let mut acc = 0.0;
            for c in 0..N_CHANNELS {
                acc += truth.coupling[i * N_CHANNELS + c] * clean[j * N_CHANNELS + c];
            }
            x[j * N_CHANNELS + i] = acc;
        }
    }
    if let Some(snr) = truth.snr_db {
        add_noise_at_snr(&mut x, ANGLE_POINTS, snr, rng);
    }
    x
}

/// Adds white Gaussian noise per channel with power scaled so the measured
/// per-channel SNR equals `snr_db` exactly (up to float rounding).
pub fn add_noise_at_snr(x: &mut [f64], rows: usize, snr_db: f64, rng: &mut impl Rng) {
    let channels = x.len() / rows;
    for c in 0..channels {
        let p_signal: f64 = (0..rows).map(|j| x[j * channels + c].powi(2)).sum::<f64>() / rows as f64;
        if p_signal == 0.0 {
            continue;
        }
        let noise: Vec<f64> = crate::nninit::normal_vec(rng, rows, 1.0);
        let p_noise: f64 = noise.iter().map(|v| v * v).sum::<f64>() / rows as f64;
        if p_noise == 0.0 {
            continue;
        }
        let target = p_signal * 10f64.powf(-snr_db / 10.0);
        let scale = (target / p_noise).sqrt();
        for (j, n) in noise.iter().enumerate() {
            x[j * channels + c] += scale * n;
        }
    }
}

/// Generator configuration; all fields have bundle-manifest defaults.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct SynthConfig {
    pub groups: usize,
    pub train_groups: usize,
    pub samples_per_group: usize,
    /// Ground-truth mode count (fewer than the model's M by default).
    pub modes_true: usize,
    /// Identity channel mixing when true (the in-class setting).
    pub diagonal_coupling: bool,
    /// Off-diagonal magnitude of the truth coupling (row-dominance requires < 1/3).
    pub coupling_strength: f64,
    /// Relative jitter of per-group modal parameters.
    pub jitter_pct: f64,
    /// Per-channel SNR of measurement noise; None for clean data.
    pub snr_db: Option<f64>,
    /// Scale of the truth modal gains (sets absolute vibration level).
    pub gain_scale: f64,
    /// Roughness band: mean log10 amplitude (mm) at order 1 and its decay to
    /// order 40, plus the uniform spread.
    pub amp_log10_at_order1: f64,
    pub amp_log10_decay: f64,
    pub amp_log10_spread: f64,
    /// Polygon orders per channel and their boost range.
    pub polygon_orders_per_channel: usize,
    pub boost_lo: f64,
    pub boost_hi: f64,
    /// Also emit 10 kHz raw records + profiles for the preprocessing path.
    pub raw_mode: bool,
    /// Seconds of raw signal per group in raw mode.
    pub raw_seconds: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            groups: 28,
            train_groups: 24,
            samples_per_group: 16,
            modes_true: 6,
            diagonal_coupling: false,
            coupling_strength: 0.2,
            jitter_pct: 0.08,
            snr_db: Some(25.0),
            gain_scale: 350.0,
            amp_log10_at_order1: -2.2,
            amp_log10_decay: 0.8,
            amp_log10_spread: 0.35,
            polygon_orders_per_channel: 2,
            boost_lo: 3.0,
            boost_hi: 10.0,
            raw_mode: false,
            raw_seconds: 8,
        }
    }
}

impl SynthConfig {
    /// Noiseless bundle whose truth lies inside the model's hypothesis
    /// class: M_true = 12 modes, diagonal coupling, no group jitter.
    pub fn in_class() -> Self {
        SynthConfig {
            modes_true: crate::physbranch::N_MODES,
            diagonal_coupling: true,
            jitter_pct: 0.0,
            snr_db: None,
            amp_log10_spread: 0.25,
            polygon_orders_per_channel: 0,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.groups < 2 || self.train_groups == 0 || self.train_groups >= self.groups {
            return Err(Error::Config(format!(
                "need >= 2 groups with a non-empty held-out split (groups {}, train {})",
                self.groups, self.train_groups
            )));
        }
        if self.samples_per_group < 1 {
            return Err(Error::Config("samples_per_group must be >= 1".into()));
        }
        if self.coupling_strength >= 1.0 / 3.0 && !self.diagonal_coupling {
            return Err(Error::Config("coupling_strength must stay below 1/3 for diagonal dominance".into()));
        }
        Ok(())
    }
}

/// A generated dataset plus everything needed to reproduce and audit it.
#[derive(Debug, Clone)]
pub struct GeneratedData {
    pub train: SampleBatch,
    pub val: SampleBatch,
    pub split: SplitMap,
    pub config: SynthConfig,
    pub seed: u64,
    /// Per-group ground truth (group id, truth model), for diagnostics.
    pub truths: Vec<(String, TruthModel)>,
    /// Raw-mode records and profiles, when requested.
    pub raw: Option<(Vec<RawRecord>, Vec<WheelProfile>)>,
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn group_name(i: usize) -> String {
    format!("g{:03}", i)
}

/// Per-group truth: base modes jittered by `jitter_pct`, using the group's
/// own rng stream.
fn group_truth(config: &SynthConfig, base: &TruthModes, coupling: &[f64], rng: &mut impl Rng) -> Result<TruthModel> {
    let jitter = |v: f64, rng: &mut dyn RngCore, pct: f64| -> f64 {
        if pct == 0.0 {
            v
        } else {
            let mut r = |lo: f64, hi: f64| rng.gen_range(lo..hi);
            v * (1.0 + pct * r(-1.0, 1.0))
        }
    };
    let modes = TruthModes {
        centers: base
            .centers
            .iter()
            .map(|&c| jitter(c, rng, config.jitter_pct).clamp(1.5, 39.5))
            .collect(),
        dampings: base.dampings.iter().map(|&z| jitter(z, rng, config.jitter_pct).max(0.02)).collect(),
        gains: base.gains.iter().map(|&g| jitter(g, rng, config.jitter_pct).max(1e-3)).collect(),
    };
    let truth = TruthModel { modes, coupling: coupling.to_vec(), snr_db: config.snr_db };
    truth.validate()?;
    Ok(truth)
}

fn base_modes(config: &SynthConfig, rng: &mut impl Rng) -> TruthModes {
    let m = config.modes_true;
    TruthModes {
        centers: (0..m).map(|i| 3.0 + 34.0 * i as f64 / (m - 1).max(1) as f64).collect(),
        dampings: (0..m).map(|_| rng.gen_range(0.08..0.25)).collect(),
        gains: (0..m).map(|_| config.gain_scale * rng.gen_range(0.5..1.5)).collect(),
    }
}

fn truth_coupling(config: &SynthConfig, rng: &mut impl Rng) -> Vec<f64> {
    let mut c = vec![0.0; N_CHANNELS * N_CHANNELS];
    for i in 0..N_CHANNELS {
        c[i * N_CHANNELS + i] = 1.0;
        if !config.diagonal_coupling {
            for j in 0..N_CHANNELS {
                if i != j {
                    c[i * N_CHANNELS + j] = config.coupling_strength * rng.gen_range(0.3..1.0)
                        * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                }
            }
        }
    }
    c
}

fn roughness_profile(config: &SynthConfig, rng: &mut impl Rng) -> RoughnessProfile {
    let log10_mean: Vec<f64> = (0..N_ORDERS)
        .map(|k| config.amp_log10_at_order1 - config.amp_log10_decay * k as f64 / (N_ORDERS - 1) as f64)
        .collect();
    let polygon_orders = std::array::from_fn(|_| {
        let mut orders = Vec::new();
        while orders.len() < config.polygon_orders_per_channel {
            let k = rng.gen_range(1..=25);
            if !orders.contains(&k) {
                orders.push(k);
            }
        }
        orders
    });
    RoughnessProfile {
        log10_mean,
        log10_spread: config.amp_log10_spread,
        polygon_orders,
        boost_lo: config.boost_lo,
        boost_hi: config.boost_hi,
    }
}

/// Labels of a spectrum: `20*log10(max(amp/ref, floor))` per entry.
pub fn spectrum_to_labels(spectrum: &[f64]) -> Vec<f64> {
    spectrum.iter().map(|&a| db_floor(a / LABEL_REF_MM)).collect()
}

/// Generates the full bundle. Group g gets rng stream g+1 for its truth and
/// roughness; sample i (global index) gets stream 1000 + i.
pub fn generate_dataset(config: &SynthConfig, seed: u64) -> Result<GeneratedData> {
    config.validate()?;
    let mut setup_rng = stream_rng(seed, 0);
    let base = base_modes(config, &mut setup_rng);
    let coupling = truth_coupling(config, &mut setup_rng);

    let train_ids: Vec<String> = (0..config.train_groups).map(group_name).collect();
    let val_ids: Vec<String> = (config.train_groups..config.groups).map(group_name).collect();
    let split = SplitMap::from_lists(&train_ids, &val_ids)?;

    let mut train = SampleBatch::default();
    let mut val = SampleBatch::default();
    let mut truths = Vec::with_capacity(config.groups);
    let mut raw_records = Vec::new();
    let mut raw_profiles = Vec::new();

    for gi in 0..config.groups {
        let gid = group_name(gi);
        let mut grng = stream_rng(seed, 1 + gi as u64);
        let truth = group_truth(config, &base, &coupling, &mut grng)?;
        let profile = roughness_profile(config, &mut grng);
        let spectrum = sample_roughness_spectrum(&mut grng, &profile);
        let labels = spectrum_to_labels(&spectrum);
        truths.push((gid.clone(), truth.clone()));

        for si in 0..config.samples_per_group {
            let sample_index = (gi * config.samples_per_group + si) as u64;
            let mut srng = stream_rng(seed, 1000 + sample_index);
            let speed: f64 = srng.gen_range(295.0..305.0);
            let x = synthesize_vibration(&spectrum, &truth, &mut srng);
            let v = [speed; N_CHANNELS];
            match split.get(&gid).unwrap() {
                Split::Train => train.push(&x, &v, &labels, &gid),
                Split::Val => val.push(&x, &v, &labels, &gid),
            }
        }

        if config.raw_mode {
            let mut rrng = stream_rng(seed, 500_000 + gi as u64);
            let (record, profiles) = synthesize_raw_record(config, &gid, &spectrum, &truth, &mut rrng);
            raw_records.push(record);
            raw_profiles.extend(profiles);
        }
    }

    Ok(GeneratedData {
        train,
        val,
        split,
        config: config.clone(),
        seed,
        truths,
        raw: if config.raw_mode { Some((raw_records, raw_profiles)) } else { None },
    })
}

/// Raw-mode synthesis: a 10 kHz record at constant speed whose wheel profile
/// phases are fixed per group, plus the matching 400-point profiles.
fn synthesize_raw_record(
    config: &SynthConfig,
    gid: &str,
    spectrum: &[f64],
    truth: &TruthModel,
    rng: &mut impl Rng,
) -> (RawRecord, Vec<WheelProfile>) {
    let transfer = truth.modes.transfer_magnitude();
    let speed: f64 = rng.gen_range(296.0..304.0);
    let circumference = 2.9;
    let seconds = config.raw_seconds;
    let n = seconds * VIB_RATE_HZ as usize;
    let phases: Vec<f64> = (0..N_ORDERS * N_CHANNELS).map(|_| rng.gen_range(0.0..TAU)).collect();

    // theta(t) = 2*pi * v*t / C.
    let omega = TAU * speed / 3.6 / circumference / VIB_RATE_HZ;
    let mut clean = vec![0.0; n * N_CHANNELS];
    for c in 0..N_CHANNELS {
        for k in 0..N_ORDERS {
            let amp = spectrum[k * N_CHANNELS + c] * transfer[k];
            if amp == 0.0 {
                continue;
            }
            let w = omega * (k + 1) as f64;
            let phase = phases[k * N_CHANNELS + c];
            for j in 0..n {
                clean[j * N_CHANNELS + c] += amp * (w * j as f64 + phase).cos();
            }
        }
    }
    let mut vibration: [Vec<f64>; N_CHANNELS] = std::array::from_fn(|_| vec![0.0; n]);
    for j in 0..n {
        for i in 0..N_CHANNELS {
            let mut acc = 0.0;
            for c in 0..N_CHANNELS {
                acc += truth.coupling[i * N_CHANNELS + c] * clean[j * N_CHANNELS + c];
            }
            vibration[i][j] = acc;
        }
    }
    if let Some(snr) = truth.snr_db {
        for column in vibration.iter_mut() {
            let mut flat = std::mem::take(column);
            let rows = flat.len();
            add_noise_at_snr(&mut flat, rows, snr, rng);
            *column = flat;
        }
    }

    let profiles = (0..N_CHANNELS)
        .map(|c| WheelProfile {
            group_id: gid.to_string(),
            channel: c,
            deviation_mm: (0..ANGLE_POINTS)
                .map(|j| {
                    let th = TAU * j as f64 / ANGLE_POINTS as f64;
                    (0..N_ORDERS)
                        .map(|k| {
                            spectrum[k * N_CHANNELS + c]
                                * ((k + 1) as f64 * th + phases[k * N_CHANNELS + c]).cos()
                        })
                        .sum()
                })
                .collect(),
        })
        .collect();

    let record = RawRecord {
        vibration,
        speed_kmh: vec![speed; seconds],
        circumference_m: [circumference; N_CHANNELS],
        group_id: gid.to_string(),
    };
    (record, profiles)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::preprocess::profile_to_order_labels;

    fn flat_profile(mean: f64, spread: f64) -> RoughnessProfile {
        RoughnessProfile {
            log10_mean: vec![mean; N_ORDERS],
            log10_spread: spread,
            polygon_orders: std::array::from_fn(|_| Vec::new()),
            boost_lo: 3.0,
            boost_hi: 10.0,
        }
    }

    #[test]
    fn zero_spread_gives_mean_profile() {
        let mut rng = stream_rng(1, 0);
        let spec = sample_roughness_spectrum(&mut rng, &flat_profile(-2.0, 0.0));
        for &a in &spec {
            assert!((a - 0.01).abs() < 1e-15);
        }
    }

    #[test]
    fn fixed_boost_multiplies_band_mean() {
        let mut profile = flat_profile(-2.0, 0.0);
        profile.polygon_orders[0] = vec![17];
        profile.boost_lo = 10.0;
        profile.boost_hi = 10.0;
        let mut rng = stream_rng(2, 0);
        let spec = sample_roughness_spectrum(&mut rng, &profile);
        assert!((spec[16 * N_CHANNELS] - 0.1).abs() < 1e-12);
        assert!((spec[15 * N_CHANNELS] - 0.01).abs() < 1e-12);
    }

    #[test]
    fn monte_carlo_log_mean_within_three_standard_errors() {
        let profile = flat_profile(-2.5, 0.3);
        let mut rng = stream_rng(3, 0);
        let draws = 1000;
        let mut acc = vec![0.0; N_ORDERS];
        for _ in 0..draws {
            let spec = sample_roughness_spectrum(&mut rng, &profile);
            for k in 0..N_ORDERS {
                acc[k] += spec[k * N_CHANNELS].log10();
            }
        }
        // Uniform(-s, s) has sd s/sqrt(3); the mean of `draws` draws has
        // se = s/sqrt(3*draws).
        let se = 0.3 / (3.0 * draws as f64).sqrt();
        for k in 0..N_ORDERS {
            let mean = acc[k] / draws as f64;
            assert!((mean - (-2.5)).abs() < 3.0 * se, "order {}: {}", k + 1, mean);
        }
    }

    fn single_mode_truth(snr: Option<f64>) -> TruthModel {
        TruthModel {
            modes: TruthModes { centers: vec![5.0], dampings: vec![0.1], gains: vec![1.0] },
            coupling: (0..16).map(|i| if i % 5 == 0 { 1.0 } else { 0.0 }).collect(),
            snr_db: snr,
        }
    }

    #[test]
    fn zero_spectrum_gives_zero_vibration() {
        let truth = single_mode_truth(None);
        let mut rng = stream_rng(4, 0);
        let x = synthesize_vibration(&vec![0.0; N_ORDERS * N_CHANNELS], &truth, &mut rng);
        assert!(x.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_tone_matches_closed_form() {
        let truth = single_mode_truth(None);
        let mut spec = vec![0.0; N_ORDERS * N_CHANNELS];
        spec[4 * N_CHANNELS + 2] = 1.0; // order 5, channel 2
        let mut rng = stream_rng(5, 0);
        let probe_rng = rng.clone();
        let x = synthesize_vibration(&spec, &truth, &mut rng);
        // Recover the phase the generator drew for (order 5, channel 2).
        let mut replay = probe_rng;
        let mut phase = 0.0;
        for c in 0..N_CHANNELS {
            for k in 0..N_ORDERS {
                let p: f64 = replay.gen_range(0.0..TAU);
                if c == 2 && k == 4 {
                    phase = p;
                }
            }
        }
        let h = sos_kernel_magnitude(5.0, 0.1, 1.0, 5.0, 0.0);
        for j in 0..ANGLE_POINTS {
            let expect = h * (TAU * 5.0 * j as f64 / 400.0 + phase).cos();
            assert!((x[j * N_CHANNELS + 2] - expect).abs() < 1e-12);
            assert_eq!(x[j * N_CHANNELS], 0.0); // other channels untouched
        }
    }

    #[test]
    fn injected_noise_hits_requested_snr() {
        for snr in [2.0, 1.0, -1.0, -2.0] {
            let truth = single_mode_truth(None);
            let mut spec = vec![0.0; N_ORDERS * N_CHANNELS];
            for c in 0..N_CHANNELS {
                spec[9 * N_CHANNELS + c] = 0.5;
            }
            let mut rng = stream_rng(6, 0);
            let clean = synthesize_vibration(&spec, &truth, &mut rng);
            let mut noisy = clean.clone();
            add_noise_at_snr(&mut noisy, ANGLE_POINTS, snr, &mut rng);
            for c in 0..N_CHANNELS {
                let p_sig: f64 =
                    (0..ANGLE_POINTS).map(|j| clean[j * 4 + c].powi(2)).sum::<f64>() / 400.0;
                let p_noise: f64 = (0..ANGLE_POINTS)
                    .map(|j| (noisy[j * 4 + c] - clean[j * 4 + c]).powi(2))
                    .sum::<f64>()
                    / 400.0;
                let measured = 10.0 * (p_sig / p_noise).log10();
                assert!((measured - snr).abs() < 0.1, "snr {} measured {}", snr, measured);
            }
        }
    }

    #[test]
    fn doubling_spectrum_doubles_vibration() {
        let truth = single_mode_truth(None);
        let profile = flat_profile(-2.3, 0.2);
        let mut rng = stream_rng(7, 0);
        let spec = sample_roughness_spectrum(&mut rng, &profile);
        let doubled: Vec<f64> = spec.iter().map(|v| v * 2.0).collect();
        let mut r1 = stream_rng(8, 0);
        let mut r2 = stream_rng(8, 0);
        let x1 = synthesize_vibration(&spec, &truth, &mut r1);
        let x2 = synthesize_vibration(&doubled, &truth, &mut r2);
        for (a, b) in x1.iter().zip(&x2) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn deterministic_bundles() {
        let config = SynthConfig { groups: 3, train_groups: 2, samples_per_group: 4, ..Default::default() };
        let d1 = generate_dataset(&config, 42).unwrap();
        let d2 = generate_dataset(&config, 42).unwrap();
        assert_eq!(d1.train.x, d2.train.x);
        assert_eq!(d1.val.y, d2.val.y);
        assert_eq!(d1.train.v, d2.train.v);
        let d3 = generate_dataset(&config, 43).unwrap();
        assert_ne!(d1.train.x, d3.train.x);
    }

    #[test]
    fn bundle_shapes_and_counts() {
        let config = SynthConfig { groups: 3, train_groups: 2, samples_per_group: 100, ..Default::default() };
        let d = generate_dataset(&config, 0).unwrap();
        assert_eq!(d.train.len() + d.val.len(), 300);
        assert_eq!(d.train.len(), 200);
        assert_eq!(d.train.x.len(), 200 * ANGLE_POINTS * N_CHANNELS);
        assert_eq!(d.val.y.len(), 100 * N_ORDERS * N_CHANNELS);
        for g in &d.train.group_ids {
            assert!(!d.val.group_ids.contains(g));
        }
    }

    #[test]
    fn zero_jitter_shares_one_truth_model() {
        let config = SynthConfig { groups: 3, train_groups: 2, jitter_pct: 0.0, samples_per_group: 1, ..Default::default() };
        let d = generate_dataset(&config, 9).unwrap();
        let t0 = d.truths[0].1.modes.transfer_magnitude();
        for (_, t) in &d.truths[1..] {
            assert_eq!(t0, t.modes.transfer_magnitude());
        }
    }

    #[test]
    fn jittered_heldout_group_shifts_transfer() {
        let config = SynthConfig {
            groups: 3,
            train_groups: 2,
            jitter_pct: 0.10,
            samples_per_group: 1,
            ..Default::default()
        };
        let d = generate_dataset(&config, 10).unwrap();
        let train_t = d.truths[0].1.modes.transfer_magnitude();
        let val_t = d.truths[2].1.modes.transfer_magnitude();
        let gap: f64 = train_t
            .iter()
            .zip(&val_t)
            .map(|(a, b)| (20.0 * a.log10() - 20.0 * b.log10()).abs())
            .sum::<f64>()
            / N_ORDERS as f64;
        assert!(gap > 0.0, "held-out transfer identical to train transfer");
    }

    #[test]
    fn raw_mode_labels_match_profile_pipeline() {
        let config = SynthConfig {
            groups: 2,
            train_groups: 1,
            samples_per_group: 2,
            raw_mode: true,
            raw_seconds: 2,
            snr_db: None,
            ..Default::default()
        };
        let d = generate_dataset(&config, 11).unwrap();
        let (_, profiles) = d.raw.as_ref().unwrap();
        // Bundle labels equal the preprocessing labels of the implied profile.
        for p in profiles {
            let from_profile = profile_to_order_labels(p, LABEL_REF_MM).unwrap();
            let batch = if d.train.group_ids.contains(&p.group_id) { &d.train } else { &d.val };
            let idx = batch.group_ids.iter().position(|g| g == &p.group_id).unwrap();
            let y = batch.sample_y(idx);
            for k in 0..N_ORDERS {
                let bundle_label = y[k * N_CHANNELS + p.channel];
                assert!(
                    (bundle_label - from_profile[k]).abs() < 1e-9,
                    "group {} ch {} order {}: {} vs {}",
                    p.group_id,
                    p.channel,
                    k + 1,
                    bundle_label,
                    from_profile[k]
                );
            }
        }
    }
}
