//! Raw-record preprocessing: speed filtering, revolution segmentation,
//! angle-domain resampling, and order-spectrum roughness labels.
//!
//! Raw vibration is sampled at 10 kHz, speed at 1 Hz (zero-order hold between
//! ticks). One revolution is resampled onto 400 uniform wheel angles, and
//! labels are the single-sided order amplitudes of the wheel profile at
//! orders 1..=40, in dB relative to [`LABEL_REF_MM`].

use std::collections::BTreeMap;
use std::f64::consts::TAU;
use std::ops::Range;

use crate::{Error, Result};

/// Angular points per revolution after resampling.
pub const ANGLE_POINTS: usize = 400;
/// Number of regressed roughness orders (1..=40).
pub const N_ORDERS: usize = 40;
/// Wheel channels per bogie (front-left, front-right, rear-left, rear-right).
pub const N_CHANNELS: usize = 4;
/// Vibration sample rate in Hz.
pub const VIB_RATE_HZ: f64 = 10_000.0;
/// Roughness label reference amplitude: 1e-3 mm (1 um).
pub const LABEL_REF_MM: f64 = 1e-3;
/// Relative-amplitude floor for dB maps; zero amplitude reads as -120 dB.
pub const DB_FLOOR: f64 = 1e-6;
/// Default retained speed window in km/h.
pub const SPEED_MIN_KMH: f64 = 295.0;
pub const SPEED_MAX_KMH: f64 = 305.0;

const KMH_TO_MS: f64 = 1.0 / 3.6;

/// One continuous acquisition: 4-channel vibration plus the speed trace.
#[derive(Debug, Clone)]
pub struct RawRecord {
    /// Per-channel vibration at 10 kHz, m/s^2. All channels have equal length.
    pub vibration: [Vec<f64>; N_CHANNELS],
    /// Speed at 1 Hz, km/h.
    pub speed_kmh: Vec<f64>,
    /// Rolling circumference per channel, m.
    pub circumference_m: [f64; N_CHANNELS],
    pub group_id: String,
}

/// Radial deviation of one wheel over a full revolution, in mm.
#[derive(Debug, Clone)]
pub struct WheelProfile {
    pub group_id: String,
    pub channel: usize,
    /// Samples at angles `2*pi*i/len`, i.e. one revolution, endpoint exclusive.
    pub deviation_mm: Vec<f64>,
}

/// Which split a wheel group belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

/// Group -> split assignment; a group can belong to exactly one split.
#[derive(Debug, Clone, Default)]
pub struct SplitMap {
    map: BTreeMap<String, Split>,
}

impl SplitMap {
    pub fn from_lists(train: &[String], val: &[String]) -> Result<Self> {
        let mut map = BTreeMap::new();
        for g in train {
            map.insert(g.clone(), Split::Train);
        }
        for g in val {
            if map.insert(g.clone(), Split::Val) == Some(Split::Train) {
                return Err(Error::Config(format!("group '{}' assigned to both splits", g)));
            }
        }
        Ok(SplitMap { map })
    }

    pub fn get(&self, group: &str) -> Option<Split> {
        self.map.get(group).copied()
    }

    pub fn groups(&self, split: Split) -> Vec<String> {
        self.map.iter().filter(|(_, &s)| s == split).map(|(g, _)| g.clone()).collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, Split)> {
        self.map.iter().map(|(g, &s)| (g, s))
    }
}

/// Fixed-shape supervised samples: x `[N,400,4]`, v `[N,4]`, y `[N,40,4]` (dB).
#[derive(Debug, Clone, Default)]
pub struct SampleBatch {
    pub x: Vec<f64>,
    pub v: Vec<f64>,
    pub y: Vec<f64>,
    pub group_ids: Vec<String>,
}

impl SampleBatch {
    pub fn len(&self) -> usize {
        self.group_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.group_ids.is_empty()
    }

    pub fn sample_x(&self, i: usize) -> &[f64] {
        let w = ANGLE_POINTS * N_CHANNELS;
        &self.x[i * w..(i + 1) * w]
    }

    pub fn sample_v(&self, i: usize) -> &[f64] {
        &self.v[i * N_CHANNELS..(i + 1) * N_CHANNELS]
    }

    pub fn sample_y(&self, i: usize) -> &[f64] {
        let w = N_ORDERS * N_CHANNELS;
        &self.y[i * w..(i + 1) * w]
    }

    pub fn push(&mut self, x: &[f64], v: &[f64], y: &[f64], group: &str) {
        debug_assert_eq!(x.len(), ANGLE_POINTS * N_CHANNELS);
        debug_assert_eq!(v.len(), N_CHANNELS);
        debug_assert_eq!(y.len(), N_ORDERS * N_CHANNELS);
        self.x.extend_from_slice(x);
        self.v.extend_from_slice(v);
        self.y.extend_from_slice(y);
        self.group_ids.push(group.to_string());
    }

    /// Row-subset view as a new batch.
    pub fn select(&self, indices: &[usize]) -> SampleBatch {
        let mut out = SampleBatch::default();
        for &i in indices {
            out.push(self.sample_x(i), self.sample_v(i), self.sample_y(i), &self.group_ids[i]);
        }
        out
    }
}

/// Maximal contiguous vibration index ranges whose (zero-order-hold) speed
/// lies inside `[v_min, v_max]` km/h. Speed tick `i` covers samples
/// `[i*fs, (i+1)*fs)`.
pub fn filter_speed(record: &RawRecord, v_min: f64, v_max: f64) -> Vec<Range<usize>> {
    assert!(v_min < v_max, "empty speed window");
    let n_samples = record.vibration[0].len();
    let fs = VIB_RATE_HZ as usize;
    let mut segments: Vec<Range<usize>> = Vec::new();
    let mut current: Option<Range<usize>> = None;
    for (tick, &v) in record.speed_kmh.iter().enumerate() {
        let lo = tick * fs;
        if lo >= n_samples {
            break;
        }
        let hi = ((tick + 1) * fs).min(n_samples);
        if v >= v_min && v <= v_max {
            match current.as_mut() {
                Some(r) if r.end == lo => r.end = hi,
                _ => {
                    if let Some(r) = current.take() {
                        segments.push(r);
                    }
                    current = Some(lo..hi);
                }
            }
        } else if let Some(r) = current.take() {
            segments.push(r);
        }
    }
    if let Some(r) = current {
        segments.push(r);
    }
    segments
}

fn speed_at_sample(speed_kmh: &[f64], sample: usize) -> f64 {
    let tick = sample / VIB_RATE_HZ as usize;
    speed_kmh[tick.min(speed_kmh.len().saturating_sub(1))]
}

/// Cuts a retained segment into whole revolutions by cumulative rolling
/// distance. Boundaries land at the nearest sample to each circumference
/// multiple; the trailing partial revolution is discarded.
pub fn segment_revolutions(
    segment: Range<usize>,
    speed_kmh: &[f64],
    circumference_m: f64,
) -> Vec<Range<usize>> {
    assert!(circumference_m > 0.0, "circumference must be positive");
    let mut cuts = vec![segment.start];
    let mut distance = 0.0;
    let mut next_cut = circumference_m;
    for i in segment.clone() {
        let step = speed_at_sample(speed_kmh, i) * KMH_TO_MS / VIB_RATE_HZ;
        let before = distance;
        distance += step;
        // Tolerate 1-ulp shortfalls at exact multiples.
        while distance + 1e-9 >= next_cut {
            let frac = if step > 0.0 { ((next_cut - before) / step).clamp(0.0, 1.0) } else { 1.0 };
            let boundary = ((i as f64 + frac).round() as usize).min(segment.end);
            cuts.push(boundary);
            next_cut += circumference_m;
        }
    }
    cuts.windows(2).filter(|w| w[1] > w[0]).map(|w| w[0]..w[1]).collect()
}

/// Wheel angle of every raw sample in a revolution slice, measured from the
/// slice start: `theta_i = 2*pi * d_i / circumference`.
pub fn revolution_angles(rev: Range<usize>, speed_kmh: &[f64], circumference_m: f64) -> Vec<f64> {
    let mut theta = Vec::with_capacity(rev.len());
    let mut distance = 0.0;
    for i in rev {
        theta.push(TAU * distance / circumference_m);
        distance += speed_at_sample(speed_kmh, i) * KMH_TO_MS / VIB_RATE_HZ;
    }
    theta
}

/// Linearly interpolates `(theta, signal)` onto 400 uniform angles in
/// `[0, 2*pi)`. Grid points beyond the last raw angle are linearly
/// extrapolated from the final segment.
pub fn resample_angle(signal: &[f64], theta: &[f64]) -> Result<Vec<f64>> {
    if signal.len() != theta.len() {
        return Err(Error::Data(format!(
            "resample_angle: {} samples but {} angles",
            signal.len(),
            theta.len()
        )));
    }
    if signal.len() < 2 {
        return Err(Error::Data("resample_angle: revolution slice shorter than 2 samples".into()));
    }
    if theta.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Data("resample_angle: non-monotone cumulative distance".into()));
    }
    let n = signal.len();
    let mut out = Vec::with_capacity(ANGLE_POINTS);
    let mut seg = 0usize;
    for k in 0..ANGLE_POINTS {
        let target = TAU * k as f64 / ANGLE_POINTS as f64;
        while seg + 2 < n && theta[seg + 1] < target {
            seg += 1;
        }
        let (t0, t1) = (theta[seg], theta[seg + 1]);
        let (y0, y1) = (signal[seg], signal[seg + 1]);
        let w = (target - t0) / (t1 - t0);
        out.push(y0 + w * (y1 - y0));
    }
    Ok(out)
}

/// Single-sided amplitude of `x` at integer orders `1..=n_orders`
/// (cycles per revolution), via direct DFT over the angle points.
pub fn order_amplitudes(x: &[f64], n_orders: usize) -> Vec<f64> {
    let n = x.len();
    let mut amps = Vec::with_capacity(n_orders);
    for k in 1..=n_orders {
        let mut re = 0.0;
        let mut im = 0.0;
        for (j, &v) in x.iter().enumerate() {
            let phase = TAU * (k * j % n) as f64 / n as f64;
            re += v * phase.cos();
            im -= v * phase.sin();
        }
        amps.push(2.0 * (re * re + im * im).sqrt() / n as f64);
    }
    amps
}

/// dB map with the [`DB_FLOOR`] clamp: `20*log10(max(a, DB_FLOOR))`.
pub fn db_floor(a: f64) -> f64 {
    20.0 * a.max(DB_FLOOR).log10()
}

/// Order-domain roughness labels of a wheel profile: uniform resample to 400
/// angles (periodic), DFT, then `20*log10(max(amp/ref, DB_FLOOR))` per order.
pub fn profile_to_order_labels(profile: &WheelProfile, ref_mm: f64) -> Result<Vec<f64>> {
    let n = profile.deviation_mm.len();
    if n < 2 * N_ORDERS + 1 {
        return Err(Error::Data(format!(
            "profile for group '{}' channel {} has {} points; need at least {}",
            profile.group_id,
            profile.channel,
            n,
            2 * N_ORDERS + 1
        )));
    }
    // Periodic linear interpolation onto the 400-point grid.
    let mut resampled = Vec::with_capacity(ANGLE_POINTS);
    for k in 0..ANGLE_POINTS {
        let pos = k as f64 * n as f64 / ANGLE_POINTS as f64;
        let i = pos.floor() as usize;
        let w = pos - i as f64;
        let a = profile.deviation_mm[i % n];
        let b = profile.deviation_mm[(i + 1) % n];
        resampled.push(a + w * (b - a));
    }
    let amps = order_amplitudes(&resampled, N_ORDERS);
    Ok(amps.iter().map(|&a| db_floor(a / ref_mm)).collect())
}

/// Runs the full pipeline over a set of records and emits group-disjoint
/// train/val batches. The four channels of a record are aligned by
/// revolution index, truncating to the channel with the fewest revolutions.
pub fn build_dataset(
    records: &[RawRecord],
    profiles: &[WheelProfile],
    split: &SplitMap,
) -> Result<(SampleBatch, SampleBatch)> {
    let mut labels_by_group: BTreeMap<&str, [Option<Vec<f64>>; N_CHANNELS]> = BTreeMap::new();
    for p in profiles {
        if p.channel >= N_CHANNELS {
            return Err(Error::Data(format!(
                "profile channel {} out of range for group '{}'",
                p.channel, p.group_id
            )));
        }
        let entry = labels_by_group.entry(&p.group_id).or_default();
        entry[p.channel] = Some(profile_to_order_labels(p, LABEL_REF_MM)?);
    }

    let mut train = SampleBatch::default();
    let mut val = SampleBatch::default();
    for record in records {
        let assignment = split.get(&record.group_id).ok_or_else(|| {
            Error::Config(format!("group '{}' has no split assignment", record.group_id))
        })?;
        let channel_labels = labels_by_group
            .get(record.group_id.as_str())
            .ok_or_else(|| Error::Data(format!("no profiles for group '{}'", record.group_id)))?;
        let mut y = vec![0.0; N_ORDERS * N_CHANNELS];
        for (c, l) in channel_labels.iter().enumerate() {
            let l = l.as_ref().ok_or_else(|| {
                Error::Data(format!("group '{}' is missing the channel {} profile", record.group_id, c))
            })?;
            for k in 0..N_ORDERS {
                y[k * N_CHANNELS + c] = l[k];
            }
        }

        for segment in filter_speed(record, SPEED_MIN_KMH, SPEED_MAX_KMH) {
            // Per-channel revolution cuts; circumferences may differ.
            let mut revs: [Vec<Range<usize>>; N_CHANNELS] = Default::default();
            for c in 0..N_CHANNELS {
                revs[c] = segment_revolutions(segment.clone(), &record.speed_kmh, record.circumference_m[c]);
            }
            let n_revs = revs.iter().map(|r| r.len()).min().unwrap_or(0);
            for i in 0..n_revs {
                let mut x = vec![0.0; ANGLE_POINTS * N_CHANNELS];
                for c in 0..N_CHANNELS {
                    let rev = revs[c][i].clone();
                    let theta = revolution_angles(rev.clone(), &record.speed_kmh, record.circumference_m[c]);
                    let resampled = resample_angle(&record.vibration[c][rev], &theta)?;
                    for (j, &s) in resampled.iter().enumerate() {
                        x[j * N_CHANNELS + c] = s;
                    }
                }
                // Mean speed over the first channel's revolution window,
                // replicated across channels.
                let rev0 = revs[0][i].clone();
                let mean_v = rev0.clone().map(|s| speed_at_sample(&record.speed_kmh, s)).sum::<f64>()
                    / rev0.len() as f64;
                let v = [mean_v; N_CHANNELS];
                match assignment {
                    Split::Train => train.push(&x, &v, &y, &record.group_id),
                    Split::Val => val.push(&x, &v, &y, &record.group_id),
                }
            }
        }
    }
    Ok((train, val))
}
