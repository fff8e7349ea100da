//! Dataset bundles, experiment configuration, metric reports, and the CLI.
//!
//! A bundle is a directory with `manifest.json` plus three little-endian
//! f64 blobs `X.bin` `[N,400,4]`, `V.bin` `[N,4]`, `Y.bin` `[N,40,4]`,
//! row-major. Raw-mode bundles add per-group 10 kHz vibration, 1 Hz speed,
//! and wheel-profile blobs under `raw/`. The manifest records shapes,
//! per-sample group ids, the split map, the generator config and seed, and
//! the dB reference, so every derived result is reproducible from the
//! directory alone.

pub mod cli;
pub mod experiments;

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::model::ModelConfig;
use crate::preprocess::{
    RawRecord, SampleBatch, Split, SplitMap, WheelProfile, ANGLE_POINTS, DB_FLOOR, LABEL_REF_MM,
    N_CHANNELS, N_ORDERS,
};
use crate::synth::{GeneratedData, SynthConfig};
use crate::train::TrainConfig;
use crate::{Error, Result};

pub const MANIFEST_NAME: &str = "manifest.json";
const BUNDLE_VERSION: u32 = 1;

/// Raw-mode sidecar description of one record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RawRecordMeta {
    pub group_id: String,
    pub n_samples: usize,
    pub seconds: usize,
    pub circumference_m: [f64; N_CHANNELS],
    pub profile_len: usize,
}

/// `manifest.json` contents.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BundleManifest {
    pub version: u32,
    pub n_samples: usize,
    pub x_shape: [usize; 3],
    pub v_shape: [usize; 2],
    pub y_shape: [usize; 3],
    /// Group id of every sample, in blob row order.
    pub sample_groups: Vec<String>,
    /// Split assignment covering every group exactly once.
    pub split: BTreeMap<String, Split>,
    /// Generator settings and seed, when the bundle is synthetic.
    pub generator: Option<SynthConfig>,
    pub seed: u64,
    pub label_ref_mm: f64,
    pub db_floor: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_records: Option<Vec<RawRecordMeta>>,
}

fn write_f64_blob(path: &Path, values: &[f64]) -> Result<()> {
    let mut bytes = Vec::with_capacity(values.len() * 8);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

fn read_f64_blob(path: &Path, expected_len: usize) -> Result<Vec<f64>> {
    let bytes = std::fs::read(path)?;
    if bytes.len() != expected_len * 8 {
        return Err(Error::Data(format!(
            "blob {} has {} bytes, expected {} (8 x {})",
            path.display(),
            bytes.len(),
            expected_len * 8,
            expected_len
        )));
    }
    Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
}

/// Writes a generated dataset as a bundle directory.
pub fn write_bundle(dir: &Path, data: &GeneratedData) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let n = data.train.len() + data.val.len();
    let mut x = Vec::with_capacity(n * ANGLE_POINTS * N_CHANNELS);
    let mut v = Vec::with_capacity(n * N_CHANNELS);
    let mut y = Vec::with_capacity(n * N_ORDERS * N_CHANNELS);
    let mut sample_groups = Vec::with_capacity(n);
    for batch in [&data.train, &data.val] {
        x.extend_from_slice(&batch.x);
        v.extend_from_slice(&batch.v);
        y.extend_from_slice(&batch.y);
        sample_groups.extend(batch.group_ids.iter().cloned());
    }
    let split: BTreeMap<String, Split> = data.split.iter().map(|(g, s)| (g.clone(), s)).collect();
    let raw_records = match &data.raw {
        Some((records, profiles)) => {
            let raw_dir = dir.join("raw");
            std::fs::create_dir_all(&raw_dir)?;
            let mut metas = Vec::new();
            for record in records {
                let n_samples = record.vibration[0].len();
                let mut interleaved = Vec::with_capacity(n_samples * N_CHANNELS);
                for j in 0..n_samples {
                    for c in 0..N_CHANNELS {
                        interleaved.push(record.vibration[c][j]);
                    }
                }
                write_f64_blob(&raw_dir.join(format!("{}_vib.bin", record.group_id)), &interleaved)?;
                write_f64_blob(&raw_dir.join(format!("{}_speed.bin", record.group_id)), &record.speed_kmh)?;
                metas.push(RawRecordMeta {
                    group_id: record.group_id.clone(),
                    n_samples,
                    seconds: record.speed_kmh.len(),
                    circumference_m: record.circumference_m,
                    profile_len: ANGLE_POINTS,
                });
            }
            for p in profiles {
                write_f64_blob(
                    &raw_dir.join(format!("{}_profile_{}.bin", p.group_id, p.channel)),
                    &p.deviation_mm,
                )?;
            }
            Some(metas)
        }
        None => None,
    };
    let manifest = BundleManifest {
        version: BUNDLE_VERSION,
        n_samples: n,
        x_shape: [n, ANGLE_POINTS, N_CHANNELS],
        v_shape: [n, N_CHANNELS],
        y_shape: [n, N_ORDERS, N_CHANNELS],
        sample_groups,
        split,
        generator: Some(data.config.clone()),
        seed: data.seed,
        label_ref_mm: LABEL_REF_MM,
        db_floor: DB_FLOOR,
        raw_records,
    };
    std::fs::write(dir.join(MANIFEST_NAME), serde_json::to_string_pretty(&manifest)?)?;
    write_f64_blob(&dir.join("X.bin"), &x)?;
    write_f64_blob(&dir.join("V.bin"), &v)?;
    write_f64_blob(&dir.join("Y.bin"), &y)?;
    Ok(())
}

/// A bundle loaded back into train/val batches.
pub struct LoadedBundle {
    pub manifest: BundleManifest,
    pub train: SampleBatch,
    pub val: SampleBatch,
}

impl LoadedBundle {
    pub fn split_map(&self) -> Result<SplitMap> {
        let train: Vec<String> = self
            .manifest
            .split
            .iter()
            .filter(|(_, &s)| s == Split::Train)
            .map(|(g, _)| g.clone())
            .collect();
        let val: Vec<String> = self
            .manifest
            .split
            .iter()
            .filter(|(_, &s)| s == Split::Val)
            .map(|(g, _)| g.clone())
            .collect();
        SplitMap::from_lists(&train, &val)
    }

    pub fn train_groups(&self) -> Vec<String> {
        self.manifest
            .split
            .iter()
            .filter(|(_, &s)| s == Split::Train)
            .map(|(g, _)| g.clone())
            .collect()
    }
}

pub fn read_manifest(dir: &Path) -> Result<BundleManifest> {
    let path = dir.join(MANIFEST_NAME);
    let text = std::fs::read_to_string(&path)
        .map_err(|e| Error::Data(format!("cannot read {}: {}", path.display(), e)))?;
    let manifest: BundleManifest = serde_json::from_str(&text)?;
    Ok(manifest)
}

/// Reads a cached bundle and splits samples by the manifest's split map.
pub fn read_bundle(dir: &Path) -> Result<LoadedBundle> {
    let manifest = read_manifest(dir)?;
    let n = manifest.n_samples;
    if manifest.sample_groups.len() != n {
        return Err(Error::Data(format!(
            "manifest lists {} sample groups for {} samples",
            manifest.sample_groups.len(),
            n
        )));
    }
    let x = read_f64_blob(&dir.join("X.bin"), n * ANGLE_POINTS * N_CHANNELS)?;
    let v = read_f64_blob(&dir.join("V.bin"), n * N_CHANNELS)?;
    let y = read_f64_blob(&dir.join("Y.bin"), n * N_ORDERS * N_CHANNELS)?;
    let mut train = SampleBatch::default();
    let mut val = SampleBatch::default();
    for i in 0..n {
        let gid = &manifest.sample_groups[i];
        let split = manifest.split.get(gid).ok_or_else(|| {
            Error::Data(format!("sample {} group '{}' missing from the split map", i, gid))
        })?;
        let xw = ANGLE_POINTS * N_CHANNELS;
        let yw = N_ORDERS * N_CHANNELS;
        let target = match split {
            Split::Train => &mut train,
            Split::Val => &mut val,
        };
        target.push(
            &x[i * xw..(i + 1) * xw],
            &v[i * N_CHANNELS..(i + 1) * N_CHANNELS],
            &y[i * yw..(i + 1) * yw],
            gid,
        );
    }
    Ok(LoadedBundle { manifest, train, val })
}

/// Reads the raw-mode sidecar of a bundle.
pub fn read_raw_bundle(dir: &Path) -> Result<(Vec<RawRecord>, Vec<WheelProfile>, SplitMap)> {
    let manifest = read_manifest(dir)?;
    let metas = manifest
        .raw_records
        .as_ref()
        .ok_or_else(|| Error::Data(format!("bundle at {} has no raw-mode blobs", dir.display())))?;
    let raw_dir = dir.join("raw");
    let mut records = Vec::new();
    let mut profiles = Vec::new();
    for meta in metas {
        let interleaved =
            read_f64_blob(&raw_dir.join(format!("{}_vib.bin", meta.group_id)), meta.n_samples * N_CHANNELS)?;
        let mut vibration: [Vec<f64>; N_CHANNELS] = std::array::from_fn(|_| vec![0.0; meta.n_samples]);
        for j in 0..meta.n_samples {
            for c in 0..N_CHANNELS {
                vibration[c][j] = interleaved[j * N_CHANNELS + c];
            }
        }
        let speed_kmh = read_f64_blob(&raw_dir.join(format!("{}_speed.bin", meta.group_id)), meta.seconds)?;
        records.push(RawRecord {
            vibration,
            speed_kmh,
            circumference_m: meta.circumference_m,
            group_id: meta.group_id.clone(),
        });
        for c in 0..N_CHANNELS {
            let deviation_mm = read_f64_blob(
                &raw_dir.join(format!("{}_profile_{}.bin", meta.group_id, c)),
                meta.profile_len,
            )?;
            profiles.push(WheelProfile { group_id: meta.group_id.clone(), channel: c, deviation_mm });
        }
    }
    let train: Vec<String> = manifest
        .split
        .iter()
        .filter(|(_, &s)| s == Split::Train)
        .map(|(g, _)| g.clone())
        .collect();
    let val: Vec<String> = manifest
        .split
        .iter()
        .filter(|(_, &s)| s == Split::Val)
        .map(|(g, _)| g.clone())
        .collect();
    Ok((records, profiles, SplitMap::from_lists(&train, &val)?))
}

/// Top-level experiment configuration; any field may be omitted in the JSON.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct ExperimentConfig {
    pub dataset: SynthConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl ExperimentConfig {
    /// Noiseless in-hypothesis-class dataset preset.
    pub fn in_class() -> Self {
        ExperimentConfig { dataset: SynthConfig::in_class(), ..Default::default() }
    }

    /// Loads a config: a JSON file path, or the builtin names
    /// `default` / `in-class`.
    pub fn load(spec: &str) -> Result<Self> {
        match spec {
            "default" => Ok(Self::default()),
            "in-class" => Ok(Self::in_class()),
            path => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| Error::Usage(format!("cannot read config '{}': {}", path, e)))?;
                let cfg: ExperimentConfig = serde_json::from_str(&text)
                    .map_err(|e| Error::Config(format!("invalid config '{}': {}", path, e)))?;
                Ok(cfg)
            }
        }
    }

    /// FNV-1a hash of the canonical JSON, for report reproducibility lines.
    pub fn hash(&self) -> String {
        fnv1a(serde_json::to_string(self).unwrap_or_default().as_bytes())
    }
}

/// FNV-1a 64-bit, hex-encoded.
pub fn fnv1a(bytes: &[u8]) -> String {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x1000_0000_01b3);
    }
    format!("{:016x}", hash)
}

/// Hash of a bundle's manifest bytes, identifying the dataset in reports.
pub fn bundle_hash(dir: &Path) -> Result<String> {
    Ok(fnv1a(&std::fs::read(dir.join(MANIFEST_NAME))?))
}

/// One metric observation of one run.
#[derive(Debug, Clone, Serialize)]
pub struct MetricRecord {
    pub variant: String,
    pub run: u64,
    pub seed: u64,
    /// SNR of injected noise, None for clean evaluation.
    pub noise_snr_db: Option<f64>,
    pub split: String,
    pub metric: String,
    pub value: f64,
}

/// Per-variant/per-seed/per-level records plus context lines.
#[derive(Debug, Clone, Default)]
pub struct ExperimentReport {
    pub header: Vec<String>,
    pub records: Vec<MetricRecord>,
}

impl ExperimentReport {
    pub fn push(&mut self, record: MetricRecord) {
        self.records.push(record);
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for line in &self.header {
            out.push_str(&format!("# {}\n", line));
        }
        out.push_str("variant,run,seed,noise_snr_db,split,metric,value\n");
        for r in &self.records {
            let noise = r.noise_snr_db.map(|v| format!("{}", v)).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{},{},{:.9}\n",
                r.variant, r.run, r.seed, noise, r.split, r.metric, r.value
            ));
        }
        out
    }

    /// Mean of a metric over runs, per (variant, noise level, split).
    pub fn mean(&self, variant: &str, metric: &str, noise: Option<f64>, split: &str) -> Option<f64> {
        let values: Vec<f64> = self
            .records
            .iter()
            .filter(|r| {
                r.variant == variant && r.metric == metric && r.split == split && r.noise_snr_db == noise
            })
            .map(|r| r.value)
            .collect();
        if values.is_empty() {
            None
        } else {
            Some(values.iter().sum::<f64>() / values.len() as f64)
        }
    }

    fn std(&self, variant: &str, metric: &str, noise: Option<f64>, split: &str) -> Option<f64> {
        let values: Vec<f64> = self
            .records
            .iter()
            .filter(|r| {
                r.variant == variant && r.metric == metric && r.split == split && r.noise_snr_db == noise
            })
            .map(|r| r.value)
            .collect();
        if values.is_empty() {
            return None;
        }
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / values.len() as f64;
        Some(var.sqrt())
    }

    /// Fixed-width text table of mean +- std per (variant, noise, split, metric).
    pub fn to_table(&self) -> String {
        let mut keys: Vec<(String, Option<f64>, String, String)> = Vec::new();
        for r in &self.records {
            let key = (r.variant.clone(), r.noise_snr_db, r.split.clone(), r.metric.clone());
            if !keys.contains(&key) {
                keys.push(key);
            }
        }
        let mut out = String::new();
        for line in &self.header {
            out.push_str(&format!("# {}\n", line));
        }
        out.push_str(&format!(
            "{:<24} {:>10} {:<8} {:<10} {:>12} {:>12}\n",
            "variant", "noise_db", "split", "metric", "mean", "std"
        ));
        for (variant, noise, split, metric) in keys {
            let mean = self.mean(&variant, &metric, noise, &split).unwrap_or(f64::NAN);
            let std = self.std(&variant, &metric, noise, &split).unwrap_or(f64::NAN);
            let noise_str = noise.map(|v| format!("{}", v)).unwrap_or_else(|| "clean".into());
            out.push_str(&format!(
                "{:<24} {:>10} {:<8} {:<10} {:>12.4} {:>12.4}\n",
                variant, noise_str, split, metric, mean, std
            ));
        }
        out
    }
}

/// Training-history CSV with columns (run, epoch, split, mae, r2).
pub fn history_to_csv(rows: &[crate::train::HistoryRow]) -> String {
    let mut out = String::from("run,epoch,split,mae,r2\n");
    for r in rows {
        let split = match r.split {
            Split::Train => "train",
            Split::Val => "val",
        };
        out.push_str(&format!("{},{},{},{:.9},{:.9}\n", r.run, r.epoch, split, r.mae, r.r2));
    }
    out
}
