//! Full forward pass: frontend -> physical branch (base + adaptive
//! correction) and temporal branch, fused by a learnable scalar and mapped
//! to dB:
//!
//! ```text
//! y_lin = (1 - alpha) * y_phys + alpha * y_time,   alpha = sigmoid(a)
//! y_hat = 20 * log10((softplus(y_lin) + eps) / y_ref)
//! ```
//!
//! Variant flags switch the ablation grid: `use_physical` / `use_temporal`
//! bypass fusion entirely, `use_mimo = false` reduces every coupling matrix
//! to its diagonal and drops the dW correction path, `use_adaptive = false`
//! skips the correction heads and forces beta = 0.
//!
//! Checkpoints are a little-endian u64 header length, a JSON header
//! (config, variant flags, epoch, metrics), then all parameters as raw
//! little-endian f64 in the fixed `visit_params` order.

use std::io::{Read as IoRead, Write as IoWrite};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adaptive::{self, AdaptiveParams};
use crate::dtensor::{GradMap, Graph, Tensor};
use crate::frontend::{order_frontend, order_mixing, FrontendParams};
use crate::physbranch::{base_response, build_coupling, build_kernels, CouplingBank, ModalParams};
use crate::preprocess::{SampleBatch, N_CHANNELS, N_ORDERS};
use crate::temporal::{temporal_branch, TemporalParams, TemporalVariant};
use crate::{Error, Result};

/// Ablation switches; every row of the ablation grids is one flag setting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct VariantFlags {
    pub use_physical: bool,
    pub use_temporal: bool,
    pub use_mimo: bool,
    pub use_adaptive: bool,
    pub temporal_variant: TemporalVariant,
}

impl Default for VariantFlags {
    fn default() -> Self {
        VariantFlags {
            use_physical: true,
            use_temporal: true,
            use_mimo: true,
            use_adaptive: true,
            temporal_variant: TemporalVariant::Ssm,
        }
    }
}

impl VariantFlags {
    pub fn phys_only() -> Self {
        VariantFlags { use_temporal: false, ..Default::default() }
    }

    pub fn time_only() -> Self {
        VariantFlags { use_physical: false, use_mimo: false, use_adaptive: false, ..Default::default() }
    }

    /// Short tag used in reports and file names.
    pub fn tag(&self) -> String {
        if !self.use_physical {
            return "time-only".into();
        }
        if !self.use_temporal {
            return "phys-only".into();
        }
        let mut tag = String::from("full");
        if !self.use_mimo {
            tag.push_str("-nomimo");
        }
        if !self.use_adaptive {
            tag.push_str("-noadp");
        }
        if self.temporal_variant == TemporalVariant::Linear {
            tag.push_str("-linear");
        }
        tag
    }
}

/// Width and stabilizer settings of the model.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct ModelConfig {
    pub n_modes: usize,
    pub d_context: usize,
    pub enc_hidden: usize,
    pub d_model: usize,
    pub d_state: usize,
    pub kernel_eps: f64,
    pub out_eps: f64,
    pub y_ref: f64,
    pub flags: VariantFlags,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_modes: crate::physbranch::N_MODES,
            d_context: adaptive::D_CONTEXT,
            enc_hidden: adaptive::ENC_HIDDEN,
            d_model: crate::temporal::D_MODEL,
            d_state: crate::temporal::D_STATE,
            kernel_eps: crate::physbranch::KERNEL_EPS,
            out_eps: 1e-6,
            y_ref: 1.0,
            flags: VariantFlags::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.flags.use_physical && !self.flags.use_temporal {
            return Err(Error::Config("at least one of the physical/temporal branches must be active".into()));
        }
        if self.n_modes == 0 {
            return Err(Error::Config("n_modes must be positive".into()));
        }
        Ok(())
    }
}

/// All learnable parameters plus the configuration that shaped them.
#[derive(Debug, Clone)]
pub struct ModelState {
    pub config: ModelConfig,
    pub frontend: FrontendParams,
    pub modal: ModalParams,
    pub coupling: CouplingBank,
    pub adaptive: AdaptiveParams,
    pub temporal: TemporalParams,
    /// Fusion scalar a with alpha = sigmoid(a); starts at 0 (equal mix).
    pub fusion_raw: Tensor,
}

impl ModelState {
    pub fn init(config: &ModelConfig, seed: u64) -> Result<ModelState> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(ModelState {
            config: config.clone(),
            frontend: FrontendParams::init(&mut rng),
            modal: ModalParams::init(config.n_modes),
            coupling: CouplingBank::init(config.n_modes, &mut rng),
            adaptive: AdaptiveParams::init(&mut rng, config.n_modes, config.d_context, config.enc_hidden),
            temporal: TemporalParams::init(&mut rng, config.flags.temporal_variant, config.d_model, config.d_state),
            fusion_raw: Tensor::zeros(vec![1]),
        })
    }

    /// Leaf-attached copy; call once per graph before forwarding a batch.
    pub fn register(&self, g: &mut Graph) -> ModelState {
        ModelState {
            config: self.config.clone(),
            frontend: self.frontend.register(g),
            modal: self.modal.register(g),
            coupling: self.coupling.register(g),
            adaptive: self.adaptive.register(g),
            temporal: self.temporal.register(g),
            fusion_raw: g.leaf(&self.fusion_raw),
        }
    }

    /// Visits every parameter in the documented fixed order.
    pub fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'static str, &'a Tensor)) {
        f("frontend.conv_w", &self.frontend.conv_w);
        f("frontend.conv_b", &self.frontend.conv_b);
        f("frontend.speed_w", &self.frontend.speed_w);
        f("frontend.speed_b", &self.frontend.speed_b);
        f("frontend.in_proj", &self.frontend.in_proj);
        f("frontend.in_b", &self.frontend.in_b);
        f("frontend.e_order", &self.frontend.e_order);
        f("frontend.local_w", &self.frontend.local_w);
        f("frontend.local_b", &self.frontend.local_b);
        f("frontend.out_proj", &self.frontend.out_proj);
        f("frontend.out_b", &self.frontend.out_b);
        f("frontend.lambda", &self.frontend.lambda);
        f("modal.raw_center", &self.modal.raw_center);
        f("modal.raw_damp", &self.modal.raw_damp);
        f("modal.raw_gain", &self.modal.raw_gain);
        f("coupling.d", &self.coupling.d);
        f("coupling.u", &self.coupling.u);
        f("coupling.v", &self.coupling.v);
        f("adaptive.enc_conv_w", &self.adaptive.enc_conv_w);
        f("adaptive.enc_conv_b", &self.adaptive.enc_conv_b);
        f("adaptive.enc_fc1_w", &self.adaptive.enc_fc1_w);
        f("adaptive.enc_fc1_b", &self.adaptive.enc_fc1_b);
        f("adaptive.enc_fc2_w", &self.adaptive.enc_fc2_w);
        f("adaptive.enc_fc2_b", &self.adaptive.enc_fc2_b);
        f("adaptive.modal_w", &self.adaptive.modal_w);
        f("adaptive.modal_b", &self.adaptive.modal_b);
        f("adaptive.coupling_w", &self.adaptive.coupling_w);
        f("adaptive.coupling_b", &self.adaptive.coupling_b);
        f("adaptive.gate_raw", &self.adaptive.gate_raw);
        f("temporal.embed_w", &self.temporal.embed_w);
        f("temporal.embed_b", &self.temporal.embed_b);
        f("temporal.speed_w", &self.temporal.speed_w);
        f("temporal.speed_b", &self.temporal.speed_b);
        match &self.temporal.body {
            crate::temporal::TemporalBody::Ssm(layers) => {
                for (i, l) in layers.iter().enumerate() {
                    let names: [(&'static str, &Tensor); 9] = [
                        (ssm_name(i, 0), &l.w_delta),
                        (ssm_name(i, 1), &l.b_delta),
                        (ssm_name(i, 2), &l.w_b),
                        (ssm_name(i, 3), &l.b_b),
                        (ssm_name(i, 4), &l.w_c),
                        (ssm_name(i, 5), &l.b_c),
                        (ssm_name(i, 6), &l.raw_a),
                        (ssm_name(i, 7), &l.gate_w),
                        (ssm_name(i, 8), &l.gate_b),
                    ];
                    for (n, t) in names {
                        f(n, t);
                    }
                }
            }
            crate::temporal::TemporalBody::Linear { w, b } => {
                f("temporal.linear_w", w);
                f("temporal.linear_b", b);
            }
        }
        f("temporal.out_w", &self.temporal.out_w);
        f("temporal.out_b", &self.temporal.out_b);
        f("temporal.angle_w", &self.temporal.angle_w);
        f("temporal.angle_b", &self.temporal.angle_b);
        f("fusion_raw", &self.fusion_raw);
    }

    /// Mutable visit in the same fixed order.
    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&'static str, &mut Tensor)) {
        f("frontend.conv_w", &mut self.frontend.conv_w);
        f("frontend.conv_b", &mut self.frontend.conv_b);
        f("frontend.speed_w", &mut self.frontend.speed_w);
        f("frontend.speed_b", &mut self.frontend.speed_b);
        f("frontend.in_proj", &mut self.frontend.in_proj);
        f("frontend.in_b", &mut self.frontend.in_b);
        f("frontend.e_order", &mut self.frontend.e_order);
        f("frontend.local_w", &mut self.frontend.local_w);
        f("frontend.local_b", &mut self.frontend.local_b);
        f("frontend.out_proj", &mut self.frontend.out_proj);
        f("frontend.out_b", &mut self.frontend.out_b);
        f("frontend.lambda", &mut self.frontend.lambda);
        f("modal.raw_center", &mut self.modal.raw_center);
        f("modal.raw_damp", &mut self.modal.raw_damp);
        f("modal.raw_gain", &mut self.modal.raw_gain);
        f("coupling.d", &mut self.coupling.d);
        f("coupling.u", &mut self.coupling.u);
        f("coupling.v", &mut self.coupling.v);
        f("adaptive.enc_conv_w", &mut self.adaptive.enc_conv_w);
        f("adaptive.enc_conv_b", &mut self.adaptive.enc_conv_b);
        f("adaptive.enc_fc1_w", &mut self.adaptive.enc_fc1_w);
        f("adaptive.enc_fc1_b", &mut self.adaptive.enc_fc1_b);
        f("adaptive.enc_fc2_w", &mut self.adaptive.enc_fc2_w);
        f("adaptive.enc_fc2_b", &mut self.adaptive.enc_fc2_b);
        f("adaptive.modal_w", &mut self.adaptive.modal_w);
        f("adaptive.modal_b", &mut self.adaptive.modal_b);
        f("adaptive.coupling_w", &mut self.adaptive.coupling_w);
        f("adaptive.coupling_b", &mut self.adaptive.coupling_b);
        f("adaptive.gate_raw", &mut self.adaptive.gate_raw);
        f("temporal.embed_w", &mut self.temporal.embed_w);
        f("temporal.embed_b", &mut self.temporal.embed_b);
        f("temporal.speed_w", &mut self.temporal.speed_w);
        f("temporal.speed_b", &mut self.temporal.speed_b);
        match &mut self.temporal.body {
            crate::temporal::TemporalBody::Ssm(layers) => {
                for (i, l) in layers.iter_mut().enumerate() {
                    f(ssm_name(i, 0), &mut l.w_delta);
                    f(ssm_name(i, 1), &mut l.b_delta);
                    f(ssm_name(i, 2), &mut l.w_b);
                    f(ssm_name(i, 3), &mut l.b_b);
                    f(ssm_name(i, 4), &mut l.w_c);
                    f(ssm_name(i, 5), &mut l.b_c);
                    f(ssm_name(i, 6), &mut l.raw_a);
                    f(ssm_name(i, 7), &mut l.gate_w);
                    f(ssm_name(i, 8), &mut l.gate_b);
                }
            }
            crate::temporal::TemporalBody::Linear { w, b } => {
                f("temporal.linear_w", w);
                f("temporal.linear_b", b);
            }
        }
        f("temporal.out_w", &mut self.temporal.out_w);
        f("temporal.out_b", &mut self.temporal.out_b);
        f("temporal.angle_w", &mut self.temporal.angle_w);
        f("temporal.angle_b", &mut self.temporal.angle_b);
        f("fusion_raw", &mut self.fusion_raw);
    }

    /// Whether a named parameter group participates in the active variant.
    pub fn param_is_active(&self, name: &str) -> bool {
        let flags = &self.config.flags;
        if name.starts_with("frontend.") || name.starts_with("modal.") {
            return flags.use_physical;
        }
        if name == "coupling.d" {
            return flags.use_physical;
        }
        if name.starts_with("coupling.") {
            return flags.use_physical && flags.use_mimo;
        }
        if name == "adaptive.coupling_w" || name == "adaptive.coupling_b" {
            return flags.use_physical && flags.use_adaptive && flags.use_mimo;
        }
        if name.starts_with("adaptive.") {
            return flags.use_physical && flags.use_adaptive;
        }
        if name.starts_with("temporal.") {
            return flags.use_temporal;
        }
        if name == "fusion_raw" {
            return flags.use_physical && flags.use_temporal;
        }
        true
    }

    /// Total learnable scalar count across active components.
    pub fn param_count(&self) -> usize {
        let mut count = 0;
        self.visit_params(&mut |name, t| {
            if self.param_is_active(name) {
                count += t.numel();
            }
        });
        count
    }
}

fn ssm_name(layer: usize, field: usize) -> &'static str {
    // Two layers, nine fields; static names keep the visitor allocation-free.
    const NAMES: [[&str; 9]; 2] = [
        [
            "temporal.ssm0.w_delta",
            "temporal.ssm0.b_delta",
            "temporal.ssm0.w_b",
            "temporal.ssm0.b_b",
            "temporal.ssm0.w_c",
            "temporal.ssm0.b_c",
            "temporal.ssm0.raw_a",
            "temporal.ssm0.gate_w",
            "temporal.ssm0.gate_b",
        ],
        [
            "temporal.ssm1.w_delta",
            "temporal.ssm1.b_delta",
            "temporal.ssm1.w_b",
            "temporal.ssm1.b_b",
            "temporal.ssm1.w_c",
            "temporal.ssm1.b_c",
            "temporal.ssm1.raw_a",
            "temporal.ssm1.gate_w",
            "temporal.ssm1.gate_b",
        ],
    ];
    NAMES[layer][field]
}

/// dB output head: `20*log10((softplus(y_lin) + eps) / y_ref)`.
pub fn db_head(g: &mut Graph, y_lin: &Tensor, eps: f64, y_ref: f64) -> Result<Tensor> {
    let sp = g.softplus(y_lin)?;
    let shifted = g.shift(&sp, eps)?;
    let ratio = g.scale(&shifted, 1.0 / y_ref)?;
    let ln = g.log(&ratio)?;
    Ok(g.scale(&ln, 20.0 / std::f64::consts::LN_10)?)
}

/// One sample's prediction `y_hat` [40, 4]. `live` must be a
/// [`ModelState::register`]ed copy on the same graph.
pub fn forward_sample(g: &mut Graph, live: &ModelState, x: &[f64], v: &[f64]) -> Result<Tensor> {
    let flags = live.config.flags;
    let y_phys = if flags.use_physical {
        let x_order = order_frontend(g, x, v, &live.frontend)?;
        let x_mix = order_mixing(g, &x_order, &live.frontend)?;
        let (c, zeta, gain) = live.modal.mapped(g)?;
        let k_base = build_kernels(g, &c, &zeta, &gain, live.config.kernel_eps)?;
        let coupling = build_coupling(g, &live.coupling, !flags.use_mimo)?;
        let base = base_response(g, &x_mix, &k_base, &coupling)?;
        if flags.use_adaptive {
            let z = adaptive::encode_context(g, &x_mix, &live.adaptive)?;
            let corr = adaptive::modal_head(g, &z, &live.adaptive, &c, &zeta, &gain, &k_base, live.config.kernel_eps)?;
            let dw = if flags.use_mimo {
                Some(adaptive::coupling_head(g, &z, &live.adaptive)?)
            } else {
                None
            };
            let beta = adaptive::gate_beta(g, &live.adaptive)?;
            Some(adaptive::corrected_response(
                g,
                &x_mix,
                &base.z_modes,
                &corr.dk,
                &corr.k_adp,
                dw.as_deref(),
                &beta,
                &base.y_base,
            )?)
        } else {
            Some(base.y_base)
        }
    } else {
        None
    };

    let y_time = if flags.use_temporal {
        Some(temporal_branch(g, x, v, &live.temporal)?)
    } else {
        None
    };

    let y_lin = match (y_phys, y_time) {
        (Some(p), Some(t)) => {
            let alpha = g.sigmoid(&live.fusion_raw)?;
            let one_minus = g.sub(&Tensor::scalar(1.0), &alpha)?;
            let wp = g.mul(&p, &one_minus)?;
            let wt = g.mul(&t, &alpha)?;
            g.add(&wp, &wt)?
        }
        (Some(p), None) => p,
        (None, Some(t)) => t,
        (None, None) => unreachable!("validated at construction"),
    };
    db_head(g, &y_lin, live.config.out_eps, live.config.y_ref)
}

/// Mean absolute error over selected samples of a batch, in the dB domain.
/// Returns the scalar loss tensor.
pub fn batch_mae_loss(g: &mut Graph, live: &ModelState, batch: &SampleBatch, indices: &[usize]) -> Result<Tensor> {
    if indices.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    let mut acc: Option<Tensor> = None;
    for &i in indices {
        let pred = forward_sample(g, live, batch.sample_x(i), batch.sample_v(i))?;
        let target = Tensor::new(vec![N_ORDERS, N_CHANNELS], batch.sample_y(i).to_vec())?;
        let diff = g.sub(&pred, &target)?;
        let abs = g.abs(&diff)?;
        let mae = g.mean_all(&abs)?;
        acc = Some(match acc {
            Some(a) => g.add(&a, &mae)?,
            None => mae,
        });
    }
    Ok(g.scale(&acc.unwrap(), 1.0 / indices.len() as f64)?)
}

/// No-grad predictions for a whole batch, flat `[N, 40, 4]` row-major.
pub fn predict_batch(state: &ModelState, batch: &SampleBatch) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(batch.len() * N_ORDERS * N_CHANNELS);
    for i in 0..batch.len() {
        let mut g = Graph::new();
        let live = state.register(&mut g);
        let pred = forward_sample(&mut g, &live, batch.sample_x(i), batch.sample_v(i))?;
        out.extend_from_slice(pred.data());
    }
    Ok(out)
}

/// Gradients of the batch MAE loss for every parameter, keyed by the fixed
/// visit order. Returns (loss value, name -> gradient pairs).
pub fn loss_and_gradients(
    state: &ModelState,
    batch: &SampleBatch,
    indices: &[usize],
) -> Result<(f64, Vec<(&'static str, Tensor)>)> {
    let mut g = Graph::new();
    let live = state.register(&mut g);
    let loss = batch_mae_loss(&mut g, &live, batch, indices)?;
    let grads: GradMap = g.backward(&loss)?;
    let mut out = Vec::new();
    live.visit_params(&mut |name, t| {
        out.push((name, grads.get(t)));
    });
    Ok((loss.item(), out))
}

// ── Checkpoints ─────────────────────────────────────────────────────────

/// JSON header of a checkpoint file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: ModelConfig,
    pub epoch: usize,
    pub seed: u64,
    pub metrics: std::collections::BTreeMap<String, f64>,
}

pub fn save_checkpoint(state: &ModelState, meta: &CheckpointMeta, path: &Path) -> Result<()> {
    let header = serde_json::to_vec(meta)?;
    let mut blob: Vec<u8> = Vec::new();
    state.visit_params(&mut |_, t| {
        for &v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    });
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&(header.len() as u64).to_le_bytes())?;
    f.write_all(&header)?;
    f.write_all(&blob)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelState, CheckpointMeta)> {
    let mut f = std::fs::File::open(path)?;
    let mut len_bytes = [0u8; 8];
    f.read_exact(&mut len_bytes)?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    let mut header = vec![0u8; header_len];
    f.read_exact(&mut header)?;
    let meta: CheckpointMeta = serde_json::from_slice(&header)?;
    let mut blob = Vec::new();
    f.read_to_end(&mut blob)?;

    let mut state = ModelState::init(&meta.config, meta.seed)?;
    let mut offset = 0usize;
    let mut fail: Option<String> = None;
    state.visit_params_mut(&mut |name, t| {
        let n = t.numel() * 8;
        if offset + n > blob.len() {
            if fail.is_none() {
                fail = Some(format!("checkpoint blob too short at parameter '{}'", name));
            }
            return;
        }
        let vals = t.values_mut();
        for (i, v) in vals.iter_mut().enumerate() {
            let at = offset + i * 8;
            *v = f64::from_le_bytes(blob[at..at + 8].try_into().unwrap());
        }
        offset += n;
    });
    if let Some(msg) = fail {
        return Err(Error::Data(msg));
    }
    if offset != blob.len() {
        return Err(Error::Data(format!(
            "checkpoint blob has {} trailing bytes; config/code mismatch",
            blob.len() - offset
        )));
    }
    Ok((state, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dtensor::grad_check;
    use crate::nninit::normal_tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::TAU;

    fn small_config() -> ModelConfig {
        ModelConfig {
            n_modes: 4,
            d_context: 12,
            enc_hidden: 10,
            d_model: 6,
            d_state: 3,
            ..Default::default()
        }
    }

    fn toy_batch(n: usize, seed: u64) -> SampleBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut batch = SampleBatch::default();
        for _ in 0..n {
            let mut x = vec![0.0; 400 * 4];
            for c in 0..4 {
                for (ord, amp) in [(3, 2.0), (11, 5.0), (24, 1.0)] {
                    let phase: f64 = rng.gen_range(0.0..TAU);
                    let amp = amp * rng.gen_range(0.5..2.0);
                    for j in 0..400 {
                        x[j * 4 + c] += amp * (TAU * ord as f64 * j as f64 / 400.0 + phase).cos();
                    }
                }
            }
            let v = [rng.gen_range(295.0..305.0); 4];
            let y: Vec<f64> = (0..160).map(|_| rng.gen_range(0.0..30.0)).collect();
            batch.push(&x, &v, &y, "g0");
        }
        batch
    }

    #[test]
    fn head_reference_values() {
        let mut g = Graph::new();
        // softplus(10) + 0, ref 1.
        let y = db_head(&mut g, &Tensor::scalar(10.0), 0.0, 1.0).unwrap();
        assert!((y.item() - 20.0000394).abs() < 1e-6, "{}", y.item());
        // softplus(0) = ln 2.
        let y = db_head(&mut g, &Tensor::scalar(0.0), 0.0, 1.0).unwrap();
        assert!((y.item() - (-3.1827)).abs() < 1e-4, "{}", y.item());
        // Deeply negative input rides the eps floor.
        let y = db_head(&mut g, &Tensor::scalar(-50.0), 1e-6, 1.0).unwrap();
        assert!((y.item() - (-120.0)).abs() < 1e-3, "{}", y.item());
    }

    #[test]
    fn head_is_finite_and_monotone() {
        let mut g = Graph::new();
        let xs: Vec<f64> = (-60..=60).map(|i| i as f64).collect();
        let t = Tensor::new(vec![xs.len()], xs).unwrap();
        let y = db_head(&mut g, &t, 1e-6, 1.0).unwrap();
        let floor = 20.0 * 1e-6f64.log10();
        let mut prev = f64::NEG_INFINITY;
        for &v in y.data() {
            assert!(v.is_finite());
            assert!(v >= floor - 1e-9);
            assert!(v > prev, "head must be strictly increasing");
            prev = v;
        }
    }

    #[test]
    fn config_rejects_both_branches_off() {
        let mut cfg = ModelConfig::default();
        cfg.flags.use_physical = false;
        cfg.flags.use_temporal = false;
        assert!(matches!(ModelState::init(&cfg, 0), Err(Error::Config(_))));
    }

    #[test]
    fn param_count_component_examples() {
        let modal = ModalParams::init(12);
        let n = modal.raw_center.numel() + modal.raw_damp.numel() + modal.raw_gain.numel();
        assert_eq!(n, 36);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let bank = CouplingBank::init(12, &mut rng);
        assert_eq!(bank.d.numel() + bank.u.numel() + bank.v.numel(), 240);
    }

    #[test]
    fn default_param_count_within_budget() {
        let state = ModelState::init(&ModelConfig::default(), 0).unwrap();
        let n = state.param_count();
        assert!((300_000..=800_000).contains(&n), "param count {}", n);
    }

    #[test]
    fn saturated_fusion_matches_phys_only() {
        let cfg = small_config();
        let mut state = ModelState::init(&cfg, 7).unwrap();
        state.fusion_raw = Tensor::filled(vec![1], -20.0);
        let batch = toy_batch(2, 1);
        let full = predict_batch(&state, &batch).unwrap();
        let mut phys_cfg = cfg.clone();
        phys_cfg.flags.use_temporal = false;
        let mut phys_state = ModelState::init(&phys_cfg, 7).unwrap();
        // Same physical parameters; only the branch wiring differs.
        phys_state.frontend = state.frontend.clone();
        phys_state.modal = state.modal.clone();
        phys_state.coupling = state.coupling.clone();
        phys_state.adaptive = state.adaptive.clone();
        let phys = predict_batch(&phys_state, &batch).unwrap();
        for (a, b) in full.iter().zip(&phys) {
            assert!((a - b).abs() < 1e-6, "{} vs {}", a, b);
        }
    }

    #[test]
    fn adaptive_off_matches_zeroed_heads_with_closed_gate() {
        let cfg = small_config();
        let mut state = ModelState::init(&cfg, 3).unwrap();
        // Heads are zero-initialized already; saturate the gate.
        state.adaptive.gate_raw = Tensor::filled(vec![1], -40.0);
        let batch = toy_batch(2, 2);
        let full = predict_batch(&state, &batch).unwrap();
        let mut off_cfg = cfg.clone();
        off_cfg.flags.use_adaptive = false;
        let mut off = ModelState::init(&off_cfg, 3).unwrap();
        off.frontend = state.frontend.clone();
        off.modal = state.modal.clone();
        off.coupling = state.coupling.clone();
        off.temporal = state.temporal.clone();
        off.fusion_raw = state.fusion_raw.clone();
        let plain = predict_batch(&off, &batch).unwrap();
        for (a, b) in full.iter().zip(&plain) {
            assert!((a - b).abs() < 1e-9, "{} vs {}", a, b);
        }
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let cfg = small_config();
        let mut state = ModelState::init(&cfg, 11).unwrap();
        // Perturb so the blob is not the init pattern.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        state.visit_params_mut(&mut |_, t| {
            let noise = normal_tensor(&mut rng, t.shape(), 0.1);
            let vals = t.values_mut();
            for (v, n) in vals.iter_mut().zip(noise.data()) {
                *v += n;
            }
        });
        let meta = CheckpointMeta {
            config: cfg,
            epoch: 17,
            seed: 11,
            metrics: [("train_mae".to_string(), 0.75)].into_iter().collect(),
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        save_checkpoint(&state, &meta, &path).unwrap();
        let (loaded, meta2) = load_checkpoint(&path).unwrap();
        assert_eq!(meta2.epoch, 17);
        let mut orig: Vec<(String, Vec<f64>)> = Vec::new();
        state.visit_params(&mut |n, t| orig.push((n.to_string(), t.data().to_vec())));
        let mut back: Vec<(String, Vec<f64>)> = Vec::new();
        loaded.visit_params(&mut |n, t| back.push((n.to_string(), t.data().to_vec())));
        assert_eq!(orig.len(), back.len());
        for ((n1, d1), (n2, d2)) in orig.iter().zip(&back) {
            assert_eq!(n1, n2);
            assert_eq!(d1, d2, "parameter {} not restored bit-exactly", n1);
        }
        // Saving the loaded state reproduces the file byte-for-byte.
        let path2 = dir.path().join("ckpt2.bin");
        save_checkpoint(&loaded, &meta, &path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn grad_check_full_model_mae_loss() {
        let cfg = ModelConfig {
            n_modes: 3,
            d_context: 6,
            enc_hidden: 5,
            d_model: 4,
            d_state: 2,
            ..Default::default()
        };
        let state = ModelState::init(&cfg, 13).unwrap();
        let batch = toy_batch(2, 3);
        // Flatten every parameter into the grad_check interface.
        let mut names = Vec::new();
        let mut leaves = Vec::new();
        state.visit_params(&mut |n, t| {
            names.push(n);
            leaves.push(t.clone());
        });
        let err = grad_check(
            |g, ps| {
                let mut probe = state.clone();
                let mut i = 0;
                probe.visit_params_mut(&mut |_, t| {
                    *t = ps[i].clone();
                    i += 1;
                });
                batch_mae_loss(g, &probe, &batch, &[0, 1])
            },
            &leaves,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "full-model FD error {}", err);
    }
}
