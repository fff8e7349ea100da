//! Adaptive physical correction: a context encoder compresses the mixed
//! order representation of the current sample into a vector z, two
//! zero-initialized heads predict structured increments to the shared modal
//! parameters and coupling matrices, and a bounded gate beta mixes the
//! correction into the base physical output:
//!
//! ```text
//! c~ = c + dc,  zeta~ = zeta (.) exp(dlog zeta),  g~ = g (.) exp(dlog g)
//! dK = K_adp - K_base
//! y_dK = sum_m z_m (.) dk_m
//! y_dW = sum_m (dW_m x_mix^T)^T (.) k~_m
//! y_phys = y_base + beta * (y_dK + y_dW)
//! ```

use rand::Rng;

use crate::dtensor::{Graph, Tensor};
use crate::nninit::{linear_tensor, normal_tensor};
use crate::physbranch::{build_kernels, KernelBank};
use crate::preprocess::{N_CHANNELS, N_ORDERS};
use crate::Result;

/// Context vector width.
pub const D_CONTEXT: usize = 256;
/// Hidden width of the encoder MLP.
pub const ENC_HIDDEN: usize = 512;
/// Encoder conv: 4 -> 8 channels, kernel 5, over the order axis.
pub const ENC_CONV_CHANNELS: usize = 8;
const ENC_CONV_KERNEL: usize = 5;
/// Flattened encoder input: conv features plus per-channel mean and std.
pub const ENC_STAT_WIDTH: usize = ENC_CONV_CHANNELS * N_ORDERS + 2 * N_CHANNELS;
/// Upper bound of the correction gate.
pub const BETA_MAX: f64 = 0.2;
/// Raw gate init: beta = 0.2 * sigmoid(-6) ~ 5e-4, a near-zero start.
pub const GATE_RAW_INIT: f64 = -6.0;
/// Center offsets are bounded to +-3 orders.
pub const DELTA_C_MAX: f64 = 3.0;
/// Adaptive centers are floored here so the kernel ratio stays defined;
/// inactive while centers remain on the grid.
pub const CENTER_FLOOR: f64 = 1.1;

/// dB-range inputs are scaled by this before the encoder conv so that
/// activations stay O(1).
const INPUT_SCALE: f64 = 1.0 / 20.0;

#[derive(Debug, Clone)]
pub struct AdaptiveParams {
    pub enc_conv_w: Tensor,
    pub enc_conv_b: Tensor,
    pub enc_fc1_w: Tensor,
    pub enc_fc1_b: Tensor,
    pub enc_fc2_w: Tensor,
    pub enc_fc2_b: Tensor,
    /// d_c -> 3M head for (dc, dlog zeta, dlog g); final layer zero-init.
    pub modal_w: Tensor,
    pub modal_b: Tensor,
    /// d_c -> 16M head for dW; final layer zero-init.
    pub coupling_w: Tensor,
    pub coupling_b: Tensor,
    /// Raw gate parameter; beta = BETA_MAX * sigmoid(gate_raw).
    pub gate_raw: Tensor,
}

impl AdaptiveParams {
    pub fn init(rng: &mut impl Rng, n_modes: usize, d_context: usize, enc_hidden: usize) -> Self {
        AdaptiveParams {
            enc_conv_w: normal_tensor(rng, &[ENC_CONV_CHANNELS, N_CHANNELS, ENC_CONV_KERNEL], 0.2),
            enc_conv_b: Tensor::zeros(vec![ENC_CONV_CHANNELS]),
            enc_fc1_w: linear_tensor(rng, ENC_STAT_WIDTH, enc_hidden),
            enc_fc1_b: Tensor::zeros(vec![enc_hidden]),
            enc_fc2_w: linear_tensor(rng, enc_hidden, d_context),
            enc_fc2_b: Tensor::zeros(vec![d_context]),
            modal_w: Tensor::zeros(vec![d_context, 3 * n_modes]),
            modal_b: Tensor::zeros(vec![3 * n_modes]),
            coupling_w: Tensor::zeros(vec![d_context, n_modes * N_CHANNELS * N_CHANNELS]),
            coupling_b: Tensor::zeros(vec![n_modes * N_CHANNELS * N_CHANNELS]),
            gate_raw: Tensor::filled(vec![1], GATE_RAW_INIT),
        }
    }

    pub fn n_modes(&self) -> usize {
        self.modal_b.numel() / 3
    }

    pub fn d_context(&self) -> usize {
        self.enc_fc2_b.numel()
    }

    pub fn register(&self, g: &mut Graph) -> AdaptiveParams {
        AdaptiveParams {
            enc_conv_w: g.leaf(&self.enc_conv_w),
            enc_conv_b: g.leaf(&self.enc_conv_b),
            enc_fc1_w: g.leaf(&self.enc_fc1_w),
            enc_fc1_b: g.leaf(&self.enc_fc1_b),
            enc_fc2_w: g.leaf(&self.enc_fc2_w),
            enc_fc2_b: g.leaf(&self.enc_fc2_b),
            modal_w: g.leaf(&self.modal_w),
            modal_b: g.leaf(&self.modal_b),
            coupling_w: g.leaf(&self.coupling_w),
            coupling_b: g.leaf(&self.coupling_b),
            gate_raw: g.leaf(&self.gate_raw),
        }
    }
}

/// Context vector z of one sample: local conv patterns over the order axis
/// plus per-channel mean/std statistics, through a 2-layer MLP. Shape [1, d_c].
pub fn encode_context(g: &mut Graph, x_mix: &Tensor, params: &AdaptiveParams) -> Result<Tensor> {
    let scaled = g.scale(x_mix, INPUT_SCALE)?;
    let conv = g.conv1d_same(&scaled, &params.enc_conv_w)?;
    let conv = g.add(&conv, &params.enc_conv_b)?;
    let conv = g.relu(&conv)?;
    let flat = g.reshape(&conv, &[1, ENC_CONV_CHANNELS * N_ORDERS])?;
    let mean = g.mean_axis(&scaled, 0)?; // [1, 4]
    let centered = g.sub(&scaled, &mean)?;
    let sq = g.square(&centered)?;
    let var = g.mean_axis(&sq, 0)?;
    let var = g.shift(&var, 1e-8)?;
    let std = g.sqrt(&var)?;
    let cat = g.concat(&[&flat, &mean, &std], 1)?;
    let h = g.matmul(&cat, &params.enc_fc1_w)?;
    let h = g.add(&h, &params.enc_fc1_b)?;
    let h = g.relu(&h)?;
    let z = g.matmul(&h, &params.enc_fc2_w)?;
    Ok(g.add(&z, &params.enc_fc2_b)?)
}

/// Sample-adaptive modal parameters and kernels.
pub struct ModalCorrection {
    pub center: Tensor,
    pub damping: Tensor,
    pub gain: Tensor,
    pub k_adp: KernelBank,
    pub dk: Tensor,
}

/// Predicts (dc, dlog zeta, dlog g) from z, composes the adaptive modal
/// parameters, regenerates the kernel bank, and forms `dK = K_adp - K_base`.
pub fn modal_head(
    g: &mut Graph,
    z: &Tensor,
    params: &AdaptiveParams,
    base_center: &Tensor,
    base_damping: &Tensor,
    base_gain: &Tensor,
    k_base: &KernelBank,
    eps: f64,
) -> Result<ModalCorrection> {
    let m = params.n_modes();
    let raw = g.matmul(z, &params.modal_w)?;
    let raw = g.add(&raw, &params.modal_b)?; // [1, 3M]
    let dc_raw = g.slice(&raw, 1, 0, m)?;
    let dc_raw = g.reshape(&dc_raw, &[m])?;
    let dlz = g.slice(&raw, 1, m, m)?;
    let dlz = g.reshape(&dlz, &[m])?;
    let dlg = g.slice(&raw, 1, 2 * m, m)?;
    let dlg = g.reshape(&dlg, &[m])?;

    let dc_t = g.tanh(&dc_raw)?;
    let dc = g.scale(&dc_t, DELTA_C_MAX)?;
    let center_shifted = g.add(base_center, &dc)?;
    // Floor at CENTER_FLOOR via relu; exact pass-through above the floor.
    let over = g.shift(&center_shifted, -CENTER_FLOOR)?;
    let over = g.relu(&over)?;
    let center = g.shift(&over, CENTER_FLOOR)?;

    let zeta_scale = g.exp(&dlz)?;
    let damping = g.mul(base_damping, &zeta_scale)?;
    let gain_scale = g.exp(&dlg)?;
    let gain = g.mul(base_gain, &gain_scale)?;

    let k_adp = build_kernels(g, &center, &damping, &gain, eps)?;
    let dk = g.sub(&k_adp.k, &k_base.k)?;
    Ok(ModalCorrection { center, damping, gain, k_adp, dk })
}

/// Predicts the per-mode coupling increments `dW_m`, each [4, 4];
/// zero at initialization.
pub fn coupling_head(g: &mut Graph, z: &Tensor, params: &AdaptiveParams) -> Result<Vec<Tensor>> {
    let m = params.n_modes();
    let raw = g.matmul(z, &params.coupling_w)?;
    let raw = g.add(&raw, &params.coupling_b)?; // [1, 16M]
    let cube = g.reshape(&raw, &[m, N_CHANNELS, N_CHANNELS])?;
    let mut out = Vec::with_capacity(m);
    for mi in 0..m {
        let w = g.slice(&cube, 0, mi, 1)?;
        out.push(g.reshape(&w, &[N_CHANNELS, N_CHANNELS])?);
    }
    Ok(out)
}

/// The bounded correction gate `beta = BETA_MAX * sigmoid(gate_raw)`.
pub fn gate_beta(g: &mut Graph, params: &AdaptiveParams) -> Result<Tensor> {
    let s = g.sigmoid(&params.gate_raw)?;
    Ok(g.scale(&s, BETA_MAX)?)
}

/// Combines the structured corrections with the base output:
/// `y_phys = y_base + beta * (y_dK + y_dW)`. `dw: None` drops the coupling
/// correction term (the no-MIMO ablation keeps only y_dK).
#[allow(clippy::too_many_arguments)]
pub fn corrected_response(
    g: &mut Graph,
    x_mix: &Tensor,
    z_modes: &[Tensor],
    dk: &Tensor,
    k_adp: &KernelBank,
    dw: Option<&[Tensor]>,
    beta: &Tensor,
    y_base: &Tensor,
) -> Result<Tensor> {
    let m = z_modes.len();
    let mut y_delta: Option<Tensor> = None;
    for mi in 0..m {
        // y_dK term: z_m (.) dk_m, kernel broadcast over channels.
        let dk_m = g.slice(dk, 0, mi, 1)?;
        let dk_col = g.reshape(&dk_m, &[N_ORDERS, 1])?;
        let mut term = g.mul(&dk_col, &z_modes[mi])?;
        if let Some(dw) = dw {
            // y_dW term: (dW_m x_mix^T)^T (.) k~_m = (x_mix dW_m^T) (.) k~_m.
            let dw_t = g.transpose(&dw[mi])?;
            let zw = g.matmul(x_mix, &dw_t)?;
            let k_m = g.slice(&k_adp.k, 0, mi, 1)?;
            let k_col = g.reshape(&k_m, &[N_ORDERS, 1])?;
            let t2 = g.mul(&k_col, &zw)?;
            term = g.add(&term, &t2)?;
        }
        y_delta = Some(match y_delta {
            Some(acc) => g.add(&acc, &term)?,
            None => term,
        });
    }
    let y_delta = y_delta.expect("at least one mode");
    let gated = g.mul(&y_delta, beta)?;
    Ok(g.add(y_base, &gated)?)
}
