//! Order Frontend and Order Mixing.
//!
//! The frontend turns the raw angle-domain sample (x, v) into order-domain
//! features: 400-point DFT per channel, single-sided amplitudes at orders
//! 1..=40, dB mapping, an additive speed projection broadcast over orders,
//! and a residual 1-D conv encoder. Order Mixing then enhances local
//! correlations among neighboring orders:
//!
//! ```text
//! h     = Linear(x_order) + E_order
//! dx    = Proj(LocalConv(h))
//! x_mix = x_order + lambda * dx
//! ```

use rand::Rng;

use crate::dtensor::{Graph, Tensor};
use crate::nninit::{linear_tensor, normal_tensor};
use crate::preprocess::{db_floor, order_amplitudes, ANGLE_POINTS, N_CHANNELS, N_ORDERS};
use crate::{Error, Result};

/// Hidden width of the mixing block.
pub const MIXING_WIDTH: usize = 16;

/// Speed is centered on the retained window (295..305 km/h) before the
/// learnable projection, so a 300 km/h pass reads as zero.
pub const SPEED_CENTER_KMH: f64 = 300.0;
pub const SPEED_SCALE_KMH: f64 = 5.0;

#[derive(Debug, Clone)]
pub struct FrontendParams {
    /// Residual conv encoder over the order axis, channels 4 -> 4, kernel 3.
    pub conv_w: Tensor,
    pub conv_b: Tensor,
    /// Speed projection 4 -> 4, added to every order row.
    pub speed_w: Tensor,
    pub speed_b: Tensor,
    /// Mixing: input projection 4 -> d_h, order embedding, local conv,
    /// output projection d_h -> 4, and the residual scale lambda.
    pub in_proj: Tensor,
    pub in_b: Tensor,
    pub e_order: Tensor,
    pub local_w: Tensor,
    pub local_b: Tensor,
    pub out_proj: Tensor,
    pub out_b: Tensor,
    pub lambda: Tensor,
}

impl FrontendParams {
    /// Speed path starts at zero and lambda starts at zero, so the frontend
    /// initially reduces to dB features plus a small conv residual and
    /// mixing is the identity.
    pub fn init(rng: &mut impl Rng) -> Self {
        FrontendParams {
            conv_w: normal_tensor(rng, &[N_CHANNELS, N_CHANNELS, 3], 0.05),
            conv_b: Tensor::zeros(vec![N_CHANNELS]),
            speed_w: Tensor::zeros(vec![N_CHANNELS, N_CHANNELS]),
            speed_b: Tensor::zeros(vec![N_CHANNELS]),
            in_proj: linear_tensor(rng, N_CHANNELS, MIXING_WIDTH),
            in_b: Tensor::zeros(vec![MIXING_WIDTH]),
            e_order: normal_tensor(rng, &[N_ORDERS, MIXING_WIDTH], 0.1),
            local_w: normal_tensor(rng, &[MIXING_WIDTH, MIXING_WIDTH, 3], 0.15),
            local_b: Tensor::zeros(vec![MIXING_WIDTH]),
            out_proj: normal_tensor(rng, &[MIXING_WIDTH, N_CHANNELS], 0.25),
            out_b: Tensor::zeros(vec![N_CHANNELS]),
            lambda: Tensor::zeros(vec![1]),
        }
    }

    pub fn register(&self, g: &mut Graph) -> FrontendParams {
        FrontendParams {
            conv_w: g.leaf(&self.conv_w),
            conv_b: g.leaf(&self.conv_b),
            speed_w: g.leaf(&self.speed_w),
            speed_b: g.leaf(&self.speed_b),
            in_proj: g.leaf(&self.in_proj),
            in_b: g.leaf(&self.in_b),
            e_order: g.leaf(&self.e_order),
            local_w: g.leaf(&self.local_w),
            local_b: g.leaf(&self.local_b),
            out_proj: g.leaf(&self.out_proj),
            out_b: g.leaf(&self.out_b),
            lambda: g.leaf(&self.lambda),
        }
    }
}

/// Data part of the frontend: per-channel single-sided order amplitudes in
/// dB (reference 1, floor -120 dB). `x` is one sample in [400, 4] layout;
/// the result is [40, 4] row-major.
pub fn order_db_features(x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != ANGLE_POINTS * N_CHANNELS {
        return Err(Error::Data(format!(
            "expected a {}x{} sample, got {} values",
            ANGLE_POINTS,
            N_CHANNELS,
            x.len()
        )));
    }
    let mut out = vec![0.0; N_ORDERS * N_CHANNELS];
    let mut channel = vec![0.0; ANGLE_POINTS];
    for c in 0..N_CHANNELS {
        for (j, slot) in channel.iter_mut().enumerate() {
            *slot = x[j * N_CHANNELS + c];
        }
        let amps = order_amplitudes(&channel, N_ORDERS);
        for (k, &a) in amps.iter().enumerate() {
            out[k * N_CHANNELS + c] = db_floor(a);
        }
    }
    Ok(out)
}

/// Maps one raw sample (x, v) to order-domain features `x_order` [40, 4].
pub fn order_frontend(g: &mut Graph, x: &[f64], v: &[f64], params: &FrontendParams) -> Result<Tensor> {
    if v.len() != N_CHANNELS {
        return Err(Error::Data(format!("expected {} speed values, got {}", N_CHANNELS, v.len())));
    }
    let features = Tensor::new(vec![N_ORDERS, N_CHANNELS], order_db_features(x)?)?;
    let v_norm: Vec<f64> = v.iter().map(|&s| (s - SPEED_CENTER_KMH) / SPEED_SCALE_KMH).collect();
    let v_row = Tensor::new(vec![1, N_CHANNELS], v_norm)?;
    let proj = g.matmul(&v_row, &params.speed_w)?;
    let proj = g.add(&proj, &params.speed_b)?;
    let with_speed = g.add(&features, &proj)?;
    let conv = g.conv1d_same(&with_speed, &params.conv_w)?;
    let conv = g.add(&conv, &params.conv_b)?;
    Ok(g.add(&with_speed, &conv)?)
}

/// Local order mixing: `x_mix = x_order + lambda * Proj(LocalConv(Linear(x_order) + E))`.
pub fn order_mixing(g: &mut Graph, x_order: &Tensor, params: &FrontendParams) -> Result<Tensor> {
    let projected = g.matmul(x_order, &params.in_proj)?;
    let projected = g.add(&projected, &params.in_b)?;
    let h = g.add(&projected, &params.e_order)?;
    let local = g.conv1d_same(&h, &params.local_w)?;
    let local = g.add(&local, &params.local_b)?;
    let dx = g.matmul(&local, &params.out_proj)?;
    let dx = g.add(&dx, &params.out_b)?;
    let scaled = g.mul(&dx, &params.lambda)?;
    Ok(g.add(x_order, &scaled)?)
}
