//! Base physical branch: shared second-order modal response kernels on the
//! discrete order grid, diagonal-plus-low-rank MIMO coupling across the four
//! wheel channels, and modal weighting/summation.
//!
//! Each mode m with (center, damping, gain) = (c, zeta, g) contributes
//!
//! ```text
//! k_m[o] = g / sqrt((1 - (o/c)^2)^2 + (2*zeta*o/c)^2 + eps),  o = 1..=40
//! ```
//!
//! and a 4x4 coupling matrix `W_m = Diag(d_m) + U_m V_m^T`. The branch output
//! is `y_base = sum_m k_m (.) (x_mix W_m^T)`.

use rand::Rng;

use crate::dtensor::{Graph, Tensor};
use crate::preprocess::{N_CHANNELS, N_ORDERS};
use crate::{Error, Result};

/// Number of shared modes.
pub const N_MODES: usize = 12;
/// Low-rank dimension of the coupling factors.
pub const COUPLING_RANK: usize = 2;
/// Default kernel stabilizer under the square root.
pub const KERNEL_EPS: f64 = 1e-6;

/// Raw (unconstrained) modal parameters. Mapped values are
/// `c = 1 + 39*sigmoid(raw_center)`, `zeta = softplus(raw_damp)`,
/// `g = softplus(raw_gain)`, so centers stay inside the order grid and
/// dampings/gains stay positive.
#[derive(Debug, Clone)]
pub struct ModalParams {
    pub raw_center: Tensor,
    pub raw_damp: Tensor,
    pub raw_gain: Tensor,
}

pub(crate) fn inv_sigmoid(y: f64) -> f64 {
    (y / (1.0 - y)).ln()
}

pub(crate) fn inv_softplus(y: f64) -> f64 {
    // x with softplus(x) = y; beyond ~30 the map is the identity in f64.
    if y > 30.0 {
        y
    } else {
        (y.exp() - 1.0).ln()
    }
}

impl ModalParams {
    /// Centers evenly spread over [2.5, 38.5], damping 0.15, gain 1.
    pub fn init(n_modes: usize) -> Self {
        let centers: Vec<f64> = (0..n_modes)
            .map(|m| {
                let c = 2.5 + 36.0 * m as f64 / (n_modes - 1).max(1) as f64;
                inv_sigmoid((c - 1.0) / 39.0)
            })
            .collect();
        ModalParams {
            raw_center: Tensor::new(vec![n_modes], centers).unwrap(),
            raw_damp: Tensor::filled(vec![n_modes], inv_softplus(0.15)),
            raw_gain: Tensor::filled(vec![n_modes], inv_softplus(1.0)),
        }
    }

    /// Raw values chosen so the mapped (center, damping, gain) triples equal
    /// the given ones.
    pub fn from_mapped(centers: &[f64], dampings: &[f64], gains: &[f64]) -> Self {
        let rc: Vec<f64> = centers.iter().map(|&c| inv_sigmoid((c - 1.0) / 39.0)).collect();
        let rd: Vec<f64> = dampings.iter().map(|&z| inv_softplus(z)).collect();
        let rg: Vec<f64> = gains.iter().map(|&g| inv_softplus(g)).collect();
        ModalParams {
            raw_center: Tensor::new(vec![centers.len()], rc).unwrap(),
            raw_damp: Tensor::new(vec![dampings.len()], rd).unwrap(),
            raw_gain: Tensor::new(vec![gains.len()], rg).unwrap(),
        }
    }

    pub fn n_modes(&self) -> usize {
        self.raw_center.numel()
    }

    /// Leaf-attached copy; call once per graph before the forward pass.
    pub fn register(&self, g: &mut Graph) -> ModalParams {
        ModalParams {
            raw_center: g.leaf(&self.raw_center),
            raw_damp: g.leaf(&self.raw_damp),
            raw_gain: g.leaf(&self.raw_gain),
        }
    }

    /// In-graph mapped parameters (c, zeta, g), each shaped [M].
    pub fn mapped(&self, g: &mut Graph) -> Result<(Tensor, Tensor, Tensor)> {
        let sig = g.sigmoid(&self.raw_center)?;
        let scaled = g.scale(&sig, 39.0)?;
        let c = g.shift(&scaled, 1.0)?;
        let zeta = g.softplus(&self.raw_damp)?;
        let gain = g.softplus(&self.raw_gain)?;
        Ok((c, zeta, gain))
    }
}

/// Shared modal kernel bank K, shape [M, 40].
#[derive(Debug, Clone)]
pub struct KernelBank {
    pub k: Tensor,
}

/// The integer order grid o_k = k, k = 1..=40, as a [1, 40] constant.
pub fn order_grid() -> Tensor {
    Tensor::new(vec![1, N_ORDERS], (1..=N_ORDERS).map(|k| k as f64).collect()).unwrap()
}

/// Builds the [M, 40] kernel bank from mapped modal parameters ([M] each).
pub fn build_kernels(g: &mut Graph, center: &Tensor, damping: &Tensor, gain: &Tensor, eps: f64) -> Result<KernelBank> {
    let m = center.numel();
    let c_col = g.reshape(center, &[m, 1])?;
    let z_col = g.reshape(damping, &[m, 1])?;
    let g_col = g.reshape(gain, &[m, 1])?;
    let orders = order_grid();
    let ratio = g.div(&orders, &c_col)?; // [M, 40]
    let ratio_sq = g.square(&ratio)?;
    let one_minus = g.sub(&Tensor::scalar(1.0), &ratio_sq)?;
    let term1 = g.square(&one_minus)?;
    let zr = g.mul(&z_col, &ratio)?;
    let two_zr = g.scale(&zr, 2.0)?;
    let term2 = g.square(&two_zr)?;
    let sum = g.add(&term1, &term2)?;
    let stabilized = g.shift(&sum, eps)?;
    let root = g.sqrt(&stabilized)?;
    let k = g.div(&g_col, &root)?;
    Ok(KernelBank { k })
}

/// Plain-f64 evaluation of one kernel entry; the synthesis oracle and tests
/// use this as the direct form of the response magnitude.
pub fn sos_kernel_magnitude(center: f64, damping: f64, gain: f64, order: f64, eps: f64) -> f64 {
    let r = order / center;
    let a = 1.0 - r * r;
    gain / (a * a + (2.0 * damping * r).powi(2) + eps).sqrt()
}

/// Diagonal-plus-low-rank coupling bank: d [M,4], u and v [M,4,r].
#[derive(Debug, Clone)]
pub struct CouplingBank {
    pub d: Tensor,
    pub u: Tensor,
    pub v: Tensor,
}

impl CouplingBank {
    /// Identity-ish start: unit diagonals, factors ~ Normal(0, 0.01).
    pub fn init(n_modes: usize, rng: &mut impl Rng) -> Self {
        let f = n_modes * N_CHANNELS * COUPLING_RANK;
        let normal = |rng: &mut dyn rand::RngCore, n: usize| -> Vec<f64> {
            (0..n)
                .map(|_| {
                    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
                    let u2: f64 = rng.gen_range(0.0..1.0);
                    0.01 * (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
                })
                .collect()
        };
        CouplingBank {
            d: Tensor::filled(vec![n_modes, N_CHANNELS], 1.0),
            u: Tensor::new(vec![n_modes, N_CHANNELS, COUPLING_RANK], normal(rng, f)).unwrap(),
            v: Tensor::new(vec![n_modes, N_CHANNELS, COUPLING_RANK], normal(rng, f)).unwrap(),
        }
    }

    pub fn n_modes(&self) -> usize {
        self.d.shape()[0]
    }

    pub fn register(&self, g: &mut Graph) -> CouplingBank {
        CouplingBank { d: g.leaf(&self.d), u: g.leaf(&self.u), v: g.leaf(&self.v) }
    }
}

fn identity_4x4() -> Tensor {
    Tensor::new(
        vec![N_CHANNELS, N_CHANNELS],
        (0..N_CHANNELS * N_CHANNELS)
            .map(|i| if i / N_CHANNELS == i % N_CHANNELS { 1.0 } else { 0.0 })
            .collect(),
    )
    .unwrap()
}

/// Materializes the M coupling matrices `W_m = Diag(d_m) + U_m V_m^T`.
/// With `diagonal_only` the low-rank term is dropped (the no-MIMO ablation).
pub fn build_coupling(g: &mut Graph, bank: &CouplingBank, diagonal_only: bool) -> Result<Vec<Tensor>> {
    let m = bank.n_modes();
    let eye = identity_4x4();
    let mut out = Vec::with_capacity(m);
    for mi in 0..m {
        let d_m = g.slice(&bank.d, 0, mi, 1)?;
        let d_col = g.reshape(&d_m, &[N_CHANNELS, 1])?;
        let diag = g.mul(&d_col, &eye)?;
        if diagonal_only {
            out.push(diag);
            continue;
        }
        let u_m = g.slice(&bank.u, 0, mi, 1)?;
        let u_m = g.reshape(&u_m, &[N_CHANNELS, COUPLING_RANK])?;
        let v_m = g.slice(&bank.v, 0, mi, 1)?;
        let v_m = g.reshape(&v_m, &[N_CHANNELS, COUPLING_RANK])?;
        let v_t = g.transpose(&v_m)?;
        let low_rank = g.matmul(&u_m, &v_t)?;
        out.push(g.add(&diag, &low_rank)?);
    }
    Ok(out)
}

/// Output of the base physical branch for one sample.
pub struct BaseResponse {
    /// `y_base = sum_m y_m`, shape [40, 4].
    pub y_base: Tensor,
    /// Per-mode coupling outputs `z_m = x_mix W_m^T`, each [40, 4];
    /// the correction branch reuses these.
    pub z_modes: Vec<Tensor>,
}

/// MIMO coupling, modal weighting, and modal summation over one sample.
pub fn base_response(g: &mut Graph, x_mix: &Tensor, kernels: &KernelBank, coupling: &[Tensor]) -> Result<BaseResponse> {
    if x_mix.shape() != [N_ORDERS, N_CHANNELS] {
        return Err(Error::Tensor(crate::dtensor::DtError::ShapeMismatch {
            op: "base-response",
            details: format!("x_mix must be [40, 4], got {:?}", x_mix.shape()),
        }));
    }
    let mut z_modes = Vec::with_capacity(coupling.len());
    let mut y_base: Option<Tensor> = None;
    for (mi, w_m) in coupling.iter().enumerate() {
        let w_t = g.transpose(w_m)?;
        let z_m = g.matmul(x_mix, &w_t)?;
        let k_m = g.slice(&kernels.k, 0, mi, 1)?;
        let k_col = g.reshape(&k_m, &[N_ORDERS, 1])?;
        let y_m = g.mul(&k_col, &z_m)?;
        y_base = Some(match y_base {
            Some(acc) => g.add(&acc, &y_m)?,
            None => y_m,
        });
        z_modes.push(z_m);
    }
    Ok(BaseResponse { y_base: y_base.expect("at least one mode"), z_modes })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dtensor::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn kernel_golden_values() {
        // Resonance: o = c, the first bracket vanishes, 1/(2*zeta).
        let at_resonance = sos_kernel_magnitude(20.0, 0.1, 1.0, 20.0, 0.0);
        assert!((at_resonance - 5.0).abs() < 1e-6, "{}", at_resonance);
        // Low order relative to the center: 1/sqrt(0.99500625 + 1e-4).
        let low = sos_kernel_magnitude(20.0, 0.1, 1.0, 1.0, 0.0);
        assert!((low - 1.002456).abs() < 1e-6, "{}", low);
        // High-order roll-off: (1 - 400)^2 = 159201, (2*0.1*20)^2 = 16.
        let high = sos_kernel_magnitude(2.0, 0.1, 1.0, 40.0, 0.0);
        assert!((high - 0.0025062).abs() < 1e-6, "{}", high);
    }

    #[test]
    fn graph_kernels_match_direct_formula() {
        let centers = [3.0, 11.5, 20.0, 37.0];
        let dampings = [0.05, 0.15, 0.4, 0.9];
        let gains = [0.5, 1.0, 2.0, 7.0];
        let params = ModalParams::from_mapped(&centers, &dampings, &gains);
        let mut g = Graph::new();
        let (c, z, gn) = params.mapped(&mut g).unwrap();
        let bank = build_kernels(&mut g, &c, &z, &gn, KERNEL_EPS).unwrap();
        assert_eq!(bank.k.shape(), &[4, N_ORDERS]);
        for m in 0..4 {
            for k in 0..N_ORDERS {
                let direct = sos_kernel_magnitude(centers[m], dampings[m], gains[m], (k + 1) as f64, KERNEL_EPS);
                let got = bank.k.data()[m * N_ORDERS + k];
                assert!((got - direct).abs() < 1e-9 * direct.max(1.0), "m={} k={} {} vs {}", m, k, got, direct);
            }
        }
    }

    #[test]
    fn kernels_positive_for_finite_raw_params() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let raw: Vec<f64> = (0..N_MODES).map(|_| rng.gen_range(-30.0..30.0)).collect();
            let params = ModalParams {
                raw_center: Tensor::new(vec![N_MODES], raw.clone()).unwrap(),
                raw_damp: Tensor::new(vec![N_MODES], raw.iter().rev().cloned().collect()).unwrap(),
                raw_gain: Tensor::new(vec![N_MODES], raw.iter().map(|v| -v).collect()).unwrap(),
            };
            let mut g = Graph::new();
            let (c, z, gn) = params.mapped(&mut g).unwrap();
            let bank = build_kernels(&mut g, &c, &z, &gn, KERNEL_EPS).unwrap();
            for &v in bank.k.data() {
                assert!(v > 0.0 && v.is_finite(), "kernel entry {}", v);
            }
        }
    }

    #[test]
    fn underdamped_peak_sits_at_nearest_grid_point() {
        for c in [3.0, 7.0, 15.0, 24.0, 33.0, 38.0] {
            let params = ModalParams::from_mapped(&[c], &[0.05], &[1.0]);
            let mut g = Graph::new();
            let (cc, z, gn) = params.mapped(&mut g).unwrap();
            let bank = build_kernels(&mut g, &cc, &z, &gn, KERNEL_EPS).unwrap();
            let argmax = bank
                .k
                .data()
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(i, _)| i + 1)
                .unwrap();
            assert_eq!(argmax, c.round() as usize, "center {}", c);
        }
    }

    #[test]
    fn coupling_identity_diag_and_rank_one() {
        let mut g = Graph::new();
        let bank = CouplingBank {
            d: Tensor::filled(vec![1, 4], 1.0),
            u: Tensor::zeros(vec![1, 4, 2]),
            v: Tensor::zeros(vec![1, 4, 2]),
        };
        let w = build_coupling(&mut g, &bank, false).unwrap();
        let eye = [1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0];
        assert_eq!(w[0].data(), &eye);

        let bank = CouplingBank {
            d: Tensor::new(vec![1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
            u: Tensor::zeros(vec![1, 4, 2]),
            v: Tensor::zeros(vec![1, 4, 2]),
        };
        let w = build_coupling(&mut g, &bank, false).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let expect = if i == j { (i + 1) as f64 } else { 0.0 };
                assert_eq!(w[0].data()[i * 4 + j], expect);
            }
        }

        let uvec = [1.0, 2.0, -1.0, 0.5];
        let wvec = [0.25, -2.0, 1.0, 3.0];
        let mut u = vec![0.0; 8];
        let mut v = vec![0.0; 8];
        for i in 0..4 {
            u[i * 2] = uvec[i];
            v[i * 2] = wvec[i];
        }
        let bank = CouplingBank {
            d: Tensor::zeros(vec![1, 4]),
            u: Tensor::new(vec![1, 4, 2], u).unwrap(),
            v: Tensor::new(vec![1, 4, 2], v).unwrap(),
        };
        let w = build_coupling(&mut g, &bank, false).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                assert!((w[0].data()[i * 4 + j] - uvec[i] * wvec[j]).abs() < 1e-15);
            }
        }
    }

    /// All 3x3 minors of a 4x4 matrix; rank <= 2 iff they all vanish.
    fn max_minor_3x3(w: &[f64]) -> f64 {
        let det3 = |r: [usize; 3], c: [usize; 3]| -> f64 {
            let a = |i: usize, j: usize| w[r[i] * 4 + c[j]];
            a(0, 0) * (a(1, 1) * a(2, 2) - a(1, 2) * a(2, 1))
                - a(0, 1) * (a(1, 0) * a(2, 2) - a(1, 2) * a(2, 0))
                + a(0, 2) * (a(1, 0) * a(2, 1) - a(1, 1) * a(2, 0))
        };
        let combos = [[0, 1, 2], [0, 1, 3], [0, 2, 3], [1, 2, 3]];
        let mut worst = 0.0f64;
        for r in combos {
            for c in combos {
                worst = worst.max(det3(r, c).abs());
            }
        }
        worst
    }

    #[test]
    fn coupling_minus_diag_has_rank_at_most_r() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut bank = CouplingBank::init(N_MODES, &mut rng);
        // Inflate the factors so rank deficiency is non-trivial numerically.
        bank.u.map_values(|v| *v *= 100.0);
        bank.v.map_values(|v| *v *= 100.0);
        let mut g = Graph::new();
        let w = build_coupling(&mut g, &bank, false).unwrap();
        for (m, w_m) in w.iter().enumerate() {
            let mut low_rank = w_m.data().to_vec();
            for i in 0..4 {
                low_rank[i * 4 + i] -= bank.d.data()[m * 4 + i];
            }
            assert!(max_minor_3x3(&low_rank) < 1e-10, "mode {} exceeds rank {}", m, COUPLING_RANK);
        }
    }

    #[test]
    fn base_response_single_mode_identity_coupling() {
        let params = ModalParams::from_mapped(&[10.0], &[0.2], &[1.5]);
        let bank = CouplingBank {
            d: Tensor::filled(vec![1, 4], 1.0),
            u: Tensor::zeros(vec![1, 4, 2]),
            v: Tensor::zeros(vec![1, 4, 2]),
        };
        let mut g = Graph::new();
        let (c, z, gn) = params.mapped(&mut g).unwrap();
        let kernels = build_kernels(&mut g, &c, &z, &gn, KERNEL_EPS).unwrap();
        let w = build_coupling(&mut g, &bank, false).unwrap();
        let x = Tensor::filled(vec![N_ORDERS, N_CHANNELS], 1.0);
        let out = base_response(&mut g, &x, &kernels, &w).unwrap();
        for k in 0..N_ORDERS {
            for ch in 0..N_CHANNELS {
                let expect = kernels.k.data()[k];
                assert!((out.y_base.data()[k * 4 + ch] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn base_response_doubled_coupling_cancels_half_kernel() {
        // W = 2*I and a kernel value of 0.5 at the probe order leaves the
        // input row unchanged.
        let params = ModalParams::from_mapped(&[10.0], &[0.2], &[1.0]);
        let mut g = Graph::new();
        let (c, z, gn) = params.mapped(&mut g).unwrap();
        let kernels = build_kernels(&mut g, &c, &z, &gn, 0.0).unwrap();
        let (oi, kv) = kernels
            .k
            .data()
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - 0.5).abs().partial_cmp(&(b.1 - 0.5).abs()).unwrap())
            .map(|(i, &v)| (i, v))
            .unwrap();
        let bank = CouplingBank {
            d: Tensor::filled(vec![1, 4], 1.0 / kv),
            u: Tensor::zeros(vec![1, 4, 2]),
            v: Tensor::zeros(vec![1, 4, 2]),
        };
        let w = build_coupling(&mut g, &bank, false).unwrap();
        let mut x = Tensor::zeros(vec![N_ORDERS, N_CHANNELS]);
        {
            let vals = x.values_mut();
            for ch in 0..4 {
                vals[oi * 4 + ch] = (ch + 1) as f64;
            }
        }
        let out = base_response(&mut g, &x, &kernels, &w).unwrap();
        for ch in 0..4 {
            assert!((out.y_base.data()[oi * 4 + ch] - (ch + 1) as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn base_response_is_linear_in_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let params = ModalParams::init(N_MODES);
        let bank = CouplingBank::init(N_MODES, &mut rng);
        let mk = |rng: &mut ChaCha8Rng| {
            let data: Vec<f64> = (0..N_ORDERS * N_CHANNELS).map(|_| rng.gen_range(-3.0..3.0)).collect();
            Tensor::new(vec![N_ORDERS, N_CHANNELS], data).unwrap()
        };
        let x1 = mk(&mut rng);
        let x2 = mk(&mut rng);
        let (a, b) = (1.75, -0.5);
        let run = |x: &Tensor| -> Vec<f64> {
            let mut g = Graph::new();
            let (c, z, gn) = params.mapped(&mut g).unwrap();
            let kernels = build_kernels(&mut g, &c, &z, &gn, KERNEL_EPS).unwrap();
            let w = build_coupling(&mut g, &bank, false).unwrap();
            base_response(&mut g, x, &kernels, &w).unwrap().y_base.data().to_vec()
        };
        let mut combo = x1.detach();
        {
            let vals = combo.values_mut();
            for (i, v) in vals.iter_mut().enumerate() {
                *v = a * x1.data()[i] + b * x2.data()[i];
            }
        }
        let lhs = run(&combo);
        let y1 = run(&x1);
        let y2 = run(&x2);
        for i in 0..lhs.len() {
            let rhs = a * y1[i] + b * y2[i];
            assert!((lhs[i] - rhs).abs() < 1e-9 * rhs.abs().max(1.0), "nonlinear at {}", i);
        }
    }

    #[test]
    fn grad_check_kernels_and_response() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let params = ModalParams::init(4);
        let bank = CouplingBank::init(4, &mut rng);
        let x_data: Vec<f64> = (0..N_ORDERS * N_CHANNELS).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let x = Tensor::new(vec![N_ORDERS, N_CHANNELS], x_data).unwrap();
        let all = vec![
            params.raw_center.clone(),
            params.raw_damp.clone(),
            params.raw_gain.clone(),
            bank.d.clone(),
            bank.u.clone(),
            bank.v.clone(),
        ];
        let err = grad_check(
            |g, ps| {
                let attached = ModalParams {
                    raw_center: ps[0].clone(),
                    raw_damp: ps[1].clone(),
                    raw_gain: ps[2].clone(),
                };
                let (c, z, gn) = attached.mapped(g)?;
                let kernels = build_kernels(g, &c, &z, &gn, KERNEL_EPS)?;
                let bank = CouplingBank { d: ps[3].clone(), u: ps[4].clone(), v: ps[5].clone() };
                let w = build_coupling(g, &bank, false)?;
                let out = base_response(g, &x, &kernels, &w)?;
                Ok(g.sum_all(&out.y_base)?)
            },
            &all,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "FD error {}", err);
    }
}
