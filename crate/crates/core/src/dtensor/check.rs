//! Central finite-difference gradient verification.

use super::{DtError, Graph, Tensor};

/// Compares reverse-mode gradients of `f` against central finite differences.
///
/// `f` receives a graph plus leaf-registered copies of `params` and must
/// return a scalar. The result is the maximum over all parameter entries of
/// `|analytic - fd| / max(1, |fd|)`; any NaN probe reports as infinity.
pub fn grad_check<F, E>(mut f: F, params: &[Tensor], step: f64) -> Result<f64, E>
where
    F: FnMut(&mut Graph, &[Tensor]) -> Result<Tensor, E>,
    E: From<DtError>,
{
    assert!(step > 0.0, "finite-difference step must be positive");
    let mut graph = Graph::new();
    let leaves: Vec<Tensor> = params.iter().map(|p| graph.leaf(p)).collect();
    let loss = f(&mut graph, &leaves)?;
    let grads = graph.backward(&loss)?;
    let analytic: Vec<Tensor> = leaves.iter().map(|l| grads.get(l)).collect();

    let eval = |params: &[Tensor], f: &mut F| -> Result<f64, E> {
        let mut g = Graph::new();
        let leaves: Vec<Tensor> = params.iter().map(|p| g.leaf(p)).collect();
        Ok(f(&mut g, &leaves)?.item())
    };

    let mut worst = 0.0f64;
    let mut probe: Vec<Tensor> = params.iter().map(Tensor::detach).collect();
    for (pi, param) in params.iter().enumerate() {
        for j in 0..param.numel() {
            let orig = param.data()[j];
            probe[pi].values_mut()[j] = orig + step;
            let up = eval(&probe, &mut f)?;
            probe[pi].values_mut()[j] = orig - step;
            let down = eval(&probe, &mut f)?;
            probe[pi].values_mut()[j] = orig;
            let fd = (up - down) / (2.0 * step);
            let a = analytic[pi].data()[j];
            let rel = if fd.is_nan() || a.is_nan() {
                f64::INFINITY
            } else {
                (a - fd).abs() / fd.abs().max(1.0)
            };
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}
