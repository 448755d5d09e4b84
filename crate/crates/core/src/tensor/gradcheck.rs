use super::{Graph, Tensor, Var};
use crate::error::Result;

/// Central-difference estimate of ∇f at `point`.
pub fn central_differences<F>(mut f: F, point: &[f64], eps: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut probe = point.to_vec();
    (0..point.len())
        .map(|i| {
            probe[i] = point[i] + eps;
            let plus = f(&probe);
            probe[i] = point[i] - eps;
            let minus = f(&probe);
            probe[i] = point[i];
            (plus - minus) / (2.0 * eps)
        })
        .collect()
}

/// `max_i |a_i − n_i| / max(|a_i|, |n_i|, 1e-8)`.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-8))
        .fold(0.0, f64::max)
}

/// Compares the tape gradient of `f` against central differences.
///
/// `f` receives a fresh graph and a parameter node holding `params`, and
/// returns the scalar loss node. Returns the maximum relative error over all
/// coordinates.
pub fn grad_check<F>(f: F, params: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let p = g.param(params.clone());
    let loss = f(&mut g, p)?;
    g.backward(loss)?;
    let analytic = g
        .grad(p)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; params.numel()]);

    let shape = params.shape().to_vec();
    let mut failure = None;
    let numeric = central_differences(
        |x| {
            let mut g = Graph::new();
            let p = g.constant(Tensor::new(shape.clone(), x.to_vec()).expect("same shape"));
            match f(&mut g, p) {
                Ok(l) => g.scalar_value(l),
                Err(e) => {
                    failure.get_or_insert(e);
                    f64::NAN
                }
            }
        },
        params.data(),
        eps,
    );
    if let Some(e) = failure {
        return Err(e);
    }
    Ok(max_relative_error(&analytic, &numeric))
}
