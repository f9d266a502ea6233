//! Central finite-difference oracle for gradient verification.
//!
//! The oracle only ever calls a loss closure that rebuilds the forward pass
//! from plain buffers, so it stays independent of the backward implementation
//! it is used to check. Meant for `f64`; finite differences in `f32` are not
//! trustworthy at the tolerances used here.

/// Central-difference gradients of `loss` w.r.t. every entry of every buffer
/// in `params`, with step `eps`.
pub fn central_diff<Loss>(mut loss: Loss, params: &[Vec<f64>], eps: f64) -> Vec<Vec<f64>>
where
    Loss: FnMut(&[Vec<f64>]) -> f64,
{
    let mut grads = Vec::with_capacity(params.len());
    for pi in 0..params.len() {
        let mut g = vec![0.0; params[pi].len()];
        for i in 0..params[pi].len() {
            let mut plus = params.to_vec();
            plus[pi][i] += eps;
            let lp = loss(&plus);
            let mut minus = params.to_vec();
            minus[pi][i] -= eps;
            let lm = loss(&minus);
            g[i] = (lp - lm) / (2.0 * eps);
        }
        grads.push(g);
    }
    grads
}

/// max over entries of |a - b| / max(1, |b|).
pub fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / n.abs().max(1.0))
        .fold(0.0, f64::max)
}
