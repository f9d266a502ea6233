//! Adam with bias correction and L2 weight decay folded into the gradient.

use super::{ParamSet, Scalar, TensorError};

#[derive(Clone, Copy, Debug)]
pub struct AdamConfig<F> {
    pub lr: F,
    pub beta1: F,
    pub beta2: F,
    pub eps: F,
    pub weight_decay: F,
}

impl<F: Scalar> AdamConfig<F> {
    pub fn with_lr(lr: F) -> Self {
        AdamConfig {
            lr,
            beta1: F::from_f64(0.9),
            beta2: F::from_f64(0.999),
            eps: F::from_f64(1e-8),
            weight_decay: F::zero(),
        }
    }

    pub fn validate(&self) -> Result<(), TensorError> {
        if self.lr <= F::zero() {
            return Err(TensorError::Config(format!("learning rate must be > 0, got {}", self.lr)));
        }
        Ok(())
    }
}

/// First/second moment buffers and the step counter for one parameter tensor.
#[derive(Clone, Debug)]
pub struct AdamState<F> {
    pub m: Vec<F>,
    pub v: Vec<F>,
    pub step: u64,
}

impl<F: Scalar> AdamState<F> {
    pub fn zeros(len: usize) -> Self {
        AdamState { m: vec![F::zero(); len], v: vec![F::zero(); len], step: 0 }
    }
}

/// One Adam update for a single parameter buffer.
///
/// `weight_decay` is applied as an L2 term added to the gradient, so a decay
/// of `wd` is equivalent to an explicit `wd/2 * ||p||^2` loss term.
pub fn adam_step<F: Scalar>(
    param: &mut [F],
    grad: &[F],
    state: &mut AdamState<F>,
    cfg: &AdamConfig<F>,
) -> Result<(), TensorError> {
    cfg.validate()?;
    if param.len() != grad.len() || state.m.len() != param.len() || state.v.len() != param.len() {
        return Err(TensorError::Dimension {
            op: "adam_step",
            detail: format!("param {} grad {} state {}", param.len(), grad.len(), state.m.len()),
        });
    }
    state.step += 1;
    let t = state.step;
    let b1 = cfg.beta1;
    let b2 = cfg.beta2;
    let bc1 = F::one() - b1.powi(t as i32);
    let bc2 = F::one() - b2.powi(t as i32);
    for i in 0..param.len() {
        let g = grad[i] + cfg.weight_decay * param[i];
        state.m[i] = b1 * state.m[i] + (F::one() - b1) * g;
        state.v[i] = b2 * state.v[i] + (F::one() - b2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        param[i] = param[i] - cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok(())
}

/// Adam over a whole [`ParamSet`], keeping one state per parameter tensor.
#[derive(Debug)]
pub struct Adam<F> {
    pub cfg: AdamConfig<F>,
    states: Vec<Option<AdamState<F>>>,
}

impl<F: Scalar> Adam<F> {
    pub fn new(cfg: AdamConfig<F>) -> Result<Self, TensorError> {
        cfg.validate()?;
        Ok(Adam { cfg, states: Vec::new() })
    }

    /// Update every trainable parameter that received a gradient. `grads`
    /// lines up with `params.params` by index.
    pub fn step(&mut self, params: &mut ParamSet<F>, grads: &[Option<Vec<F>>]) -> Result<(), TensorError> {
        if self.states.len() < params.params.len() {
            self.states.resize_with(params.params.len(), || None);
        }
        for (idx, p) in params.params.iter_mut().enumerate() {
            let Some(g) = grads.get(idx).and_then(|g| g.as_ref()) else { continue };
            if !p.trainable {
                continue;
            }
            let state = self.states[idx].get_or_insert_with(|| AdamState::zeros(p.data.len()));
            adam_step(&mut p.data, g, state, &self.cfg)?;
        }
        Ok(())
    }
}
