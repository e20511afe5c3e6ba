//! Adam optimizer over flat parameter vectors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{Gradients, Network};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl AdamState {
    pub fn new(param_count: usize) -> Self {
        AdamState {
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    fn advance(&mut self) -> (f64, f64) {
        self.step += 1;
        let t = self.step as i32;
        (
            1.0 - self.beta1.powi(t),
            1.0 - self.beta2.powi(t),
        )
    }

    fn update_scalar(&mut self, i: usize, g: f64, lr: f64, bc1: f64, bc2: f64, p: &mut f64) {
        self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
        self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
        let m_hat = self.m[i] / bc1;
        let v_hat = self.v[i] / bc2;
        *p -= lr * m_hat / (v_hat.sqrt() + self.eps);
    }
}

/// One Adam step on a network. Errors if shapes disagree, if the gradient is
/// non-finite, or if the update would produce non-finite parameters.
pub fn adam_step(net: &mut Network, grads: &Gradients, state: &mut AdamState, lr: f64) -> Result<()> {
    if state.m.len() != net.param_count() {
        return Err(Error::Shape(format!(
            "optimizer state holds {} parameters, network has {}",
            state.m.len(),
            net.param_count()
        )));
    }
    if !lr.is_finite() || lr < 0.0 {
        return Err(Error::InvalidArgument(format!("learning rate {lr}")));
    }
    grads.check_finite()?;
    let flat: Vec<f64> = grads.flat_iter().copied().collect();
    if flat.len() != state.m.len() {
        return Err(Error::Shape("gradient shape does not match network".into()));
    }
    let (bc1, bc2) = state.advance();
    for (i, p) in net.params_mut().enumerate() {
        state.update_scalar(i, flat[i], lr, bc1, bc2, p);
    }
    net.check_finite()
}

/// Adam over a bare parameter slice (used for the Gaussian head's log-std).
pub fn adam_step_slice(params: &mut [f64], grads: &[f64], state: &mut AdamState, lr: f64) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Shape(format!(
            "adam slice shapes: params {}, grads {}, state {}",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("gradients".into()));
    }
    let (bc1, bc2) = state.advance();
    for (i, p) in params.iter_mut().enumerate() {
        state.update_scalar(i, grads[i], lr, bc1, bc2, p);
    }
    if params.iter().any(|p| !p.is_finite()) {
        return Err(Error::NonFinite("parameters after adam step".into()));
    }
    Ok(())
}
