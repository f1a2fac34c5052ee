//! Adam with bias correction. State is stored f32 next to the parameters it
//! updates; the per-element update itself runs in f64.

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment buffers plus the shared step counter for one
/// parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<f32>,
    v: Vec<f32>,
    t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn t(&self) -> u64 {
        self.t
    }
}

/// One Adam update: moments decay toward the gradient, bias-corrected
/// estimates drive the parameter step.
pub fn adam_step(
    cfg: &AdamConfig,
    state: &mut AdamState,
    params: &mut [f32],
    grads: &[f32],
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Dimension(format!(
            "adam: {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for i in 0..params.len() {
        let g = grads[i] as f64;
        let m = cfg.beta1 * state.m[i] as f64 + (1.0 - cfg.beta1) * g;
        let v = cfg.beta2 * state.v[i] as f64 + (1.0 - cfg.beta2) * g * g;
        state.m[i] = m as f32;
        state.v[i] = v as f32;
        let m_hat = m / bc1;
        let v_hat = v / bc2;
        params[i] = (params[i] as f64 - cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps)) as f32;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let cfg = AdamConfig::default();
        let mut state = AdamState::new(3);
        let mut params = vec![0.5f32, -1.0, 2.0];
        let before = params.clone();
        adam_step(&cfg, &mut state, &mut params, &[0.0; 3]).unwrap();
        assert_eq!(params, before);
        assert_eq!(state.t(), 1);
    }

    #[test]
    fn first_step_moves_by_about_lr() {
        // Hand evaluation of the recurrences at t=1, g=1:
        //   m=0.1, v=0.001, m_hat=1, v_hat=1 => delta = lr/(1+eps) ~ lr.
        let cfg = AdamConfig::default();
        let mut state = AdamState::new(1);
        let mut params = vec![0.0f32];
        adam_step(&cfg, &mut state, &mut params, &[1.0]).unwrap();
        assert!((params[0] as f64 + 1e-4).abs() < 1e-10, "{}", params[0]);
    }

    #[test]
    fn constant_gradient_shrinks_parameter_monotonically() {
        // Scalar simulation: positive gradient must keep pushing the
        // parameter down on every step.
        let cfg = AdamConfig::default();
        let mut state = AdamState::new(1);
        let mut params = vec![0.3f32];
        let mut last = params[0];
        for _ in 0..5 {
            adam_step(&cfg, &mut state, &mut params, &[0.7]).unwrap();
            assert!(params[0] < last);
            last = params[0];
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        let cfg = AdamConfig::default();
        let mut state = AdamState::new(2);
        let mut params = vec![0.0f32; 2];
        assert!(matches!(
            adam_step(&cfg, &mut state, &mut params, &[1.0]),
            Err(Error::Dimension(_))
        ));
    }
}
