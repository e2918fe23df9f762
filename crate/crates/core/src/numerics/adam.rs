//! Bias-corrected Adam.

use crate::error::{Error, Result};
use crate::numerics::params::ParamStore;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment buffers and step counter for one parameter vector.
#[derive(Debug, Clone)]
pub struct AdamState<T: Scalar> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub t: u64,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(len: usize, cfg: AdamConfig) -> Self {
        AdamState {
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
            t: 0,
            beta1: T::of(cfg.beta1),
            beta2: T::of(cfg.beta2),
            eps: T::of(cfg.eps),
        }
    }
}

/// One Adam update: `theta <- theta - lr * m_hat / (sqrt(v_hat) + eps)`.
pub fn adam_step<T: Scalar>(
    params: &mut [T],
    grads: &[T],
    state: &mut AdamState<T>,
    lr: T,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::InvalidArgument(format!(
            "adam length mismatch: params {}, grads {}, state {}",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    if lr <= T::zero() {
        return Err(Error::InvalidArgument("learning rate must be positive".into()));
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite {
            context: "adam gradients".into(),
        });
    }
    state.t += 1;
    let one = T::one();
    let t = state.t as i32;
    let bc1 = one - state.beta1.powi(t);
    let bc2 = one - state.beta2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = state.beta1 * state.m[i] + (one - state.beta1) * g;
        state.v[i] = state.beta2 * state.v[i] + (one - state.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] = params[i] - lr * m_hat / (v_hat.sqrt() + state.eps);
    }
    Ok(())
}

/// Adam across every trainable parameter of a store, with per-parameter
/// state aligned by insertion order.
#[derive(Debug)]
pub struct Adam<T: Scalar> {
    cfg: AdamConfig,
    states: Vec<Option<AdamState<T>>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(store: &ParamStore<T>, cfg: AdamConfig) -> Self {
        let states = store
            .iter()
            .map(|e| {
                e.tensor
                    .requires_grad()
                    .then(|| AdamState::new(e.tensor.numel(), cfg))
            })
            .collect();
        Adam { cfg, states }
    }

    pub fn config(&self) -> AdamConfig {
        self.cfg
    }

    /// Apply one step using the gradients currently held in the store.
    pub fn step(&mut self, store: &mut ParamStore<T>, lr: T) -> Result<()> {
        self.step_filtered(store, lr, |_| true)
    }

    /// Step only the parameters whose name matches; the others keep both
    /// their values and their moment state (used by alternating GAN
    /// phases).
    pub fn step_filtered(
        &mut self,
        store: &mut ParamStore<T>,
        lr: T,
        select: impl Fn(&str) -> bool,
    ) -> Result<()> {
        for (entry, state) in store.iter_mut().zip(&mut self.states) {
            let Some(state) = state else { continue };
            if !select(&entry.name) {
                continue;
            }
            let t = &mut entry.tensor;
            if t.grad().is_none() {
                // parameter never touched by a backward pass; treat as zero
                continue;
            }
            let grads = t.grad().unwrap().to_vec();
            adam_step(t.data_mut(), &grads, state, lr)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_grads_leave_params_unchanged() {
        let mut p = vec![1.0f64, -2.0, 0.5];
        let g = vec![0.0f64; 3];
        let mut st = AdamState::new(3, AdamConfig::default());
        adam_step(&mut p, &g, &mut st, 0.1).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 0.5]);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn first_step_matches_hand_computation() {
        // theta=0, g=1, lr=0.1: m_hat = v_hat = 1, step = -0.1/(1+eps)
        let mut p = vec![0.0f64];
        let g = vec![1.0f64];
        let mut st = AdamState::new(1, AdamConfig::default());
        adam_step(&mut p, &g, &mut st, 0.1).unwrap();
        assert!((p[0] + 0.1).abs() < 1e-7, "{}", p[0]);
    }

    #[test]
    fn length_mismatch_rejected() {
        let mut p = vec![0.0f64; 2];
        let g = vec![1.0f64; 3];
        let mut st = AdamState::new(2, AdamConfig::default());
        assert!(adam_step(&mut p, &g, &mut st, 0.1).is_err());
    }

    #[test]
    fn non_finite_grads_rejected() {
        let mut p = vec![0.0f64];
        let g = vec![f64::NAN];
        let mut st = AdamState::new(1, AdamConfig::default());
        assert!(adam_step(&mut p, &g, &mut st, 0.1).is_err());
    }
}
