use alloc::vec;
use alloc::vec::Vec;

use super::{NetError, ParamStore};
use crate::math;

/// Bias-corrected Adam moments for every parameter of a store.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        AdamState {
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: store.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: store.iter().map(|p| vec![0.0; p.numel()]).collect(),
        }
    }
}

/// Apply one update from the accumulated gradients, then zero them.
pub fn adam_step(store: &mut ParamStore, state: &mut AdamState) -> Result<(), NetError> {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - libm::pow(state.beta1, t as f64);
    let bc2 = 1.0 - libm::pow(state.beta2, t as f64);
    let (b1, b2, lr, eps) = (state.beta1, state.beta2, state.lr, state.eps);
    for ((p, m), v) in store.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        for k in 0..p.values.len() {
            let g = p.grad[k];
            m[k] = b1 * m[k] + (1.0 - b1) * g;
            v[k] = b2 * v[k] + (1.0 - b2) * g * g;
            let m_hat = m[k] / bc1;
            let v_hat = v[k] / bc2;
            p.values[k] -= lr * m_hat / (math::sqrt(v_hat) + eps);
            p.grad[k] = 0.0;
        }
        if p.values.iter().any(|x| !x.is_finite()) {
            return Err(NetError::TrainingDiverged(p.name.clone()));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netcore::{rng, Init};

    fn scalar_store(w: f64) -> (ParamStore, super::super::ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("w", &[1], Init::Constant(w), &mut rng(0));
        (s, id)
    }

    #[test]
    fn zero_gradient_is_noop() {
        let (mut s, id) = scalar_store(0.7);
        let mut st = AdamState::new(&s, 0.1);
        adam_step(&mut s, &mut st).unwrap();
        assert_eq!(s.values(id), [0.7]);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let (mut s, id) = scalar_store(0.0);
        let mut st = AdamState::new(&s, 0.01);
        s.get_mut(id).grad[0] = 1.0;
        adam_step(&mut s, &mut st).unwrap();
        // m_hat = v_hat = 1 after bias correction.
        assert!((s.values(id)[0] + 0.01 / (1.0 + 1e-8)).abs() < 1e-15);
        assert_eq!(s.get(id).grad[0], 0.0);
    }

    #[test]
    fn quadratic_descent() {
        // Scalar simulation of f(w) = w^2 from w = 1 with lr = 0.1: |w| shrinks every step.
        let (mut s, id) = scalar_store(1.0);
        let mut st = AdamState::new(&s, 0.1);
        let mut prev = 1.0f64;
        for _ in 0..10 {
            let w = s.values(id)[0];
            s.get_mut(id).grad[0] = 2.0 * w;
            adam_step(&mut s, &mut st).unwrap();
            let now = s.values(id)[0].abs();
            assert!(now < prev, "{now} >= {prev}");
            prev = now;
        }
    }

    #[test]
    fn non_finite_update_diverges() {
        let (mut s, id) = scalar_store(0.0);
        let mut st = AdamState::new(&s, 0.1);
        s.get_mut(id).grad[0] = f64::NAN;
        assert!(matches!(adam_step(&mut s, &mut st), Err(NetError::TrainingDiverged(_))));
    }
}
