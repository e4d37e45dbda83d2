use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)] // inherent float methods shadow these when std is linked
use num_traits::Float;

use crate::error::{dim_err, Error, Result};
use crate::params::ParamStore;
use crate::scalar::Real;

/// Moment estimates for Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<R> {
    first: Vec<Vec<R>>,
    second: Vec<Vec<R>>,
    step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<R: Real> AdamState<R> {
    /// Zeroed moments matching `params`, with β1=0.9, β2=0.98, ε=1e-9.
    pub fn new(params: &ParamStore<R>) -> Self {
        Self::with_constants(params, 0.9, 0.98, 1e-9)
    }

    pub fn with_constants(params: &ParamStore<R>, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Vec<R>> = params
            .iter()
            .map(|(_, t)| vec![R::zero(); t.len()])
            .collect();
        Self {
            second: zeros.clone(),
            first: zeros,
            step: 0,
            beta1,
            beta2,
            eps,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// One Adam update of every parameter from its accumulated gradient slot.
/// Parameters without a gradient are treated as having a zero gradient.
pub fn adam_step<R: Real>(
    params: &mut ParamStore<R>,
    state: &mut AdamState<R>,
    lr: f64,
) -> Result<()> {
    if lr <= 0.0 || !lr.is_finite() {
        return Err(Error::Usage(alloc::format!(
            "learning rate must be positive, got {lr}"
        )));
    }
    if state.first.len() != params.len() {
        return Err(dim_err!(
            "optimizer tracks {} tensors, model has {}",
            state.first.len(),
            params.len()
        ));
    }
    for ((t, m), v) in params.tensors_mut().zip(&state.first).zip(&state.second) {
        if m.len() != t.len() || v.len() != t.len() {
            return Err(dim_err!("moment of {} for tensor of {}", m.len(), t.len()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let (b1r, b2r) = (R::from_f64(b1), R::from_f64(b2));
    let (one_b1, one_b2) = (R::from_f64(1.0 - b1), R::from_f64(1.0 - b2));
    let (c1, c2) = (R::from_f64(c1), R::from_f64(c2));
    let lr = R::from_f64(lr);
    let eps = R::from_f64(state.eps);
    for ((tensor, m), v) in params
        .tensors_mut()
        .zip(state.first.iter_mut())
        .zip(state.second.iter_mut())
    {
        let Some(g) = tensor.take_grad() else {
            // zero gradient: moments decay, parameters still move by momentum
            for (i, p) in tensor.data_mut().iter_mut().enumerate() {
                m[i] *= b1r;
                v[i] *= b2r;
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                *p -= lr * mh / (vh.sqrt() + eps);
            }
            continue;
        };
        for (i, p) in tensor.data_mut().iter_mut().enumerate() {
            m[i] = b1r * m[i] + one_b1 * g[i];
            v[i] = b2r * v[i] + one_b2 * g[i] * g[i];
            let mh = m[i] / c1;
            let vh = v[i] / c2;
            *p -= lr * mh / (vh.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn scalar_store(x: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.push("x", Tensor::new(vec![1], vec![x]).unwrap());
        s
    }

    #[test]
    fn zero_gradient_is_identity_from_rest() {
        let mut s = ParamStore::<f64>::new();
        s.push(
            "w",
            Tensor::new(vec![2, 2], vec![1.0, -2.0, 3.0, 0.5]).unwrap(),
        );
        let before = s.clone();
        let mut st = AdamState::new(&s);
        for _ in 0..5 {
            let id = s.find("w").unwrap();
            s.get_mut(id).accumulate_grad(&[0.0; 4]).unwrap();
            adam_step(&mut s, &mut st, 0.1).unwrap();
        }
        assert_eq!(s, before);
        assert_eq!(st.step(), 5);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut s = scalar_store(0.0);
        let mut st = AdamState::new(&s);
        let id = s.find("x").unwrap();
        s.get_mut(id).accumulate_grad(&[1.0]).unwrap();
        adam_step(&mut s, &mut st, 0.01).unwrap();
        let x = s.get(id).data()[0];
        assert!((x + 0.01).abs() < 1e-9, "{x}");
    }

    #[test]
    fn minimizes_a_parabola() {
        let mut s = scalar_store(3.0);
        let mut st = AdamState::new(&s);
        let id = s.find("x").unwrap();
        let mut steps = 0;
        while s.get(id).data()[0].abs() > 1e-2 {
            let x = s.get(id).data()[0];
            s.get_mut(id).accumulate_grad(&[2.0 * x]).unwrap();
            adam_step(&mut s, &mut st, 0.1).unwrap();
            steps += 1;
            assert!(steps <= 200, "not converged after 200 steps: x = {x}");
        }
    }

    #[test]
    fn rejects_non_positive_rate_and_mismatch() {
        let mut s = scalar_store(1.0);
        let mut st = AdamState::new(&s);
        assert!(adam_step(&mut s, &mut st, 0.0).is_err());
        let mut other = scalar_store(1.0);
        other.push("y", Tensor::zeros(&[3]));
        assert!(adam_step(&mut other, &mut st, 0.1).is_err());
    }
}
