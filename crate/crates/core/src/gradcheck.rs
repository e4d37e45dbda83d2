//! Central finite-difference oracle for analytic gradients.

use alloc::vec::Vec;

#[allow(unused_imports)] // inherent float methods shadow these when std is linked
use num_traits::Float;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-5;

/// Reduces a node to a scalar with fixed, non-uniform weights, so that
/// outputs with constant sums (softmax rows) still carry gradient signal.
pub fn probe_scalar(g: &mut Graph<'_, f64>, out: Var) -> Result<Var> {
    let (r, c) = g.dims(out);
    let w = (0..r * c)
        .map(|i| ((i as f64) * 1.37 + 0.41).sin() + 0.25)
        .collect();
    let w = g.constant(r, c, w)?;
    let p = g.mul(out, w)?;
    Ok(g.sum(p))
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1.0)
}

fn eval_scalar<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t)).collect();
    let out = f(&mut g, &vars)?;
    let loss = probe_scalar(&mut g, out)?;
    Ok(g.scalar_value(loss))
}

/// Max relative error `|analytic − numeric| / max(1, |numeric|)` over every
/// element of every input. `op` may return a node of any shape.
pub fn grad_check<F>(op: F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| g.input(&t.clone().with_requires_grad(true)))
        .collect();
    let out = op(&mut g, &vars)?;
    let loss = probe_scalar(&mut g, out)?;
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            g.grad(v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| alloc::vec![0.0; t.len()])
        })
        .collect();
    drop(g);

    let mut worst = 0.0f64;
    let mut probe = inputs.to_vec();
    for k in 0..inputs.len() {
        #[allow(clippy::needless_range_loop)]
        for e in 0..inputs[k].len() {
            let x0 = inputs[k].data()[e];
            probe[k].data_mut()[e] = x0 + FD_STEP;
            let plus = eval_scalar(&op, &probe)?;
            probe[k].data_mut()[e] = x0 - FD_STEP;
            let minus = eval_scalar(&op, &probe)?;
            probe[k].data_mut()[e] = x0;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic[k][e], numeric));
        }
    }
    Ok(worst)
}

/// Same check w.r.t. model parameters. `loss` builds a scalar (or any node,
/// reduced by [`probe_scalar`]) from a graph over the store. At most
/// `max_per_tensor` evenly spaced elements of each tensor are probed.
pub fn grad_check_params<F>(store: &ParamStore<f64>, loss: F, max_per_tensor: usize) -> Result<f64>
where
    F: Fn(&mut Graph<'_, f64>) -> Result<Var>,
{
    let analytic = {
        let mut g = Graph::training(store);
        let out = loss(&mut g)?;
        let l = probe_scalar(&mut g, out)?;
        g.backward(l)?;
        let mut per: Vec<Option<Vec<f64>>> = alloc::vec![None; store.len()];
        for (id, grad) in g.param_grads() {
            per[id.index()] = Some(grad);
        }
        per
    };
    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::inference(s);
        let out = loss(&mut g)?;
        let l = probe_scalar(&mut g, out)?;
        Ok(g.scalar_value(l))
    };

    let mut worst = 0.0f64;
    let mut probe = store.clone();
    for id in store.ids() {
        let n = store.get(id).len();
        let stride = n.div_ceil(max_per_tensor.max(1)).max(1);
        for e in (0..n).step_by(stride) {
            let x0 = store.get(id).data()[e];
            probe.get_mut(id).data_mut()[e] = x0 + FD_STEP;
            let plus = eval(&probe)?;
            probe.get_mut(id).data_mut()[e] = x0 - FD_STEP;
            let minus = eval(&probe)?;
            probe.get_mut(id).data_mut()[e] = x0;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let a = analytic[id.index()].as_ref().map_or(0.0, |g| g[e]);
            worst = worst.max(rel_err(a, numeric));
        }
    }
    Ok(worst)
}
