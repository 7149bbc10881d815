//! Adam optimizer with bias correction.

use std::collections::BTreeMap;

use crate::nn::params::ModelParams;
use crate::nn::tensor::Tensor;
use crate::nn::NnError;

#[derive(Debug, Clone)]
pub struct OptState {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step: u64,
    first_moment: BTreeMap<String, Tensor>,
    second_moment: BTreeMap<String, Tensor>,
}

impl OptState {
    pub fn new(params: &ModelParams, learning_rate: f64) -> OptState {
        let zeros = |p: &ModelParams| {
            p.iter()
                .map(|(n, t)| (n.clone(), Tensor::zeros(t.shape().to_vec())))
                .collect()
        };
        OptState {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            first_moment: zeros(params),
            second_moment: zeros(params),
        }
    }
}

/// One Adam update over every parameter, in sorted-name order.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &BTreeMap<String, Tensor>,
    state: &mut OptState,
) -> Result<(), NnError> {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    for (name, p) in params.iter_mut() {
        let g = grads
            .get(name)
            .ok_or_else(|| NnError::UnknownParam(name.clone()))?;
        if g.shape() != p.shape() {
            return Err(NnError::ShapeMismatch {
                context: format!("gradient for '{name}'"),
                expected: p.len(),
                got: g.len(),
            });
        }
        let m = state.first_moment.get_mut(name).unwrap().data_mut();
        let v = state.second_moment.get_mut(name).unwrap().data_mut();
        for ((pv, &gv), (mv, vv)) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.iter_mut().zip(v.iter_mut()))
        {
            *mv = state.beta1 * *mv + (1.0 - state.beta1) * gv;
            *vv = state.beta2 * *vv + (1.0 - state.beta2) * gv * gv;
            let m_hat = *mv / bc1;
            let v_hat = *vv / bc2;
            *pv -= state.learning_rate * m_hat / (v_hat.sqrt() + state.epsilon);
        }
    }
    Ok(())
}
