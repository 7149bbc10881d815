//! Central finite differences, the independent oracle for every analytic
//! gradient in the crate. Only forward evaluations are used here; the
//! reverse-mode path under test contributes nothing to the numeric estimate.

use std::collections::BTreeMap;

use crate::nn::params::ModelParams;
use crate::nn::tensor::Tensor;

/// Default perturbation step.
pub const FD_STEP: f64 = 1e-5;

/// Central-difference gradient of `eval` with respect to every parameter.
pub fn finite_diff_gradients(
    params: &ModelParams,
    step: f64,
    mut eval: impl FnMut(&ModelParams) -> f64,
) -> BTreeMap<String, Tensor> {
    let mut work = params.clone();
    let names: Vec<String> = params.iter().map(|(n, _)| n.clone()).collect();
    let mut out = BTreeMap::new();
    for name in names {
        let n = params.get(&name).unwrap().len();
        let shape = params.get(&name).unwrap().shape().to_vec();
        let mut grad = vec![0.0; n];
        for i in 0..n {
            let orig = work.get(&name).unwrap().data()[i];
            work.get_mut(&name).unwrap().data_mut()[i] = orig + step;
            let f_plus = eval(&work);
            work.get_mut(&name).unwrap().data_mut()[i] = orig - step;
            let f_minus = eval(&work);
            work.get_mut(&name).unwrap().data_mut()[i] = orig;
            grad[i] = (f_plus - f_minus) / (2.0 * step);
        }
        out.insert(name, Tensor::new(shape, grad));
    }
    out
}

/// Largest relative disagreement between two gradient maps. The denominator
/// is floored so near-zero gradients are compared absolutely at that scale.
pub fn max_rel_error(
    analytic: &BTreeMap<String, Tensor>,
    numeric: &BTreeMap<String, Tensor>,
    floor: f64,
) -> f64 {
    let mut worst: f64 = 0.0;
    for (name, a) in analytic {
        let n = &numeric[name];
        for (&av, &nv) in a.data().iter().zip(n.data()) {
            let denom = av.abs().max(nv.abs()).max(floor);
            worst = worst.max((av - nv).abs() / denom);
        }
    }
    worst
}
