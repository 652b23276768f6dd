//! Adaptive-moment parameter updates.

use crate::error::{contract, Result};
use crate::tensor::Tensor;

/// Per-parameter moment accumulators plus the shared step counter and
/// hyperparameters for one optimizer instance.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step: u64,
    first_moment: Vec<Tensor>,
    second_moment: Vec<Tensor>,
}

impl OptimizerState {
    /// Fresh state with zeroed moments matching the given parameter shapes.
    pub fn new(learning_rate: f64, params: &[&Tensor]) -> Self {
        OptimizerState {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            first_moment: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            second_moment: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }

    pub fn num_params(&self) -> usize {
        self.first_moment.len()
    }
}

/// One Adam step with bias correction, applied in place.
///
/// Gradient order must match the parameter order the state was built with.
pub fn adam_step(
    params: &mut [&mut Tensor],
    grads: &[&Tensor],
    state: &mut OptimizerState,
) -> Result<()> {
    if params.len() != state.num_params() || grads.len() != params.len() {
        return Err(contract(format!(
            "adam_step: {} params, {} grads, state built for {}",
            params.len(),
            grads.len(),
            state.num_params()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads.iter()).enumerate() {
        if p.shape() != g.shape() {
            return Err(contract(format!(
                "adam_step: param {i} shape {:?} vs grad shape {:?}",
                p.shape(),
                g.shape()
            )));
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let lr = state.learning_rate;
    let (b1, b2) = (state.beta1, state.beta2);
    let bc1 = 1.0 - b1.powi(t);
    let bc2 = 1.0 - b2.powi(t);

    for (i, (p, g)) in params.iter_mut().zip(grads.iter()).enumerate() {
        let m = state.first_moment[i].data_mut();
        let v = state.second_moment[i].data_mut();
        let pd = p.data_mut();
        let gd = g.data();
        for j in 0..pd.len() {
            m[j] = b1 * m[j] + (1.0 - b1) * gd[j];
            v[j] = b2 * v[j] + (1.0 - b2) * gd[j] * gd[j];
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            pd[j] -= lr * m_hat / (v_hat.sqrt() + state.epsilon);
        }
    }
    Ok(())
}
