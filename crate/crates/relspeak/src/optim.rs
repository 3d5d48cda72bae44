//! Adam with bias correction.

use serde::{Deserialize, Serialize};

use crate::error::{shape_str, Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_LR: f64 = 1e-4;
pub const DEFAULT_BETA1: f64 = 0.9;
pub const DEFAULT_BETA2: f64 = 0.999;
pub const DEFAULT_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl AdamState {
    /// Moment accumulators matching `params` shape for shape.
    pub fn new(params: &[Tensor]) -> Self {
        AdamState {
            m: params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect(),
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }
}

/// One Adam update, in place: p -= lr * m_hat / (sqrt(v_hat) + eps).
pub fn adam_step(
    params: &mut [Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Invalid(format!(
            "adam_step: {} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for ((p, g), (m, v)) in params
        .iter()
        .zip(grads)
        .zip(state.m.iter().zip(&state.v))
    {
        if p.shape() != g.shape() || p.shape() != m.shape() || p.shape() != v.shape() {
            return Err(Error::ShapeMismatch {
                op: "adam_step",
                lhs: shape_str(p.shape()),
                rhs: shape_str(g.shape()),
            });
        }
    }

    state.t += 1;
    let t = state.t as f64;
    let bc1 = 1.0 - beta1.powf(t);
    let bc2 = 1.0 - beta2.powf(t);

    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        let (pd, gd) = (p.data_mut(), g.data());
        let (md, vd) = (m.data_mut(), v.data_mut());
        for i in 0..pd.len() {
            md[i] = beta1 * md[i] + (1.0 - beta1) * gd[i];
            vd[i] = beta2 * vd[i] + (1.0 - beta2) * gd[i] * gd[i];
            let m_hat = md[i] / bc1;
            let v_hat = vd[i] / bc2;
            pd[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_is_signed_lr() {
        // bias-corrected first step with |g| >> eps moves by ~ -lr * sign(g)
        let lr = DEFAULT_LR;
        let mut params = vec![Tensor::vector(vec![1.0, -2.0])];
        let grads = vec![Tensor::vector(vec![3.0, -0.5])];
        let mut st = AdamState::new(&params);
        adam_step(
            &mut params, &grads, &mut st, lr, DEFAULT_BETA1, DEFAULT_BETA2, DEFAULT_EPS,
        )
        .unwrap();
        let got = params[0].data();
        assert!((got[0] - (1.0 - lr)).abs() < lr * 1e-6);
        assert!((got[1] - (-2.0 + lr)).abs() < lr * 1e-6);
        assert_eq!(st.step_count(), 1);
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut params = vec![Tensor::vector(vec![1.5, -0.25])];
        let grads = vec![Tensor::vector(vec![0.0, 0.0])];
        let mut st = AdamState::new(&params);
        adam_step(
            &mut params,
            &grads,
            &mut st,
            DEFAULT_LR,
            DEFAULT_BETA1,
            DEFAULT_BETA2,
            DEFAULT_EPS,
        )
        .unwrap();
        assert_eq!(params[0].data(), &[1.5, -0.25]);
    }

    #[test]
    fn two_steps_match_hand_recurrence() {
        // Hand-rolled two-iteration Adam on a scalar with fixed gradient.
        let (lr, b1, b2, eps): (f64, f64, f64, f64) = (0.1, 0.9, 0.999, 1e-8);
        let g = 2.0;
        let mut x = 1.0;
        let (mut m, mut v) = (0.0, 0.0);
        for t in 1..=2u32 {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let m_hat = m / (1.0 - b1.powi(t as i32));
            let v_hat = v / (1.0 - b2.powi(t as i32));
            x -= lr * m_hat / (v_hat.sqrt() + eps);
        }

        let mut params = vec![Tensor::scalar(1.0)];
        let grads = vec![Tensor::scalar(g)];
        let mut st = AdamState::new(&params);
        adam_step(&mut params, &grads, &mut st, lr, b1, b2, eps).unwrap();
        adam_step(&mut params, &grads, &mut st, lr, b1, b2, eps).unwrap();
        assert!((params[0].item() - x).abs() < 1e-15);
        assert_eq!(st.step_count(), 2);
    }

    #[test]
    fn shape_mismatch_errors() {
        let mut params = vec![Tensor::vector(vec![1.0, 2.0])];
        let grads = vec![Tensor::vector(vec![1.0])];
        let mut st = AdamState::new(&params);
        assert!(adam_step(
            &mut params,
            &grads,
            &mut st,
            DEFAULT_LR,
            DEFAULT_BETA1,
            DEFAULT_BETA2,
            DEFAULT_EPS
        )
        .is_err());
    }
}
