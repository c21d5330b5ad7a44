//! Adam optimizer with bias correction.

use crate::error::{Error, Result};
use crate::tape::ParamSet;
use crate::tensor::Tensor;

/// Optimizer state; moment buffers are keyed by parameter order.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_stability: f64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &ParamSet, lr: f64) -> Self {
        Self::with_betas(params, lr, 0.9, 0.999, 1e-8)
    }

    pub fn with_betas(
        params: &ParamSet,
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps_stability: f64,
    ) -> Self {
        let m = params
            .iter()
            .map(|(_, p)| Tensor::zeros(p.value.shape().to_vec()))
            .collect::<Vec<_>>();
        let v = m.clone();
        AdamState { step: 0, lr, beta1, beta2, eps_stability, m, v }
    }

    /// One bias-corrected Adam update from the gradients stored in `params`.
    ///
    /// Errors if any parameter is missing a gradient.
    pub fn step(&mut self, params: &mut ParamSet) -> Result<()> {
        for (id, p) in params.iter() {
            if p.grad.is_none() {
                return Err(Error::contract(format!(
                    "adam_step: parameter {:?} has no gradient (index {:?})",
                    p.name, id
                )));
            }
        }
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        for (i, (_, p)) in params.iter_mut().enumerate() {
            let g = p.grad.as_ref().expect("checked above");
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let w = p.value.data_mut();
            for j in 0..w.len() {
                let gj = g.data()[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                w[j] -= self.lr * m_hat / (v_hat.sqrt() + self.eps_stability);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::ParamSet;

    fn single_param(value: f64) -> (ParamSet, crate::tape::ParamId) {
        let mut params = ParamSet::new();
        let id = params.add("w", Tensor::scalar(value));
        (params, id)
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        // With bias correction the first update is exactly lr * sign(g)
        // when eps is negligible.
        let (mut params, id) = single_param(1.0);
        params.get_mut(id).grad = Some(Tensor::scalar(0.37));
        let mut adam = AdamState::with_betas(&params, 1e-3, 0.9, 0.999, 1e-12);
        adam.step(&mut params).unwrap();
        let moved = params.value(id).item() - 1.0;
        assert!((moved + 1e-3).abs() < 1e-9, "moved {moved}");
    }

    #[test]
    fn zero_grad_leaves_param_unchanged() {
        let (mut params, id) = single_param(2.5);
        params.get_mut(id).grad = Some(Tensor::scalar(0.0));
        let mut adam = AdamState::new(&params, 1e-3);
        adam.step(&mut params).unwrap();
        assert_eq!(params.value(id).item(), 2.5);
    }

    #[test]
    fn missing_grad_is_contract_error() {
        let (mut params, _) = single_param(1.0);
        let mut adam = AdamState::new(&params, 1e-3);
        assert!(adam.step(&mut params).is_err());
    }

    #[test]
    fn two_steps_match_hand_evaluated_recurrence() {
        // Constant gradient g = 2, lr = 0.1, betas (0.9, 0.999), eps = 1e-8.
        // Step 1: m=0.2, v=0.004, m_hat=2, v_hat=4, dw = 0.1*2/(2+1e-8).
        // Step 2: m=0.38, v=0.007996, m_hat=0.38/0.19=2,
        //         v_hat=0.007996/0.001999=4, dw identical.
        let (mut params, id) = single_param(0.0);
        let mut adam = AdamState::with_betas(&params, 0.1, 0.9, 0.999, 1e-8);
        let mut expected = 0.0;
        for _ in 0..2 {
            params.get_mut(id).grad = Some(Tensor::scalar(2.0));
            adam.step(&mut params).unwrap();
            params.zero_grads();
            expected -= 0.1 * 2.0 / (4.0_f64.sqrt() + 1e-8);
        }
        assert!((params.value(id).item() - expected).abs() < 1e-12);
    }
}
