use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Bias-corrected Adam moments for an ordered list of parameters.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    first_moment: Vec<Tensor>,
    second_moment: Vec<Tensor>,
    step_count: u64,
}

impl AdamState {
    /// Zero moments shaped like `params`.
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>, config: AdamConfig) -> Self {
        let first_moment: Vec<Tensor> = params
            .into_iter()
            .map(|p| Tensor::zeros(p.rows(), p.cols()))
            .collect();
        Self {
            config,
            second_moment: first_moment.clone(),
            first_moment,
            step_count: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// One Adam update. `grads[i]` must be the gradient of `params[i]`;
    /// the gradients are consumed.
    pub fn step(
        &mut self,
        params: &mut [&mut Tensor],
        grads: Vec<Option<Tensor>>,
        lr: f64,
    ) -> Result<()> {
        if params.len() != self.first_moment.len() || grads.len() != params.len() {
            return Err(Error::Contract(format!(
                "adam: {} params, {} grads, state for {}",
                params.len(),
                grads.len(),
                self.first_moment.len()
            )));
        }
        let mut checked = Vec::with_capacity(grads.len());
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            let g =
                g.ok_or_else(|| Error::Contract(format!("adam: parameter {i} has no gradient")))?;
            if g.shape() != p.shape() || self.first_moment[i].shape() != p.shape() {
                return Err(Error::dim(
                    "adam_step",
                    format!("param {i}: {:?}, grad {:?}", p.shape(), g.shape()),
                ));
            }
            checked.push(g);
        }

        self.step_count += 1;
        let AdamConfig {
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let t = self.step_count as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for (i, g) in checked.iter().enumerate() {
            let m = self.first_moment[i].data_mut();
            let v = self.second_moment[i].data_mut();
            let p = params[i].data_mut();
            for j in 0..p.len() {
                let gj = g.data()[j];
                m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                p[j] -= lr * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_fixed_point() {
        let mut p = Tensor::from_rows(&[[1.0, -3.0]]);
        let before = p.clone();
        let mut adam = AdamState::new([&p], AdamConfig::default());
        adam.step(&mut [&mut p], vec![Some(Tensor::zeros(1, 2))], 0.1)
            .unwrap();
        assert_eq!(p, before);
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn zero_learning_rate_is_null_step() {
        let mut p = Tensor::from_rows(&[[0.5]]);
        let mut adam = AdamState::new([&p], AdamConfig::default());
        adam.step(&mut [&mut p], vec![Some(Tensor::scalar(3.0))], 0.0)
            .unwrap();
        assert_eq!(p.item(), 0.5);
    }

    #[test]
    fn first_step_magnitude_is_lr() {
        // m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps).
        let mut p = Tensor::scalar(0.0);
        let mut adam = AdamState::new([&p], AdamConfig::default());
        adam.step(&mut [&mut p], vec![Some(Tensor::scalar(1.0))], 0.1)
            .unwrap();
        let expected = -0.1 * 1.0 / (1.0 + 1e-8);
        assert!((p.item() - expected).abs() < 1e-15);
        assert!((p.item() + 0.1).abs() < 1e-8);
    }

    #[test]
    fn missing_gradient_is_contract_error() {
        let mut p = Tensor::scalar(0.0);
        let mut adam = AdamState::new([&p], AdamConfig::default());
        let err = adam.step(&mut [&mut p], vec![None], 0.1).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
        assert_eq!(adam.step_count(), 0);
    }
}
