use super::{same_shape, Tensor};
use crate::error::{Error, Result};

/// Adam optimizer state for one parameter tensor.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub t: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(n_params: usize, lr: f64) -> Self {
        AdamState {
            t: 0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// One bias-corrected update, in place. The step counter increments
    /// before bias correction.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) -> Result<()> {
        if params.len() != grad.len() || params.len() != self.m.len() {
            return Err(Error::Dimension(format!(
                "adam: params {}, grad {}, state {}",
                params.len(),
                grad.len(),
                self.m.len()
            )));
        }
        if !grad.iter().all(|g| g.is_finite()) {
            return Err(Error::Numeric("adam saw non-finite gradient".into()));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

/// Functional form: returns the updated parameter tensor.
pub fn adam_step(params: &Tensor, grad: &Tensor, state: &mut AdamState) -> Result<Tensor> {
    same_shape(params, grad, "adam_step")?;
    let mut data = params.data().to_vec();
    state.step(&mut data, grad.data())?;
    Tensor::from_vec(data, params.shape())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_is_minus_lr_for_constant_gradient() {
        // t=1 Adam algebra: m_hat = g, v_hat = g^2, update = -lr*g/(|g|+eps).
        let mut st = AdamState::new(3, 0.05);
        let p = Tensor::from_vec(vec![1.0, 2.0, 3.0], &[3]).unwrap();
        let g = Tensor::from_vec(vec![0.5, 0.5, 0.5], &[3]).unwrap();
        let out = adam_step(&p, &g, &mut st).unwrap();
        for (before, after) in p.data().iter().zip(out.data()) {
            assert!((after - (before - 0.05)).abs() < 1e-6);
        }
        assert_eq!(st.t, 1);
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut st = AdamState::new(2, 0.1);
        let p = Tensor::from_vec(vec![0.3, -0.7], &[2]).unwrap();
        let g = Tensor::zeros(&[2]);
        let out = adam_step(&p, &g, &mut st).unwrap();
        assert_eq!(out.data(), p.data());
        // still true at later t with non-zero moment history cleared
        let out2 = adam_step(&out, &g, &mut st).unwrap();
        assert_eq!(out2.data(), p.data());
    }

    #[test]
    fn lr_100_step_scale() {
        // the configured patch-optimization step scale
        let mut st = AdamState::new(1, 100.0);
        let p = Tensor::from_vec(vec![0.5], &[1]).unwrap();
        let g = Tensor::from_vec(vec![0.01], &[1]).unwrap();
        let out = adam_step(&p, &g, &mut st).unwrap();
        assert!((out.data()[0] - (0.5 - 100.0)).abs() < 1e-3);
    }

    #[test]
    fn shape_mismatch_is_dimension_error() {
        let mut st = AdamState::new(2, 0.1);
        let p = Tensor::zeros(&[2]);
        let g = Tensor::zeros(&[3]);
        assert!(matches!(adam_step(&p, &g, &mut st), Err(Error::Dimension(_))));
    }
}
