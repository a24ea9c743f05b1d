//! Adam with bias correction, operating over an ordered parameter list.

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct Adam<F: Real> {
    pub lr: F,
    pub beta1: F,
    pub beta2: F,
    pub eps: F,
    /// Completed steps; bias correction uses t >= 1.
    pub t: u64,
    m: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
}

impl<F: Real> Adam<F> {
    pub fn new(lr: f64, param_sizes: &[usize]) -> Self {
        Adam {
            lr: F::from_f64c(lr),
            beta1: F::from_f64c(0.9),
            beta2: F::from_f64c(0.999),
            eps: F::from_f64c(1e-8),
            t: 0,
            m: param_sizes.iter().map(|&n| vec![F::zero(); n]).collect(),
            v: param_sizes.iter().map(|&n| vec![F::zero(); n]).collect(),
        }
    }

    pub fn n_params(&self) -> usize {
        self.m.iter().map(|m| m.len()).sum()
    }

    /// One bias-corrected update. Consumes each tensor's gradient; a
    /// missing gradient is a usage error and non-finite gradients abort
    /// the run.
    pub fn step(&mut self, params: &mut [&mut Tensor<F>]) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(Error::Usage(format!(
                "optimizer tracks {} tensors, got {}",
                self.m.len(),
                params.len()
            )));
        }
        self.t += 1;
        let one = F::one();
        let bc1 = one - self.beta1.powi(self.t as i32);
        let bc2 = one - self.beta2.powi(self.t as i32);
        for (idx, tensor) in params.iter_mut().enumerate() {
            let grad = tensor.grad.take().ok_or_else(|| {
                Error::Usage(format!("parameter {idx} has no gradient before the Adam step"))
            })?;
            if grad.len() != self.m[idx].len() {
                return Err(Error::Usage(format!(
                    "parameter {idx} gradient length {} != state length {}",
                    grad.len(),
                    self.m[idx].len()
                )));
            }
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite gradient in parameter {idx} at step {}",
                    self.t
                )));
            }
            let (m, v) = (&mut self.m[idx], &mut self.v[idx]);
            for ((p, g), (mi, vi)) in tensor
                .data
                .iter_mut()
                .zip(&grad)
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *mi = self.beta1 * *mi + (one - self.beta1) * *g;
                *vi = self.beta2 * *vi + (one - self.beta2) * *g * *g;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *p = *p - self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }

    /// Flattened first/second moments in parameter order (checkpointing).
    pub fn state_flat(&self) -> (Vec<F>, Vec<F>) {
        let flat = |xs: &[Vec<F>]| xs.iter().flat_map(|v| v.iter().copied()).collect();
        (flat(&self.m), flat(&self.v))
    }

    /// Rebuilds optimizer state from flattened moments.
    pub fn restore(lr: f64, param_sizes: &[usize], t: u64, m: &[F], v: &[F]) -> Result<Self> {
        let total: usize = param_sizes.iter().sum();
        if m.len() != total || v.len() != total {
            return Err(Error::Corrupt(format!(
                "optimizer state of {} / {} values for {total} parameters",
                m.len(),
                v.len()
            )));
        }
        let mut adam = Self::new(lr, param_sizes);
        adam.t = t;
        let mut offset = 0;
        for (idx, &n) in param_sizes.iter().enumerate() {
            adam.m[idx].copy_from_slice(&m[offset..offset + n]);
            adam.v[idx].copy_from_slice(&v[offset..offset + n]);
            offset += n;
        }
        Ok(adam)
    }
}
