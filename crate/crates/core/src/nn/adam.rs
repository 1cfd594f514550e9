use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::tensor::{Param, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates for every parameter, in parameter order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub hyper: AdamHyper,
    pub step: u64,
    pub first: Vec<Tensor<T>>,
    pub second: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Param<T>>, hyper: AdamHyper) -> Self {
        let (first, second) = params
            .into_iter()
            .map(|p| (Tensor::zeros(p.value.shape()), Tensor::zeros(p.value.shape())))
            .unzip();
        AdamState {
            hyper,
            step: 0,
            first,
            second,
        }
    }

    /// One bias-corrected Adam update of every parameter from its `grad`.
    pub fn step(&mut self, params: &mut [&mut Param<T>], lr: f64) -> Result<()> {
        if params.len() != self.first.len() {
            return Err(Error::Shape(format!(
                "{} parameters for optimizer state of {}",
                params.len(),
                self.first.len()
            )));
        }
        for (p, m) in params.iter().zip(&self.first) {
            if p.value.shape() != m.shape() || p.grad.shape() != m.shape() {
                return Err(Error::Shape(format!(
                    "parameter {:?} does not match moment {:?}",
                    p.value.shape(),
                    m.shape()
                )));
            }
        }
        self.step += 1;
        let AdamHyper { beta1, beta2, eps } = self.hyper;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        let (b1, b2) = (T::from_f64_lossy(beta1), T::from_f64_lossy(beta2));
        let (one_b1, one_b2) = (T::from_f64_lossy(1.0 - beta1), T::from_f64_lossy(1.0 - beta2));
        let step_size = T::from_f64_lossy(lr / bc1);
        let inv_sqrt_bc2 = T::from_f64_lossy(1.0 / bc2.sqrt());
        let eps = T::from_f64_lossy(eps);
        for ((p, m), v) in params.iter_mut().zip(&mut self.first).zip(&mut self.second) {
            let Param { value, grad } = &mut **p;
            for (((w, &g), mi), vi) in value
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = b1 * *mi + one_b1 * g;
                *vi = b2 * *vi + one_b2 * g * g;
                // w -= lr * m_hat / (sqrt(v_hat) + eps)
                *w = *w - step_size * *mi / ((*vi).sqrt() * inv_sqrt_bc2 + eps);
            }
        }
        Ok(())
    }
}
