use crate::error::{Error, Result};
use crate::nn::tensor::{Scalar, Tensor};

pub const DEFAULT_EPS: f64 = 1e-5;

/// Values saved by [`instance_norm`] for the backward pass.
#[derive(Clone, Debug)]
pub struct NormCache<T> {
    /// Normalized input before the affine transform.
    pub xhat: Tensor<T>,
    /// `1 / sqrt(var + eps)` per (sample, channel).
    pub inv_std: Vec<T>,
}

/// Per-(sample, channel) normalization over the spatial extent followed by a
/// learnable per-channel scale and shift.
pub fn instance_norm<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<(Tensor<T>, NormCache<T>)> {
    let (n, c, h, w) = x.dims4()?;
    let hw = h * w;
    if hw == 0 {
        return Err(Error::Shape("instance norm over an empty spatial extent".into()));
    }
    if eps <= 0.0 {
        return Err(Error::InvalidArgument("eps must be positive".into()));
    }
    if gamma.len() != c || beta.len() != c {
        return Err(Error::Shape(format!(
            "affine parameters of length {}/{} for {c} channels",
            gamma.len(),
            beta.len()
        )));
    }
    let eps = T::from_f64_lossy(eps);
    let count = T::from_usize(hw).unwrap();
    let mut y = Tensor::zeros(x.shape());
    let mut xhat = Tensor::zeros(x.shape());
    let mut inv_std = Vec::with_capacity(n * c);
    for (i, plane) in x.data().chunks_exact(hw).enumerate() {
        let ch = i % c;
        let mean = plane.iter().fold(T::zero(), |a, &v| a + v) / count;
        let var = plane
            .iter()
            .fold(T::zero(), |a, &v| a + (v - mean) * (v - mean))
            / count;
        let inv = T::one() / (var + eps).sqrt();
        inv_std.push(inv);
        let (g, b) = (gamma.data()[ch], beta.data()[ch]);
        let xh = &mut xhat.data_mut()[i * hw..(i + 1) * hw];
        let out = &mut y.data_mut()[i * hw..(i + 1) * hw];
        for ((o, xo), &v) in out.iter_mut().zip(xh.iter_mut()).zip(plane) {
            *xo = (v - mean) * inv;
            *o = g * *xo + b;
        }
    }
    Ok((y, NormCache { xhat, inv_std }))
}

/// Gradient with respect to the input; accumulates the affine gradients.
pub fn instance_norm_backward<T: Scalar>(
    cache: &NormCache<T>,
    gamma: &Tensor<T>,
    grad_out: &Tensor<T>,
    grad_gamma: &mut Tensor<T>,
    grad_beta: &mut Tensor<T>,
) -> Result<Tensor<T>> {
    let (_, c, h, w) = grad_out.dims4()?;
    if grad_out.shape() != cache.xhat.shape() {
        return Err(Error::Shape("output gradient does not match the cached input".into()));
    }
    let hw = h * w;
    let count = T::from_usize(hw).unwrap();
    let mut grad_in = Tensor::zeros(grad_out.shape());
    for (i, gy) in grad_out.data().chunks_exact(hw).enumerate() {
        let ch = i % c;
        let xh = &cache.xhat.data()[i * hw..(i + 1) * hw];
        let g = gamma.data()[ch];
        let mut sum_dy = T::zero();
        let mut sum_dy_xhat = T::zero();
        for (&d, &v) in gy.iter().zip(xh) {
            sum_dy = sum_dy + d;
            sum_dy_xhat = sum_dy_xhat + d * v;
        }
        grad_gamma.data_mut()[ch] = grad_gamma.data()[ch] + sum_dy_xhat;
        grad_beta.data_mut()[ch] = grad_beta.data()[ch] + sum_dy;
        // dx = g * inv_std / M * (M * dy - sum(dy) - xhat * sum(dy * xhat))
        let scale = g * cache.inv_std[i] / count;
        let gx = &mut grad_in.data_mut()[i * hw..(i + 1) * hw];
        for ((o, &d), &v) in gx.iter_mut().zip(gy).zip(xh) {
            *o = scale * (count * d - sum_dy - v * sum_dy_xhat);
        }
    }
    Ok(grad_in)
}
