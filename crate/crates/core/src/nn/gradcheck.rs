//! Central finite-difference verification of the hand-written backward
//! passes, run in 64-bit precision.
//!
//! Each `check_*` function draws a random input (and parameters) from a
//! seed, reduces the layer output to a scalar with a fixed random projection
//! `L = sum(R * y)`, and compares the analytic gradient of `L` with respect to
//! every input and parameter element against `(L(x + eps) - L(x - eps)) / (2 eps)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::nn::conv::{conv2d, conv2d_backward};
use crate::nn::layers::{
    broadcast_up, broadcast_up_backward, dropout, dropout_backward, embedding, embedding_backward,
    global_avg_pool, global_avg_pool_backward, IdGrid,
};
use crate::nn::loss::masked_softmax_xent;
use crate::nn::norm::{instance_norm, instance_norm_backward, DEFAULT_EPS};
use crate::nn::tensor::Tensor;

/// Default finite-difference step.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Gradients smaller than this are compared absolutely rather than relatively.
pub const RELATIVE_FLOOR: f64 = 1e-6;

/// `|a - n| / max(|a|, |n|, RELATIVE_FLOOR)`, maximized over elements.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(RELATIVE_FLOOR))
        .fold(0.0, f64::max)
}

/// Central-difference gradient of `f` at `x`.
pub fn numeric_gradient<F>(x: &[f64], mut f: F, eps: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + eps;
            let up = f(&probe);
            probe[i] = orig - eps;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * eps)
        })
        .collect()
}

/// Compares an analytic gradient of `f` at `x` with central differences and
/// returns the maximum relative error.
pub fn grad_check<F>(x: &[f64], analytic: &[f64], f: F, eps: f64) -> f64
where
    F: FnMut(&[f64]) -> f64,
{
    max_relative_error(analytic, &numeric_gradient(x, f, eps))
}

pub fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn project(y: &Tensor<f64>, r: &Tensor<f64>) -> f64 {
    y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
}

fn with_data(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::from_vec(shape, data.to_vec()).unwrap()
}

/// Convolution gradients with respect to input, weight and bias.
pub fn check_conv2d(
    input_shape: [usize; 4],
    out_ch: usize,
    kernel: (usize, usize),
    rate: usize,
    seed: u64,
    eps: f64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [n, c, h, w] = input_shape;
    let x = random_tensor(&input_shape, &mut rng);
    let wt = random_tensor(&[out_ch, c, kernel.0, kernel.1], &mut rng);
    let b = random_tensor(&[out_ch], &mut rng);
    let r = random_tensor(&[n, out_ch, h, w], &mut rng);

    let mut gw = Tensor::zeros(wt.shape());
    let mut gb = Tensor::zeros(b.shape());
    let gx = conv2d_backward(&x, &wt, rate, &r, &mut gw, &mut gb)?;

    let ex = grad_check(x.data(), gx.data(), |v| {
        project(&conv2d(&with_data(x.shape(), v), &wt, &b, rate).unwrap(), &r)
    }, eps);
    let ew = grad_check(wt.data(), gw.data(), |v| {
        project(&conv2d(&x, &with_data(wt.shape(), v), &b, rate).unwrap(), &r)
    }, eps);
    let eb = grad_check(b.data(), gb.data(), |v| {
        project(&conv2d(&x, &wt, &with_data(b.shape(), v), rate).unwrap(), &r)
    }, eps);
    Ok(ex.max(ew).max(eb))
}

/// Instance normalization gradients with respect to input, gamma and beta.
pub fn check_instance_norm(shape: [usize; 4], seed: u64, eps: f64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = shape[1];
    let x = random_tensor(&shape, &mut rng);
    let gamma = random_tensor(&[c], &mut rng);
    let beta = random_tensor(&[c], &mut rng);
    let r = random_tensor(&shape, &mut rng);

    let (_, cache) = instance_norm(&x, &gamma, &beta, DEFAULT_EPS)?;
    let mut gg = Tensor::zeros(&[c]);
    let mut gb = Tensor::zeros(&[c]);
    let gx = instance_norm_backward(&cache, &gamma, &r, &mut gg, &mut gb)?;

    let f = |x: &Tensor<f64>, g: &Tensor<f64>, b: &Tensor<f64>| {
        project(&instance_norm(x, g, b, DEFAULT_EPS).unwrap().0, &r)
    };
    let ex = grad_check(x.data(), gx.data(), |v| f(&with_data(&shape, v), &gamma, &beta), eps);
    let eg = grad_check(gamma.data(), gg.data(), |v| f(&x, &with_data(&[c], v), &beta), eps);
    let eb = grad_check(beta.data(), gb.data(), |v| f(&x, &gamma, &with_data(&[c], v)), eps);
    Ok(ex.max(eg).max(eb))
}

/// Embedding gradient with respect to the table.
pub fn check_embedding(vocab: usize, dim: usize, grid: (usize, usize), seed: u64, eps: f64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = grid;
    let ids = IdGrid::new(1, h, w, (0..h * w).map(|_| rng.random_range(0..vocab as u32)).collect())?;
    let table = random_tensor(&[vocab, dim], &mut rng);
    let r = random_tensor(&[1, dim, h, w], &mut rng);
    let mut gt = Tensor::zeros(table.shape());
    embedding_backward(&ids, &r, &mut gt)?;
    Ok(grad_check(table.data(), gt.data(), |v| {
        project(&embedding(&ids, &with_data(table.shape(), v)).unwrap(), &r)
    }, eps))
}

/// Dropout gradient. With `training == false` the layer is the identity; with
/// `training == true` the mask is re-drawn from the same seed on every
/// evaluation so the function is fixed.
pub fn check_dropout(shape: [usize; 4], keep_prob: f64, training: bool, seed: u64, eps: f64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = random_tensor(&shape, &mut rng);
    let r = random_tensor(&shape, &mut rng);
    let mask_seed = seed.wrapping_add(1);
    let (_, mask) = dropout(&x, keep_prob, &mut ChaCha8Rng::seed_from_u64(mask_seed), training)?;
    let mut gx = r.clone();
    dropout_backward(&mut gx, mask.as_deref());
    Ok(grad_check(x.data(), gx.data(), |v| {
        let mut rng = ChaCha8Rng::seed_from_u64(mask_seed);
        project(&dropout(&with_data(&shape, v), keep_prob, &mut rng, training).unwrap().0, &r)
    }, eps))
}

/// Gradient through global average pooling followed by broadcast back to the
/// input extent.
pub fn check_global_pool(shape: [usize; 4], seed: u64, eps: f64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [_, _, h, w] = shape;
    let x = random_tensor(&shape, &mut rng);
    let r = random_tensor(&shape, &mut rng);
    let gp = broadcast_up_backward(&r)?;
    let gx = global_avg_pool_backward(&gp, h, w)?;
    Ok(grad_check(x.data(), gx.data(), |v| {
        let p = global_avg_pool(&with_data(&shape, v)).unwrap();
        project(&broadcast_up(&p, h, w).unwrap(), &r)
    }, eps))
}

/// Masked cross-entropy gradient with respect to the logits. Roughly a third
/// of the cells get zero weight.
pub fn check_masked_xent(shape: [usize; 4], seed: u64, eps: f64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [n, k, h, w] = shape;
    let logits = random_tensor(&shape, &mut rng);
    let labels: Vec<usize> = (0..n * h * w).map(|_| rng.random_range(0..k)).collect();
    let mut mask: Vec<f64> = (0..n * h * w)
        .map(|_| if rng.random_bool(0.33) { 0.0 } else { rng.random_range(0.5..2.0) })
        .collect();
    mask[0] = 1.0;
    let (_, grad) = masked_softmax_xent(&logits, &labels, &mask)?;
    Ok(grad_check(logits.data(), grad.data(), |v| {
        masked_softmax_xent(&with_data(&shape, v), &labels, &mask).unwrap().0
    }, eps))
}
