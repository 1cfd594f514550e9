//! Finite-difference check of the assembled network.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{CutieConfig, CutieModel};
use crate::error::Result;
use crate::nn::gradcheck::max_relative_error;
use crate::nn::layers::IdGrid;
use crate::nn::masked_softmax_xent;

/// A narrow network that keeps every structural element of the full one.
pub fn tiny_config() -> CutieConfig {
    CutieConfig {
        vocab_size: 10,
        embedding_dim: 3,
        trunk_channels: 3,
        shortcut_channels: 2,
        num_classes: 3,
        atrous_rate: 2,
        aspp_rates: vec![4, 8, 16],
        keep_prob: 0.8,
    }
}

/// Gradient of a masked cross-entropy through the whole model on a
/// `1 x h x w` grid, with respect to every parameter element. Dropout is
/// active with a mask that is identical across evaluations.
pub fn check_model(config: CutieConfig, grid: (usize, usize), seed: u64, eps: f64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = CutieModel::<f64>::build(config.clone(), seed)?;
    // Perturb the norm affines and biases away from their 1/0 initial values.
    for p in model.params_mut() {
        if p.value.shape().len() == 1 {
            for v in p.value.data_mut() {
                *v += rng.random_range(-0.3..0.3);
            }
        }
    }
    let (h, w) = grid;
    let ids: Vec<u32> = (0..h * w)
        .map(|_| if rng.random_bool(0.3) { 0 } else { rng.random_range(1..config.vocab_size as u32) })
        .collect();
    let mask: Vec<f64> = ids.iter().map(|&id| if id == 0 { 0.0 } else { 1.0 }).collect();
    let labels: Vec<usize> = (0..h * w).map(|_| rng.random_range(0..config.num_classes)).collect();
    let ids = IdGrid::new(1, h, w, ids)?;
    let dropout_seed = rng.random::<u64>();

    let loss = |m: &CutieModel<f64>| -> Result<(f64, _)> {
        let mut drng = ChaCha8Rng::seed_from_u64(dropout_seed);
        let (logits, trace) = m.forward_train(&ids, true, &mut drng)?;
        let (l, g) = masked_softmax_xent(&logits, &labels, &mask)?;
        Ok((l, (trace, g)))
    };

    let (_, (trace, grad_logits)) = loss(&model)?;
    model.zero_grad();
    model.backward(trace, &grad_logits)?;
    let analytic: Vec<f64> = model
        .named_params()
        .iter()
        .flat_map(|(_, p)| p.grad.data().to_vec())
        .collect();

    let mut numeric = Vec::with_capacity(analytic.len());
    let n_params = model.params_mut().len();
    for pi in 0..n_params {
        let len = model.params_mut()[pi].len();
        for i in 0..len {
            let orig = model.params_mut()[pi].value.data()[i];
            model.params_mut()[pi].value.data_mut()[i] = orig + eps;
            let up = loss(&model)?.0;
            model.params_mut()[pi].value.data_mut()[i] = orig - eps;
            let down = loss(&model)?.0;
            model.params_mut()[pi].value.data_mut()[i] = orig;
            numeric.push((up - down) / (2.0 * eps));
        }
    }
    Ok(max_relative_error(&analytic, &numeric))
}
