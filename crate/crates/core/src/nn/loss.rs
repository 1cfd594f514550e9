use crate::error::{Error, Result};
use crate::nn::tensor::{Scalar, Tensor};

/// Per-cell class probabilities of `[N, K, H, W]` logits (softmax over K).
pub fn softmax<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, k, h, w) = logits.dims4()?;
    let hw = h * w;
    let mut out = Tensor::zeros(logits.shape());
    let src = logits.data();
    let dst = out.data_mut();
    for s in 0..n {
        let base = s * k * hw;
        for p in 0..hw {
            let max = (0..k)
                .map(|c| src[base + c * hw + p])
                .fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for c in 0..k {
                let e = (src[base + c * hw + p] - max).exp();
                dst[base + c * hw + p] = e;
                sum = sum + e;
            }
            for c in 0..k {
                dst[base + c * hw + p] = dst[base + c * hw + p] / sum;
            }
        }
    }
    Ok(out)
}

fn check_labels(labels: &[usize], n: usize, k: usize, hw: usize) -> Result<()> {
    if labels.len() != n * hw {
        return Err(Error::Shape(format!(
            "{} labels for {} cells",
            labels.len(),
            n * hw
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::InvalidArgument(format!("label {bad} outside {k} classes")));
    }
    Ok(())
}

/// Unweighted cross-entropy `-log p(label)` of every cell, in `[N, H, W]`
/// order.
pub fn per_cell_xent<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<Vec<T>> {
    let (n, k, h, w) = logits.dims4()?;
    let hw = h * w;
    check_labels(labels, n, k, hw)?;
    let probs = softmax(logits)?;
    Ok((0..n * hw)
        .map(|i| {
            let (s, p) = (i / hw, i % hw);
            -probs.data()[(s * k + labels[i]) * hw + p].max(T::min_positive_value()).ln()
        })
        .collect())
}

/// Mask-weighted mean cross-entropy and its gradient with respect to the
/// logits: `loss = sum(m * ce) / sum(m)`, `dlogits = m * (softmax - onehot) / sum(m)`.
pub fn masked_softmax_xent<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[usize],
    mask: &[T],
) -> Result<(T, Tensor<T>)> {
    let (n, k, h, w) = logits.dims4()?;
    let hw = h * w;
    check_labels(labels, n, k, hw)?;
    if mask.len() != n * hw {
        return Err(Error::Shape(format!("{} mask weights for {} cells", mask.len(), n * hw)));
    }
    if mask.iter().any(|&m| m < T::zero() || !m.is_finite()) {
        return Err(Error::InvalidArgument("mask weights must be finite and non-negative".into()));
    }
    let total = mask.iter().fold(T::zero(), |a, &m| a + m);
    if total <= T::zero() {
        return Err(Error::InvalidArgument("loss mask has no positive weight".into()));
    }
    let mut grad = softmax(logits)?;
    let mut loss = T::zero();
    for i in 0..n * hw {
        let (s, p) = (i / hw, i % hw);
        let m = mask[i];
        let base = s * k * hw + p;
        let g = grad.data_mut();
        if m == T::zero() {
            for c in 0..k {
                g[base + c * hw] = T::zero();
            }
            continue;
        }
        let target = base + labels[i] * hw;
        loss = loss - m * g[target].max(T::min_positive_value()).ln();
        g[target] = g[target] - T::one();
        let scale = m / total;
        for c in 0..k {
            g[base + c * hw] = g[base + c * hw] * scale;
        }
    }
    Ok((loss / total, grad))
}
