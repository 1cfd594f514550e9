//! Parameter-free and lookup layers: embedding, ReLU, dropout, global average
//! pooling with broadcast, and channel concatenation.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::tensor::{Scalar, Tensor};

/// Token-id grid `[N, H, W]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdGrid {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub ids: Vec<u32>,
}

impl IdGrid {
    pub fn new(n: usize, h: usize, w: usize, ids: Vec<u32>) -> Result<Self> {
        if ids.len() != n * h * w {
            return Err(Error::Shape(format!(
                "{} ids for a {n}x{h}x{w} grid",
                ids.len()
            )));
        }
        Ok(IdGrid { n, h, w, ids })
    }
}

/// Looks up `table[id]` for every cell, producing `[N, E, H, W]`.
pub fn embedding<T: Scalar>(ids: &IdGrid, table: &Tensor<T>) -> Result<Tensor<T>> {
    let (vocab, dim) = table_dims(table)?;
    let hw = ids.h * ids.w;
    let mut out = Tensor::zeros(&[ids.n, dim, ids.h, ids.w]);
    for s in 0..ids.n {
        for p in 0..hw {
            let id = ids.ids[s * hw + p];
            if id as usize >= vocab {
                return Err(Error::IdOutOfRange {
                    id,
                    vocab_size: vocab,
                });
            }
            let row = &table.data()[id as usize * dim..(id as usize + 1) * dim];
            for (e, &v) in row.iter().enumerate() {
                out.data_mut()[(s * dim + e) * hw + p] = v;
            }
        }
    }
    Ok(out)
}

pub fn embedding_backward<T: Scalar>(
    ids: &IdGrid,
    grad_out: &Tensor<T>,
    grad_table: &mut Tensor<T>,
) -> Result<()> {
    let (_, dim) = table_dims(grad_table)?;
    if grad_out.shape() != [ids.n, dim, ids.h, ids.w] {
        return Err(Error::Shape("embedding gradient shape mismatch".into()));
    }
    let hw = ids.h * ids.w;
    let g = grad_table.data_mut();
    for s in 0..ids.n {
        for p in 0..hw {
            let id = ids.ids[s * hw + p] as usize;
            for e in 0..dim {
                g[id * dim + e] = g[id * dim + e] + grad_out.data()[(s * dim + e) * hw + p];
            }
        }
    }
    Ok(())
}

fn table_dims<T: Scalar>(table: &Tensor<T>) -> Result<(usize, usize)> {
    match table.shape() {
        &[v, e] => Ok((v, e)),
        s => Err(Error::Shape(format!("embedding table must be rank 2, got {s:?}"))),
    }
}

pub fn relu_in_place<T: Scalar>(x: &mut Tensor<T>) {
    for v in x.data_mut() {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
}

/// Masks `grad` where the ReLU output was not positive.
pub fn relu_backward_in_place<T: Scalar>(output: &Tensor<T>, grad: &mut Tensor<T>) {
    for (g, &y) in grad.data_mut().iter_mut().zip(output.data()) {
        if y <= T::zero() {
            *g = T::zero();
        }
    }
}

/// Inverted dropout. Returns the output and the per-element multiplier
/// (`0` or `1 / keep_prob`), which is also the backward mask. When not
/// training, or with `keep_prob == 1`, the input is returned unchanged and no
/// random numbers are drawn.
pub fn dropout<T: Scalar, R: Rng + ?Sized>(
    x: &Tensor<T>,
    keep_prob: f64,
    rng: &mut R,
    training: bool,
) -> Result<(Tensor<T>, Option<Vec<T>>)> {
    if !(keep_prob > 0.0 && keep_prob <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "keep probability {keep_prob} outside (0, 1]"
        )));
    }
    if !training || keep_prob == 1.0 {
        return Ok((x.clone(), None));
    }
    let scale = T::from_f64_lossy(1.0 / keep_prob);
    let mask: Vec<T> = (0..x.len())
        .map(|_| {
            if rng.random::<f64>() < keep_prob {
                scale
            } else {
                T::zero()
            }
        })
        .collect();
    let mut out = x.clone();
    for (o, &m) in out.data_mut().iter_mut().zip(&mask) {
        *o = *o * m;
    }
    Ok((out, Some(mask)))
}

pub fn dropout_backward<T: Scalar>(grad: &mut Tensor<T>, mask: Option<&[T]>) {
    if let Some(mask) = mask {
        for (g, &m) in grad.data_mut().iter_mut().zip(mask) {
            *g = *g * m;
        }
    }
}

/// Spatial mean per (sample, channel): `[N, C, H, W] -> [N, C, 1, 1]`.
pub fn global_avg_pool<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    let hw = h * w;
    if hw == 0 {
        return Err(Error::Shape("global pooling over an empty spatial extent".into()));
    }
    let count = T::from_usize(hw).unwrap();
    let data = x
        .data()
        .chunks_exact(hw)
        .map(|p| p.iter().fold(T::zero(), |a, &v| a + v) / count)
        .collect();
    Tensor::from_vec(&[n, c, 1, 1], data)
}

pub fn global_avg_pool_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    h: usize,
    w: usize,
) -> Result<Tensor<T>> {
    let count = T::from_usize(h * w).unwrap();
    let mut g = broadcast_up(grad_out, h, w)?;
    for v in g.data_mut() {
        *v = *v / count;
    }
    Ok(g)
}

/// Tiles a `[N, C, 1, 1]` map back to `[N, C, H, W]`.
pub fn broadcast_up<T: Scalar>(x: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let (n, c, xh, xw) = x.dims4()?;
    if xh != 1 || xw != 1 {
        return Err(Error::Shape(format!("broadcast expects a 1x1 map, got {xh}x{xw}")));
    }
    let mut out = Tensor::zeros(&[n, c, h, w]);
    for (plane, &v) in out.data_mut().chunks_exact_mut((h * w).max(1)).zip(x.data()) {
        plane.fill(v);
    }
    Ok(out)
}

/// Adjoint of [`broadcast_up`]: sums each plane.
pub fn broadcast_up_backward<T: Scalar>(grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = grad_out.dims4()?;
    let data = grad_out
        .data()
        .chunks_exact((h * w).max(1))
        .map(|p| p.iter().fold(T::zero(), |a, &v| a + v))
        .collect();
    Tensor::from_vec(&[n, c, 1, 1], data)
}

/// Concatenates rank-4 tensors along the channel axis.
pub fn concat_channels<T: Scalar>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let (n, _, h, w) = parts
        .first()
        .ok_or_else(|| Error::InvalidArgument("nothing to concatenate".into()))?
        .dims4()?;
    let mut total = 0;
    for p in parts {
        let (pn, pc, ph, pw) = p.dims4()?;
        if (pn, ph, pw) != (n, h, w) {
            return Err(Error::Shape(format!(
                "cannot concatenate {:?} with [{n}, _, {h}, {w}]",
                p.shape()
            )));
        }
        total += pc;
    }
    let hw = h * w;
    let mut data = Vec::with_capacity(n * total * hw);
    for s in 0..n {
        for p in parts {
            let pc = p.shape()[1];
            data.extend_from_slice(&p.data()[s * pc * hw..(s + 1) * pc * hw]);
        }
    }
    Tensor::from_vec(&[n, total, h, w], data)
}

/// Splits a channel-concatenated gradient back into parts of the given widths.
pub fn split_channels<T: Scalar>(x: &Tensor<T>, widths: &[usize]) -> Result<Vec<Tensor<T>>> {
    let (n, c, h, w) = x.dims4()?;
    if widths.iter().sum::<usize>() != c {
        return Err(Error::Shape(format!("widths {widths:?} do not sum to {c}")));
    }
    let hw = h * w;
    let mut parts: Vec<Vec<T>> = widths.iter().map(|&pc| Vec::with_capacity(n * pc * hw)).collect();
    for s in 0..n {
        let mut offset = s * c * hw;
        for (part, &pc) in parts.iter_mut().zip(widths) {
            part.extend_from_slice(&x.data()[offset..offset + pc * hw]);
            offset += pc * hw;
        }
    }
    parts
        .into_iter()
        .zip(widths)
        .map(|(d, &pc)| Tensor::from_vec(&[n, pc, h, w], d))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn embedding_lookup_places_rows_along_channels() {
        let table = Tensor::from_vec(&[3, 2], vec![0.0, 0.0, 1.0, 2.0, 3.0, 4.0]).unwrap();
        let ids = IdGrid::new(1, 1, 1, vec![2]).unwrap();
        let out = embedding(&ids, &table).unwrap();
        assert_eq!(out.shape(), &[1, 2, 1, 1]);
        assert_eq!(out.data(), &[3.0, 4.0]);
    }

    #[test]
    fn all_pad_grid_repeats_row_zero() {
        let table = Tensor::from_vec(&[2, 2], vec![0.25, -1.0, 5.0, 6.0]).unwrap();
        let ids = IdGrid::new(1, 2, 3, vec![0; 6]).unwrap();
        let out = embedding(&ids, &table).unwrap();
        assert!(out.data()[..6].iter().all(|&v| v == 0.25));
        assert!(out.data()[6..].iter().all(|&v| v == -1.0));
    }

    #[test]
    fn embedding_rejects_out_of_range_ids() {
        let table = Tensor::<f32>::zeros(&[3, 2]);
        let ids = IdGrid::new(1, 1, 2, vec![1, 3]).unwrap();
        assert!(matches!(
            embedding(&ids, &table),
            Err(Error::IdOutOfRange { id: 3, vocab_size: 3 })
        ));
    }

    #[test]
    fn one_hot_gradient_lands_in_one_row() {
        let ids = IdGrid::new(1, 2, 2, vec![0, 2, 1, 0]).unwrap();
        let mut g = Tensor::<f64>::zeros(&[1, 3, 2, 2]);
        let (channel, cell) = (1, 1); // cell (0, 1) holds id 2
        g.data_mut()[channel * 4 + cell] = 1.0;
        let mut table_grad = Tensor::zeros(&[4, 3]);
        embedding_backward(&ids, &g, &mut table_grad).unwrap();
        let nonzero: Vec<usize> = table_grad
            .data()
            .iter()
            .enumerate()
            .filter(|(_, &v)| v != 0.0)
            .map(|(i, _)| i)
            .collect();
        assert_eq!(nonzero, vec![2 * 3 + 1]);
    }

    #[test]
    fn dropout_identity_cases() {
        let x = Tensor::<f32>::full(&[10], 3.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (y, mask) = dropout(&x, 1.0, &mut rng, true).unwrap();
        assert_eq!(y, x);
        assert!(mask.is_none());
        let (y, mask) = dropout(&x, 0.1, &mut rng, false).unwrap();
        assert_eq!(y, x);
        assert!(mask.is_none());
        assert!(dropout(&x, 0.0, &mut rng, true).is_err());
    }

    #[test]
    fn dropout_keep_fraction_concentrates() {
        // Binomial(1e6, 0.9) has standard deviation 300, so 0.003 is 10 sigma.
        let x = Tensor::<f32>::full(&[1_000_000], 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (y, _) = dropout(&x, 0.9, &mut rng, true).unwrap();
        let kept = y.data().iter().filter(|&&v| v != 0.0).count() as f64 / 1e6;
        assert!((kept - 0.9).abs() < 0.003, "kept fraction {kept}");
        let scaled = y.data().iter().find(|&&v| v != 0.0).unwrap();
        assert!((scaled - 1.0 / 0.9).abs() < 1e-6);
    }

    #[test]
    fn pooling_means_and_broadcast_shape() {
        let x = Tensor::<f64>::from_vec(&[1, 1, 2, 2], vec![1.0, 3.0, 5.0, 7.0]).unwrap();
        let p = global_avg_pool(&x).unwrap();
        assert_eq!(p.data(), &[4.0]);
        let c = Tensor::<f64>::full(&[2, 3, 4, 5], 2.5);
        assert!(global_avg_pool(&c).unwrap().data().iter().all(|&v| v == 2.5));
        let b = broadcast_up(&global_avg_pool(&c).unwrap(), 4, 5).unwrap();
        assert_eq!(b.shape(), c.shape());
        assert!(global_avg_pool(&Tensor::<f64>::zeros(&[1, 1, 0, 3])).is_err());
    }

    #[test]
    fn concat_then_split_restores_parts() {
        let a = Tensor::<f32>::from_vec(&[2, 1, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::<f32>::from_vec(&[2, 2, 1, 2], (10..18).map(|v| v as f32).collect()).unwrap();
        let c = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(c.shape(), &[2, 3, 1, 2]);
        assert_eq!(
            c.data(),
            &[1.0, 2.0, 10.0, 11.0, 12.0, 13.0, 3.0, 4.0, 14.0, 15.0, 16.0, 17.0]
        );
        let parts = split_channels(&c, &[1, 2]).unwrap();
        assert_eq!(parts[0], a);
        assert_eq!(parts[1], b);
    }
}
