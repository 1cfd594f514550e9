//! Atrous (dilated) 2-D convolution with stride 1 and zero SAME padding.
//!
//! For a kernel tap offset `k` (measured from the kernel centre) and rate
//! `r`, output position `i` reads input position `i + r * k`; positions that
//! fall outside the map read zero. `r = 1` is ordinary convolution. The
//! implementation lowers each sample to a column matrix and runs one GEMM.

use crate::error::{Error, Result};
use crate::nn::tensor::{Scalar, Tensor};

/// Convolution weights `[out_ch, in_ch, k_rows, k_cols]`, bias `[out_ch]`
/// and atrous rate.
#[derive(Clone, Copy, Debug)]
pub struct ConvGeometry {
    pub out_ch: usize,
    pub in_ch: usize,
    pub k_rows: usize,
    pub k_cols: usize,
    pub rate: usize,
}

impl ConvGeometry {
    pub fn from_weight<T: Scalar>(weight: &Tensor<T>, rate: usize) -> Result<Self> {
        let (out_ch, in_ch, k_rows, k_cols) = weight.dims4()?;
        if rate == 0 {
            return Err(Error::InvalidArgument("atrous rate must be positive".into()));
        }
        if k_rows % 2 == 0 || k_cols % 2 == 0 {
            return Err(Error::InvalidArgument(format!(
                "kernel extents must be odd, got {k_rows}x{k_cols}"
            )));
        }
        Ok(ConvGeometry {
            out_ch,
            in_ch,
            k_rows,
            k_cols,
            rate,
        })
    }

    fn taps(&self) -> usize {
        self.k_rows * self.k_cols
    }

    fn is_pointwise(&self) -> bool {
        self.k_rows == 1 && self.k_cols == 1
    }

    fn check_input(&self, c: usize) -> Result<()> {
        if c != self.in_ch {
            return Err(Error::Shape(format!(
                "input has {c} channels, filter expects {}",
                self.in_ch
            )));
        }
        Ok(())
    }
}

// Column matrix `[in_ch * taps, h * w]` for one sample.
fn im2col<T: Scalar>(g: &ConvGeometry, x: &[T], h: usize, w: usize, col: &mut [T]) {
    let hw = h * w;
    let (cr, cc) = (g.k_rows / 2, g.k_cols / 2);
    for c in 0..g.in_ch {
        let plane = &x[c * hw..(c + 1) * hw];
        for ky in 0..g.k_rows {
            let dy = (ky as isize - cr as isize) * g.rate as isize;
            for kx in 0..g.k_cols {
                let dx = (kx as isize - cc as isize) * g.rate as isize;
                let row = (c * g.taps() + ky * g.k_cols + kx) * hw;
                let dst = &mut col[row..row + hw];
                let (x0, x1) = valid_range(dx, w);
                for y in 0..h {
                    let out = &mut dst[y * w..(y + 1) * w];
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize || x0 >= x1 {
                        out.fill(T::zero());
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    out[..x0].fill(T::zero());
                    let s0 = (x0 as isize + dx) as usize;
                    out[x0..x1].copy_from_slice(&src[s0..s0 + (x1 - x0)]);
                    out[x1..].fill(T::zero());
                }
            }
        }
    }
}

// Adjoint of `im2col`: scatter-add the column matrix back into the input.
fn col2im<T: Scalar>(g: &ConvGeometry, col: &[T], h: usize, w: usize, x: &mut [T]) {
    let hw = h * w;
    let (cr, cc) = (g.k_rows / 2, g.k_cols / 2);
    for c in 0..g.in_ch {
        let plane = &mut x[c * hw..(c + 1) * hw];
        for ky in 0..g.k_rows {
            let dy = (ky as isize - cr as isize) * g.rate as isize;
            for kx in 0..g.k_cols {
                let dx = (kx as isize - cc as isize) * g.rate as isize;
                let row = (c * g.taps() + ky * g.k_cols + kx) * hw;
                let src = &col[row..row + hw];
                let (x0, x1) = valid_range(dx, w);
                if x0 >= x1 {
                    continue;
                }
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let s0 = (x0 as isize + dx) as usize;
                    let dst = &mut plane[sy as usize * w + s0..sy as usize * w + s0 + (x1 - x0)];
                    for (d, s) in dst.iter_mut().zip(&src[y * w + x0..y * w + x1]) {
                        *d = *d + *s;
                    }
                }
            }
        }
    }
}

// Output columns `[x0, x1)` whose shifted source `x + dx` lies inside `[0, w)`.
fn valid_range(dx: isize, w: usize) -> (usize, usize) {
    let x0 = (-dx).max(0) as usize;
    let x1 = (w as isize - dx).clamp(0, w as isize) as usize;
    (x0.min(w), x1)
}

/// Forward pass. Output has the same spatial extent as the input.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    rate: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeometry::from_weight(weight, rate)?;
    let (n, c, h, w) = input.dims4()?;
    g.check_input(c)?;
    if bias.len() != g.out_ch {
        return Err(Error::Shape(format!(
            "bias has {} entries for {} output channels",
            bias.len(),
            g.out_ch
        )));
    }
    let hw = h * w;
    let kdim = g.in_ch * g.taps();
    let mut out = Tensor::zeros(&[n, g.out_ch, h, w]);
    let mut col = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); kdim * hw]
    };
    for s in 0..n {
        let x = &input.data()[s * c * hw..(s + 1) * c * hw];
        let y = &mut out.data_mut()[s * g.out_ch * hw..(s + 1) * g.out_ch * hw];
        for (o, plane) in y.chunks_exact_mut(hw).enumerate() {
            plane.fill(bias.data()[o]);
        }
        let cols: &[T] = if g.is_pointwise() {
            x
        } else {
            im2col(&g, x, h, w, &mut col);
            &col
        };
        T::gemm(g.out_ch, kdim, hw, T::one(), weight.data(), false, cols, false, T::one(), y);
    }
    Ok(out)
}

/// Backward pass. Accumulates into `grad_weight` and `grad_bias` and returns
/// the gradient with respect to the input.
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    rate: usize,
    grad_out: &Tensor<T>,
    grad_weight: &mut Tensor<T>,
    grad_bias: &mut Tensor<T>,
) -> Result<Tensor<T>> {
    let g = ConvGeometry::from_weight(weight, rate)?;
    let (n, c, h, w) = input.dims4()?;
    g.check_input(c)?;
    if grad_out.shape() != [n, g.out_ch, h, w] {
        return Err(Error::Shape(format!(
            "output gradient {:?} does not match [{n}, {}, {h}, {w}]",
            grad_out.shape(),
            g.out_ch
        )));
    }
    let hw = h * w;
    let kdim = g.in_ch * g.taps();
    let mut grad_in = Tensor::zeros(input.shape());
    let mut col = vec![T::zero(); if g.is_pointwise() { 0 } else { kdim * hw }];
    let mut grad_col = vec![T::zero(); if g.is_pointwise() { 0 } else { kdim * hw }];
    for s in 0..n {
        let x = &input.data()[s * c * hw..(s + 1) * c * hw];
        let gy = &grad_out.data()[s * g.out_ch * hw..(s + 1) * g.out_ch * hw];
        for (o, plane) in gy.chunks_exact(hw).enumerate() {
            let acc = plane.iter().fold(T::zero(), |a, &v| a + v);
            grad_bias.data_mut()[o] = grad_bias.data()[o] + acc;
        }
        let gx = &mut grad_in.data_mut()[s * c * hw..(s + 1) * c * hw];
        if g.is_pointwise() {
            // dW += dY * X^T ; dX = W^T * dY
            T::gemm(g.out_ch, hw, kdim, T::one(), gy, false, x, true, T::one(), grad_weight.data_mut());
            T::gemm(kdim, g.out_ch, hw, T::one(), weight.data(), true, gy, false, T::zero(), gx);
        } else {
            im2col(&g, x, h, w, &mut col);
            T::gemm(g.out_ch, hw, kdim, T::one(), gy, false, &col, true, T::one(), grad_weight.data_mut());
            T::gemm(kdim, g.out_ch, hw, T::one(), weight.data(), true, gy, false, T::zero(), &mut grad_col);
            col2im(&g, &grad_col, h, w, gx);
        }
    }
    Ok(grad_in)
}
