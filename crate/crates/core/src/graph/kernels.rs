//! Dense compute kernels shared by the graph forward and backward passes.
//!
//! Everything here is sequential and allocation-explicit so results are
//! bit-reproducible across runs on the same machine.

use ndarray::{s, Array1, Array2, Array3, Array4, ArrayView3, ArrayView4};

use super::Real;

/// Output spatial size of a `k x k` convolution with the given stride/pad.
pub(crate) fn conv_out_dim(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - k) / stride + 1
}

/// Unfolds one `(C, H, W)` sample into `(C*k*k, Ho*Wo)` patch columns,
/// zero-padding outside the input.
pub(crate) fn im2col<F: Real>(x: &ArrayView3<F>, k: usize, stride: usize, pad: usize) -> Array2<F> {
    let (c, h, w) = x.dim();
    let ho = conv_out_dim(h, k, stride, pad);
    let wo = conv_out_dim(w, k, stride, pad);
    let mut cols = Array2::<F>::zeros((c * k * k, ho * wo));
    for ch in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as i64 - pad as i64;
                    if iy < 0 || iy >= h as i64 {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as i64 - pad as i64;
                        if ix < 0 || ix >= w as i64 {
                            continue;
                        }
                        cols[[row, oy * wo + ox]] = x[[ch, iy as usize, ix as usize]];
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: accumulates patch-column cotangents back onto the
/// `(C, H, W)` input gradient.
pub(crate) fn col2im_acc<F: Real>(
    cols: &Array2<F>,
    grad_x: &mut Array3<F>,
    k: usize,
    stride: usize,
    pad: usize,
) {
    let (c, h, w) = grad_x.dim();
    let ho = conv_out_dim(h, k, stride, pad);
    let wo = conv_out_dim(w, k, stride, pad);
    for ch in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as i64 - pad as i64;
                    if iy < 0 || iy >= h as i64 {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as i64 - pad as i64;
                        if ix < 0 || ix >= w as i64 {
                            continue;
                        }
                        grad_x[[ch, iy as usize, ix as usize]] += cols[[row, oy * wo + ox]];
                    }
                }
            }
        }
    }
}

/// Batched 2-D convolution, `x (N,Ci,H,W) * w (Co,Ci,k,k) + b (Co)`.
pub(crate) fn conv2d_forward<F: Real>(
    x: &ArrayView4<F>,
    w: &ArrayView4<F>,
    b: &Array1<F>,
    stride: usize,
    pad: usize,
) -> Array4<F> {
    let (n, ci, h, wi) = x.dim();
    let (co, ci2, k, k2) = w.dim();
    assert_eq!(ci, ci2, "conv2d channel mismatch");
    assert_eq!(k, k2, "conv2d kernel must be square");
    assert_eq!(b.len(), co, "conv2d bias mismatch");
    let ho = conv_out_dim(h, k, stride, pad);
    let wo = conv_out_dim(wi, k, stride, pad);
    let w2 = w
        .to_shape((co, ci * k * k))
        .expect("weight reshape")
        .to_owned();
    let mut out = Array4::<F>::zeros((n, co, ho, wo));
    for ni in 0..n {
        let cols = im2col(&x.slice(s![ni, .., .., ..]), k, stride, pad);
        let prod = w2.dot(&cols);
        let mut out_n = out.slice_mut(s![ni, .., .., ..]);
        for c in 0..co {
            let bias = b[c];
            for (j, &v) in prod.row(c).iter().enumerate() {
                out_n[[c, j / wo, j % wo]] = v + bias;
            }
        }
    }
    out
}

/// Gradients of [`conv2d_forward`] with respect to input, weights, and bias.
/// Recomputes `im2col` instead of caching it; trades a little time for memory.
pub(crate) fn conv2d_backward<F: Real>(
    x: &ArrayView4<F>,
    w: &ArrayView4<F>,
    grad_out: &ArrayView4<F>,
    stride: usize,
    pad: usize,
) -> (Array4<F>, Array4<F>, Array1<F>) {
    let (n, ci, h, wi) = x.dim();
    let (co, _, k, _) = w.dim();
    let (_, _, ho, wo) = grad_out.dim();
    let w2 = w
        .to_shape((co, ci * k * k))
        .expect("weight reshape")
        .to_owned();
    let mut gx = Array4::<F>::zeros((n, ci, h, wi));
    let mut gw2 = Array2::<F>::zeros((co, ci * k * k));
    let mut gb = Array1::<F>::zeros(co);
    for ni in 0..n {
        let g_n = grad_out
            .slice(s![ni, .., .., ..])
            .to_shape((co, ho * wo))
            .expect("grad reshape")
            .to_owned();
        let cols = im2col(&x.slice(s![ni, .., .., ..]), k, stride, pad);
        gw2 = gw2 + g_n.dot(&cols.t());
        for c in 0..co {
            gb[c] += g_n.row(c).iter().copied().fold(F::zero(), |a, v| a + v);
        }
        let dcols = w2.t().dot(&g_n);
        let mut gx_n = gx.slice_mut(s![ni, .., .., ..]).to_owned();
        col2im_acc(&dcols, &mut gx_n, k, stride, pad);
        gx.slice_mut(s![ni, .., .., ..]).assign(&gx_n);
    }
    let gw = gw2
        .into_shape_with_order((co, ci, k, k))
        .expect("grad weight reshape");
    (gx, gw, gb)
}

/// Fully connected layer `x (N,Ci) . w^T (Ci,Co) + b`.
pub(crate) fn linear_forward<F: Real>(x: &Array2<F>, w: &Array2<F>, b: &Array1<F>) -> Array2<F> {
    let mut out = x.dot(&w.t());
    for mut row in out.rows_mut() {
        row += b;
    }
    out
}

pub(crate) fn linear_backward<F: Real>(
    x: &Array2<F>,
    w: &Array2<F>,
    grad_out: &Array2<F>,
) -> (Array2<F>, Array2<F>, Array1<F>) {
    let gx = grad_out.dot(w);
    let gw = grad_out.t().dot(x);
    let gb = grad_out.sum_axis(ndarray::Axis(0));
    (gx, gw, gb)
}

/// Separable blur step along one axis in residual form,
/// `y_i = x_i + sum_d w_d (x_{clamp(i+d)} - x_i)` over non-center taps,
/// with replicate borders. Constant inputs are reproduced bit-exactly.
pub(crate) fn blur1d_forward<F: Real>(x: &ArrayView4<F>, kernel: &[f64], horizontal: bool) -> Array4<F> {
    let (n, c, h, w) = x.dim();
    let r = kernel.len() / 2;
    assert_eq!(kernel.len() % 2, 1, "blur kernel length must be odd");
    let mut out = x.to_owned();
    let len = if horizontal { w } else { h };
    for ni in 0..n {
        for ch in 0..c {
            for a in 0..(if horizontal { h } else { w }) {
                for i in 0..len {
                    let xi = if horizontal { x[[ni, ch, a, i]] } else { x[[ni, ch, i, a]] };
                    let mut acc = F::zero();
                    for (t, &kw) in kernel.iter().enumerate() {
                        if t == r {
                            continue;
                        }
                        let j = (i as i64 + t as i64 - r as i64).clamp(0, len as i64 - 1) as usize;
                        let xj = if horizontal { x[[ni, ch, a, j]] } else { x[[ni, ch, j, a]] };
                        acc += F::from_f64(kw) * (xj - xi);
                    }
                    if horizontal {
                        out[[ni, ch, a, i]] = xi + acc;
                    } else {
                        out[[ni, ch, i, a]] = xi + acc;
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`blur1d_forward`] (transpose of the same linear map).
pub(crate) fn blur1d_backward<F: Real>(grad_out: &ArrayView4<F>, kernel: &[f64], horizontal: bool) -> Array4<F> {
    let (n, c, h, w) = grad_out.dim();
    let r = kernel.len() / 2;
    let side: f64 = kernel
        .iter()
        .enumerate()
        .filter(|(t, _)| *t != r)
        .map(|(_, &kw)| kw)
        .sum();
    let center = F::from_f64(1.0 - side);
    let mut gx = Array4::<F>::zeros((n, c, h, w));
    let len = if horizontal { w } else { h };
    for ni in 0..n {
        for ch in 0..c {
            for a in 0..(if horizontal { h } else { w }) {
                for i in 0..len {
                    let go = if horizontal { grad_out[[ni, ch, a, i]] } else { grad_out[[ni, ch, i, a]] };
                    if horizontal {
                        gx[[ni, ch, a, i]] += center * go;
                    } else {
                        gx[[ni, ch, i, a]] += center * go;
                    }
                    for (t, &kw) in kernel.iter().enumerate() {
                        if t == r {
                            continue;
                        }
                        let j = (i as i64 + t as i64 - r as i64).clamp(0, len as i64 - 1) as usize;
                        let kwf = F::from_f64(kw);
                        if horizontal {
                            gx[[ni, ch, a, j]] += kwf * go;
                        } else {
                            gx[[ni, ch, j, a]] += kwf * go;
                        }
                    }
                }
            }
        }
    }
    gx
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, Array4};

    #[test]
    fn conv_identity_kernel() {
        let x = Array4::from_shape_fn((1, 1, 4, 4), |(_, _, i, j)| (i * 4 + j) as f64);
        let mut w = Array4::<f64>::zeros((1, 1, 3, 3));
        w[[0, 0, 1, 1]] = 1.0;
        let out = conv2d_forward(&x.view(), &w.view(), &arr1(&[0.0]), 1, 1);
        assert_eq!(out, x);
    }

    #[test]
    fn conv_known_sum() {
        // all-ones 3x3 kernel over an all-ones 3x3 input, pad 1: counts the
        // valid taps at each position
        let x = Array4::from_elem((1, 1, 3, 3), 1.0_f64);
        let w = Array4::from_elem((1, 1, 3, 3), 1.0_f64);
        let out = conv2d_forward(&x.view(), &w.view(), &arr1(&[0.0]), 1, 1);
        assert_eq!(out[[0, 0, 1, 1]], 9.0);
        assert_eq!(out[[0, 0, 0, 0]], 4.0);
        assert_eq!(out[[0, 0, 0, 1]], 6.0);
    }

    #[test]
    fn conv_stride_two_shape() {
        let x = Array4::<f64>::zeros((2, 3, 8, 8));
        let w = Array4::<f64>::zeros((5, 3, 3, 3));
        let out = conv2d_forward(&x.view(), &w.view(), &Array1::zeros(5), 2, 1);
        assert_eq!(out.dim(), (2, 5, 4, 4));
    }

    #[test]
    fn im2col_col2im_adjoint_identity() {
        // <im2col(x), C> == <x, col2im(C)> for random tensors
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(2);
        let x = ndarray::Array3::from_shape_fn((2, 5, 6), |_| rng.random::<f64>());
        let k = 3;
        let cols = im2col(&x.view(), k, 2, 1);
        let c = Array2::from_shape_fn(cols.dim(), |_| rng.random::<f64>());
        let lhs: f64 = (&cols * &c).sum();
        let mut back = ndarray::Array3::<f64>::zeros(x.dim());
        col2im_acc(&c, &mut back, k, 2, 1);
        let rhs: f64 = (&x * &back).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn blur_constant_is_bit_exact() {
        let x = Array4::from_elem((1, 3, 5, 7), 0.4321_f64);
        let kernel = [0.25, 0.5, 0.25];
        let out = blur1d_forward(&x.view(), &kernel, true);
        for (a, b) in x.iter().zip(out.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn blur_adjoint_matches_transpose() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(3);
        let x = Array4::from_shape_fn((1, 1, 1, 6), |_| rng.random::<f64>());
        let g = Array4::from_shape_fn((1, 1, 1, 6), |_| rng.random::<f64>());
        let kernel = [0.2, 0.3, 0.5];
        let y = blur1d_forward(&x.view(), &kernel, true);
        let gx = blur1d_backward(&g.view(), &kernel, true);
        let lhs: f64 = (&y * &g).sum();
        let rhs: f64 = (&x * &gx).sum();
        // forward is affine in x with zero offset, so <Ax, g> == <x, A^T g>
        assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
    }
}
