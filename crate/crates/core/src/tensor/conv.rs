//! im2col / col2im convolution kernels.
//!
//! Column matrices are laid out `[in_c * k_h * k_w, out_h * out_w]` with the
//! row index running kernel-major, `(ci * k_h + ky) * k_w + kx`, which is the
//! same flattening as a `(out_c, in_c, k_h, k_w)` weight. The product with the
//! weight is a single gemm per batch item, so the summation order is fixed.

use super::{Scalar, TensorError};

/// Kernel size, stride and symmetric per-axis zero padding of a convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ConvGeometry {
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub pad_h: usize,
    pub pad_w: usize,
}

impl ConvGeometry {
    /// Square kernel with `(k - 1) / 2` padding and stride 1.
    pub const fn same(k: usize) -> Self {
        ConvGeometry {
            kernel_h: k,
            kernel_w: k,
            stride: 1,
            pad_h: (k - 1) / 2,
            pad_w: (k - 1) / 2,
        }
    }

    /// Stride-2, pad-1 square kernel: `out = ceil(in / 2)` for `k = 3`.
    pub const fn down(k: usize) -> Self {
        ConvGeometry {
            kernel_h: k,
            kernel_w: k,
            stride: 2,
            pad_h: 1,
            pad_w: 1,
        }
    }

    pub const fn unpadded(k: usize, stride: usize) -> Self {
        ConvGeometry {
            kernel_h: k,
            kernel_w: k,
            stride,
            pad_h: 0,
            pad_w: 0,
        }
    }

    pub const fn patch(&self) -> usize {
        self.kernel_h * self.kernel_w
    }

    /// `floor((in + 2 * pad - k) / stride) + 1` per axis, `None` when the
    /// padded input is smaller than the kernel.
    pub fn output_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let ph = h + 2 * self.pad_h;
        let pw = w + 2 * self.pad_w;
        if h == 0 || w == 0 || ph < self.kernel_h || pw < self.kernel_w || self.stride == 0 {
            return None;
        }
        Some((
            (ph - self.kernel_h) / self.stride + 1,
            (pw - self.kernel_w) / self.stride + 1,
        ))
    }

    fn is_pointwise(&self) -> bool {
        self.kernel_h == 1 && self.kernel_w == 1 && self.stride == 1 && self.pad_h == 0 && self.pad_w == 0
    }
}

/// Output padding per axis that makes a transposed convolution of an
/// `in_hw` map land exactly on `target_hw`. Only `{0, 1}` (and below the
/// stride) are accepted, and the matching forward convolution of the target
/// must map back to `in_hw`.
pub fn transposed_output_padding(
    geom: &ConvGeometry,
    in_hw: (usize, usize),
    target_hw: (usize, usize),
) -> Result<(usize, usize), TensorError> {
    let unreachable = TensorError::UnreachableTarget {
        in_h: in_hw.0,
        in_w: in_hw.1,
        target_h: target_hw.0,
        target_w: target_hw.1,
    };
    let axis = |input: usize, target: usize, k: usize, pad: usize| -> Option<usize> {
        if input == 0 {
            return None;
        }
        let base = ((input - 1) * geom.stride + k).checked_sub(2 * pad)?;
        let op = target.checked_sub(base)?;
        (op <= 1 && op < geom.stride.max(1)).then_some(op)
    };
    let oph = axis(in_hw.0, target_hw.0, geom.kernel_h, geom.pad_h).ok_or_else(|| unreachable.clone())?;
    let opw = axis(in_hw.1, target_hw.1, geom.kernel_w, geom.pad_w).ok_or_else(|| unreachable.clone())?;
    if geom.output_hw(target_hw.0, target_hw.1) != Some(in_hw) {
        return Err(unreachable);
    }
    Ok((oph, opw))
}

/// Unfold one `[c, h, w]` image into `[c * kh * kw, oh * ow]`.
pub(crate) fn im2col<T: Scalar>(
    input: &[T],
    c: usize,
    h: usize,
    w: usize,
    g: &ConvGeometry,
    oh: usize,
    ow: usize,
    cols: &mut [T],
) {
    let ohw = oh * ow;
    debug_assert_eq!(cols.len(), c * g.patch() * ohw);
    let s = g.stride;
    for ci in 0..c {
        let plane = &input[ci * h * w..(ci + 1) * h * w];
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let row = (ci * g.kernel_h + ky) * g.kernel_w + kx;
                let dst = &mut cols[row * ohw..(row + 1) * ohw];
                for oy in 0..oh {
                    let out_row = &mut dst[oy * ow..(oy + 1) * ow];
                    let iy = (oy * s + ky) as isize - g.pad_h as isize;
                    if iy < 0 || iy >= h as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, v) in out_row.iter_mut().enumerate() {
                        let ix = (ox * s + kx) as isize - g.pad_w as isize;
                        *v = if ix < 0 || ix >= w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back into a `[c, h, w]` image.
pub(crate) fn col2im<T: Scalar>(
    cols: &[T],
    c: usize,
    h: usize,
    w: usize,
    g: &ConvGeometry,
    oh: usize,
    ow: usize,
    out: &mut [T],
) {
    let ohw = oh * ow;
    let s = g.stride;
    for ci in 0..c {
        let plane = &mut out[ci * h * w..(ci + 1) * h * w];
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let row = (ci * g.kernel_h + ky) * g.kernel_w + kx;
                let src = &cols[row * ohw..(row + 1) * ohw];
                for oy in 0..oh {
                    let iy = (oy * s + ky) as isize - g.pad_h as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, v) in src[oy * ow..(oy + 1) * ow].iter().enumerate() {
                        let ix = (ox * s + kx) as isize - g.pad_w as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += *v;
                        }
                    }
                }
            }
        }
    }
}

/// Shapes of one convolution call: input `[n, ci, h, w]`, output `[n, co, oh, ow]`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvDims {
    pub n: usize,
    pub ci: usize,
    pub h: usize,
    pub w: usize,
    pub co: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvDims {
    fn k(&self, g: &ConvGeometry) -> usize {
        self.ci * g.patch()
    }
}

/// Direct convolution forward: `out[n] = W * im2col(x[n]) + b`.
pub(crate) fn conv_forward<T: Scalar>(
    x: &[T],
    weight: &[T],
    bias: Option<&[T]>,
    d: ConvDims,
    g: &ConvGeometry,
) -> Vec<T> {
    let k = d.k(g);
    let ohw = d.oh * d.ow;
    let mut out = vec![T::zero(); d.n * d.co * ohw];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); k * ohw]
    };
    for n in 0..d.n {
        let xin = &x[n * d.ci * d.h * d.w..(n + 1) * d.ci * d.h * d.w];
        let dst = &mut out[n * d.co * ohw..(n + 1) * d.co * ohw];
        if let Some(bias) = bias {
            for (co, plane) in dst.chunks_mut(ohw).enumerate() {
                plane.fill(bias[co]);
            }
        }
        let colsref: &[T] = if g.is_pointwise() {
            xin
        } else {
            im2col(xin, d.ci, d.h, d.w, g, d.oh, d.ow, &mut cols);
            &cols
        };
        T::gemm(
            d.co,
            k,
            ohw,
            weight,
            k as isize,
            1,
            colsref,
            ohw as isize,
            1,
            T::one(),
            dst,
            ohw as isize,
            1,
        );
    }
    out
}

/// Gradients of [`conv_forward`]: returns `(d_input, d_weight, d_bias)`,
/// each computed only when requested.
pub(crate) fn conv_backward<T: Scalar>(
    x: &[T],
    weight: &[T],
    grad_out: &[T],
    d: ConvDims,
    g: &ConvGeometry,
    want_input: bool,
    want_params: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>, Option<Vec<T>>) {
    let k = d.k(g);
    let ohw = d.oh * d.ow;
    let in_sz = d.ci * d.h * d.w;
    let mut dx = want_input.then(|| vec![T::zero(); d.n * in_sz]);
    let mut dw = want_params.then(|| vec![T::zero(); d.co * k]);
    let mut db = want_params.then(|| vec![T::zero(); d.co]);
    let mut cols = vec![T::zero(); k * ohw];
    for n in 0..d.n {
        let gout = &grad_out[n * d.co * ohw..(n + 1) * d.co * ohw];
        if let (Some(dw), Some(db)) = (dw.as_mut(), db.as_mut()) {
            let xin = &x[n * in_sz..(n + 1) * in_sz];
            let colsref: &[T] = if g.is_pointwise() {
                xin
            } else {
                im2col(xin, d.ci, d.h, d.w, g, d.oh, d.ow, &mut cols);
                &cols
            };
            // dW[co, k] += dY[co, p] * cols[k, p]^T
            T::gemm(
                d.co,
                ohw,
                k,
                gout,
                ohw as isize,
                1,
                colsref,
                1,
                ohw as isize,
                T::one(),
                dw,
                k as isize,
                1,
            );
            for (co, plane) in gout.chunks(ohw).enumerate() {
                let mut s = T::zero();
                for v in plane {
                    s += *v;
                }
                db[co] += s;
            }
        }
        if let Some(dx) = dx.as_mut() {
            let dst = &mut dx[n * in_sz..(n + 1) * in_sz];
            if g.is_pointwise() {
                T::gemm(
                    k, d.co, ohw, weight, 1, k as isize, gout, ohw as isize, 1, T::zero(), dst,
                    ohw as isize, 1,
                );
            } else {
                // dcols[k, p] = W^T[k, co] * dY[co, p]
                T::gemm(
                    k,
                    d.co,
                    ohw,
                    weight,
                    1,
                    k as isize,
                    gout,
                    ohw as isize,
                    1,
                    T::zero(),
                    &mut cols,
                    ohw as isize,
                    1,
                );
                col2im(&cols, d.ci, d.h, d.w, g, d.oh, d.ow, dst);
            }
        }
    }
    (dx, dw, db)
}

/// Transposed convolution forward. `d` describes the *forward* convolution
/// it is the adjoint of: `x` here is `[n, co, oh, ow]` and the result is
/// `[n, ci, h, w]`; the weight is `(co, ci, kh, kw)`.
pub(crate) fn deconv_forward<T: Scalar>(
    y: &[T],
    weight: &[T],
    bias: Option<&[T]>,
    d: ConvDims,
    g: &ConvGeometry,
) -> Vec<T> {
    let k = d.k(g);
    let ohw = d.oh * d.ow;
    let out_sz = d.ci * d.h * d.w;
    let mut out = vec![T::zero(); d.n * out_sz];
    let mut cols = vec![T::zero(); k * ohw];
    for n in 0..d.n {
        let yin = &y[n * d.co * ohw..(n + 1) * d.co * ohw];
        T::gemm(
            k,
            d.co,
            ohw,
            weight,
            1,
            k as isize,
            yin,
            ohw as isize,
            1,
            T::zero(),
            &mut cols,
            ohw as isize,
            1,
        );
        let dst = &mut out[n * out_sz..(n + 1) * out_sz];
        col2im(&cols, d.ci, d.h, d.w, g, d.oh, d.ow, dst);
        if let Some(bias) = bias {
            for (c, plane) in dst.chunks_mut(d.h * d.w).enumerate() {
                for v in plane {
                    *v += bias[c];
                }
            }
        }
    }
    out
}

/// Gradients of [`deconv_forward`] with respect to `(y, weight, bias)`.
pub(crate) fn deconv_backward<T: Scalar>(
    y: &[T],
    weight: &[T],
    grad_out: &[T],
    d: ConvDims,
    g: &ConvGeometry,
    want_input: bool,
    want_params: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>, Option<Vec<T>>) {
    let k = d.k(g);
    let ohw = d.oh * d.ow;
    let out_sz = d.ci * d.h * d.w;
    let mut dy = want_input.then(|| vec![T::zero(); d.n * d.co * ohw]);
    let mut dw = want_params.then(|| vec![T::zero(); d.co * k]);
    let mut db = want_params.then(|| vec![T::zero(); d.ci]);
    let mut cols = vec![T::zero(); k * ohw];
    for n in 0..d.n {
        let gout = &grad_out[n * out_sz..(n + 1) * out_sz];
        im2col(gout, d.ci, d.h, d.w, g, d.oh, d.ow, &mut cols);
        if let Some(dy) = dy.as_mut() {
            T::gemm(
                d.co,
                k,
                ohw,
                weight,
                k as isize,
                1,
                &cols,
                ohw as isize,
                1,
                T::zero(),
                &mut dy[n * d.co * ohw..(n + 1) * d.co * ohw],
                ohw as isize,
                1,
            );
        }
        if let (Some(dw), Some(db)) = (dw.as_mut(), db.as_mut()) {
            let yin = &y[n * d.co * ohw..(n + 1) * d.co * ohw];
            // dW[co, k] += y[co, p] * cols[k, p]^T
            T::gemm(
                d.co,
                ohw,
                k,
                yin,
                ohw as isize,
                1,
                &cols,
                1,
                ohw as isize,
                T::one(),
                dw,
                k as isize,
                1,
            );
            for (c, plane) in gout.chunks(d.h * d.w).enumerate() {
                let mut s = T::zero();
                for v in plane {
                    s += *v;
                }
                db[c] += s;
            }
        }
    }
    (dy, dw, db)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn down_geometry_halves_with_ceiling() {
        let g = ConvGeometry::down(3);
        let mut hw = (400, 400);
        for _ in 0..4 {
            hw = g.output_hw(hw.0, hw.1).unwrap();
        }
        assert_eq!(hw, (25, 25));
        assert_eq!(g.output_hw(7, 5), Some((4, 3)));
        assert_eq!(g.output_hw(0, 5), None);
    }

    #[test]
    fn output_padding_search() {
        let g = ConvGeometry::down(3);
        assert_eq!(transposed_output_padding(&g, (13, 13), (25, 25)), Ok((0, 0)));
        assert_eq!(transposed_output_padding(&g, (13, 12), (26, 24)), Ok((1, 1)));
        assert!(matches!(
            transposed_output_padding(&g, (13, 13), (27, 25)),
            Err(TensorError::UnreachableTarget { .. })
        ));
        assert!(transposed_output_padding(&g, (13, 13), (24, 25)).is_err());
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = ConvGeometry::down(3);
        let (c, h, w) = (2, 5, 6);
        let (oh, ow) = g.output_hw(h, w).unwrap();
        let x: Vec<f64> = (0..c * h * w).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
        let y: Vec<f64> = (0..c * 9 * oh * ow).map(|i| ((i * 5) % 13) as f64 - 6.0).collect();
        let mut cols = vec![0.0; y.len()];
        im2col(&x, c, h, w, &g, oh, ow, &mut cols);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; x.len()];
        col2im(&y, c, h, w, &g, oh, ow, &mut back);
        let rhs: f64 = back.iter().zip(&x).map(|(a, b)| a * b).sum();
        assert_eq!(lhs, rhs);
    }
}
