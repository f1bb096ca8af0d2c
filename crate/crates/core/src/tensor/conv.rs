//! 2-D cross-correlation and its adjoint, both lowered to a single
//! im2col matrix product over the whole batch.

use super::linalg::{matmul_into, matmul_tn_into};
use super::{Scalar, Tensor};
use crate::error::{dim_err, Result};
use crate::parallel;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Conv2dGeometry {
    pub stride: usize,
    pub padding: usize,
}

impl Conv2dGeometry {
    pub fn new(stride: usize, padding: usize) -> Self {
        Conv2dGeometry { stride, padding }
    }
}

impl Default for Conv2dGeometry {
    fn default() -> Self {
        Conv2dGeometry {
            stride: 1,
            padding: 0,
        }
    }
}

/// Output height and width of a convolution, `(H + 2p - kh) / stride + 1`
/// rounded down.
pub fn conv_output_hw(
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    geom: Conv2dGeometry,
) -> Result<(usize, usize)> {
    if geom.stride == 0 {
        return Err(dim_err!("conv stride must be at least 1"));
    }
    let (ph, pw) = (h + 2 * geom.padding, w + 2 * geom.padding);
    if kh > ph || kw > pw {
        return Err(dim_err!(
            "kernel {kh}x{kw} larger than padded input {ph}x{pw}"
        ));
    }
    Ok(((ph - kh) / geom.stride + 1, (pw - kw) / geom.stride + 1))
}

fn dims4<T: Scalar>(t: &Tensor<T>, name: &str) -> Result<[usize; 4]> {
    match t.shape() {
        &[a, b, c, d] => Ok([a, b, c, d]),
        s => Err(dim_err!("{name}: expected a 4-D tensor, got {s:?}")),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Im2ColShape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub oh: usize,
    pub ow: usize,
    pub geom: Conv2dGeometry,
}

impl Im2ColShape {
    fn patch_len(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn columns(&self) -> usize {
        self.n * self.oh * self.ow
    }

    /// Input coordinate for output coordinate `o` and kernel tap `k`, if it
    /// falls inside the unpadded input.
    #[inline]
    fn source(&self, o: usize, k: usize, limit: usize) -> Option<usize> {
        (o * self.geom.stride + k)
            .checked_sub(self.geom.padding)
            .filter(|&i| i < limit)
    }
}

/// Unfolds an `N×C×H×W` batch into a `(C·kh·kw) × (N·oh·ow)` matrix.
pub(crate) fn im2col_batch<T: Scalar>(input: &[T], s: Im2ColShape) -> Vec<T> {
    let cols = s.columns();
    let plane = s.oh * s.ow;
    let mut out = vec![T::zero(); s.patch_len() * cols];
    parallel::for_each_chunk_mut(&mut out, cols, cols, |row, dst| {
        let c = row / (s.kh * s.kw);
        let ki = (row / s.kw) % s.kh;
        let kj = row % s.kw;
        for n in 0..s.n {
            let src = &input[(n * s.c + c) * s.h * s.w..(n * s.c + c + 1) * s.h * s.w];
            let dst = &mut dst[n * plane..(n + 1) * plane];
            for oy in 0..s.oh {
                let Some(iy) = s.source(oy, ki, s.h) else { continue };
                for ox in 0..s.ow {
                    if let Some(ix) = s.source(ox, kj, s.w) {
                        dst[oy * s.ow + ox] = src[iy * s.w + ix];
                    }
                }
            }
        }
    });
    out
}

/// Adjoint of [`im2col_batch`]: scatter-adds columns back into an
/// `N×C×H×W` buffer.
pub(crate) fn col2im_batch<T: Scalar>(cols: &[T], s: Im2ColShape) -> Vec<T> {
    let ncols = s.columns();
    let plane = s.oh * s.ow;
    let sample = s.c * s.h * s.w;
    let mut out = vec![T::zero(); s.n * sample];
    parallel::for_each_chunk_mut(&mut out, sample, s.patch_len() * plane, |n, dst| {
        for row in 0..s.patch_len() {
            let c = row / (s.kh * s.kw);
            let ki = (row / s.kw) % s.kh;
            let kj = row % s.kw;
            let src = &cols[row * ncols + n * plane..row * ncols + (n + 1) * plane];
            let img = &mut dst[c * s.h * s.w..(c + 1) * s.h * s.w];
            for oy in 0..s.oh {
                let Some(iy) = s.source(oy, ki, s.h) else { continue };
                for ox in 0..s.ow {
                    if let Some(ix) = s.source(ox, kj, s.w) {
                        img[iy * s.w + ix] += src[oy * s.ow + ox];
                    }
                }
            }
        }
    });
    out
}

/// Reorders an `N×K×P` buffer into a `K×(N·P)` matrix.
pub(crate) fn batch_to_channel_major<T: Scalar>(src: &[T], n: usize, k: usize, p: usize) -> Vec<T> {
    let mut out = vec![T::zero(); src.len()];
    for ni in 0..n {
        for ki in 0..k {
            out[ki * n * p + ni * p..ki * n * p + (ni + 1) * p]
                .copy_from_slice(&src[(ni * k + ki) * p..(ni * k + ki + 1) * p]);
        }
    }
    out
}

/// Inverse of [`batch_to_channel_major`].
pub(crate) fn channel_major_to_batch<T: Scalar>(src: &[T], n: usize, k: usize, p: usize) -> Vec<T> {
    let mut out = vec![T::zero(); src.len()];
    for ni in 0..n {
        for ki in 0..k {
            out[(ni * k + ki) * p..(ni * k + ki + 1) * p]
                .copy_from_slice(&src[ki * n * p + ni * p..ki * n * p + (ni + 1) * p]);
        }
    }
    out
}

pub(crate) fn conv_shape<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    geom: Conv2dGeometry,
) -> Result<Im2ColShape> {
    let [n, c, h, w] = dims4(input, "conv2d input")?;
    let [_, kc, kh, kw] = dims4(kernel, "conv2d kernel")?;
    if c != kc {
        return Err(dim_err!(
            "conv2d: input has {c} channels but kernel expects {kc}"
        ));
    }
    let (oh, ow) = conv_output_hw(h, w, kh, kw, geom)?;
    Ok(Im2ColShape {
        n,
        c,
        h,
        w,
        kh,
        kw,
        oh,
        ow,
        geom,
    })
}

/// Forward convolution that also returns the unfolded input, which the
/// weight gradient reuses.
pub(crate) fn conv2d_with_cols<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    geom: Conv2dGeometry,
) -> Result<(Tensor<T>, Vec<T>, Im2ColShape)> {
    let s = conv_shape(input, kernel, geom)?;
    let k = kernel.dim(0);
    let cols = im2col_batch(input.data(), s);
    let mut out = vec![T::zero(); k * s.columns()];
    matmul_into(kernel.data(), &cols, &mut out, k, s.patch_len(), s.columns());
    let out = channel_major_to_batch(&out, s.n, k, s.oh * s.ow);
    let t = Tensor::from_parts(vec![s.n, k, s.oh, s.ow], out).finite()?;
    Ok((t, cols, s))
}

/// Cross-correlation of `input: N×C×H×W` with `kernel: K×C×kh×kw` under zero
/// padding. No kernel flip.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    geom: Conv2dGeometry,
) -> Result<Tensor<T>> {
    conv2d_with_cols(input, kernel, geom).map(|(t, _, _)| t)
}

/// Adjoint of [`conv2d`] with respect to its input: maps `grad_out: N×K×H'×W'`
/// back to `N×C×H×W`, where `input_hw = (H, W)` is the forward input size
/// (it cannot always be recovered from `H'` when `stride > 1`).
pub fn conv2d_transpose<T: Scalar>(
    grad_out: &Tensor<T>,
    kernel: &Tensor<T>,
    geom: Conv2dGeometry,
    input_hw: (usize, usize),
) -> Result<Tensor<T>> {
    let [n, k, oh, ow] = dims4(grad_out, "conv2d_transpose grad")?;
    let [kk, c, kh, kw] = dims4(kernel, "conv2d_transpose kernel")?;
    if k != kk {
        return Err(dim_err!(
            "conv2d_transpose: gradient has {k} channels but kernel has {kk} filters"
        ));
    }
    let (h, w) = input_hw;
    let expected = conv_output_hw(h, w, kh, kw, geom)?;
    if expected != (oh, ow) {
        return Err(dim_err!(
            "conv2d_transpose: {h}x{w} input gives {expected:?} outputs, gradient is {oh}x{ow}"
        ));
    }
    let s = Im2ColShape {
        n,
        c,
        h,
        w,
        kh,
        kw,
        oh,
        ow,
        geom,
    };
    Tensor::from_parts(
        vec![n, c, h, w],
        input_grad_from_output(grad_out.data(), kernel.data(), k, s),
    )
    .finite()
}

pub(crate) fn input_grad_from_output<T: Scalar>(
    grad_out: &[T],
    kernel: &[T],
    k: usize,
    s: Im2ColShape,
) -> Vec<T> {
    let gm = batch_to_channel_major(grad_out, s.n, k, s.oh * s.ow);
    let mut cols = vec![T::zero(); s.patch_len() * s.columns()];
    matmul_tn_into(kernel, &gm, &mut cols, k, s.patch_len(), s.columns());
    col2im_batch(&cols, s)
}

/// Kernel gradient `K×C×kh×kw` from the unfolded forward input.
pub(crate) fn kernel_grad_from_cols<T: Scalar>(
    grad_out: &[T],
    cols: &[T],
    k: usize,
    s: Im2ColShape,
) -> Vec<T> {
    let gm = batch_to_channel_major(grad_out, s.n, k, s.oh * s.ow);
    let mut out = vec![T::zero(); k * s.patch_len()];
    super::linalg::matmul_nt_into(&gm, cols, &mut out, k, s.columns(), s.patch_len());
    out
}
