//! Eager tensor operations. The autodiff graph reuses these kernels for its
//! forward pass, so the two paths agree bit-for-bit.

use super::scalar::{Scalar, Strides};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-6;

pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.dims2("matmul")?;
    let (k2, n) = b.dims2("matmul")?;
    if k != k2 {
        return Err(Error::shape(
            "matmul",
            format!("inner dimensions differ: [{m},{k}] x [{k2},{n}]"),
        ));
    }
    let mut out = vec![T::zero(); m * n];
    T::gemm(
        m,
        k,
        n,
        a.data(),
        Strides::row_major(k),
        b.data(),
        Strides::row_major(n),
        &mut out,
        Strides::row_major(n),
        false,
    );
    Tensor::from_vec(&[m, n], out)
}

/// Softmax of one contiguous slice in place. Entries equal to `-inf` become
/// exactly zero; a slice with no finite entry is rejected.
pub(crate) fn softmax_slice<T: Scalar>(row: &mut [T]) -> Result<()> {
    let max = row
        .iter()
        .copied()
        .fold(T::neg_infinity(), |m, v| if v > m { v } else { m });
    if max == T::neg_infinity() {
        return Err(Error::domain("softmax", "every entry of a slice is -inf"));
    }
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = if *v == T::neg_infinity() {
            T::zero()
        } else {
            (*v - max).exp()
        };
        total = total + *v;
    }
    for v in row.iter_mut() {
        *v = *v / total;
    }
    Ok(())
}

/// Softmax along `axis`, subtracting the per-slice maximum first.
pub fn softmax<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let shape = x.shape();
    if axis >= shape.len() {
        return Err(Error::shape(
            "softmax",
            format!("axis {axis} out of range for {shape:?}"),
        ));
    }
    let n = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut out = x.clone();
    let data = out.data_mut();
    let mut buf = vec![T::zero(); n];
    for o in 0..outer {
        for i in 0..inner {
            for (j, b) in buf.iter_mut().enumerate() {
                *b = data[(o * n + j) * inner + i];
            }
            softmax_slice(&mut buf)?;
            for (j, &b) in buf.iter().enumerate() {
                data[(o * n + j) * inner + i] = b;
            }
        }
    }
    Ok(out)
}

/// Logistic function clamped to the open interval `(eps, 1 - eps)`.
#[inline]
pub fn sigmoid_scalar<T: Scalar>(x: T) -> T {
    let one = T::one();
    let y = if x >= T::zero() {
        one / (one + (-x).exp())
    } else {
        let e = x.exp();
        e / (one + e)
    };
    let eps = T::epsilon();
    y.max(eps).min(one - eps)
}

#[inline]
pub fn softplus_scalar<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

/// Tanh-approximated GELU.
#[inline]
pub fn gelu_scalar<T: Scalar>(x: T) -> T {
    let k = T::from_f64_lossy(GELU_K);
    let c = T::from_f64_lossy(GELU_C);
    let half = T::from_f64_lossy(0.5);
    half * x * (T::one() + (k * (x + c * x * x * x)).tanh())
}

#[inline]
pub(crate) fn gelu_grad_scalar<T: Scalar>(x: T) -> T {
    let k = T::from_f64_lossy(GELU_K);
    let c = T::from_f64_lossy(GELU_C);
    let half = T::from_f64_lossy(0.5);
    let three = T::from_f64_lossy(3.0);
    let t = (k * (x + c * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * k * (T::one() + three * c * x * x)
}

pub fn sigmoid<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(sigmoid_scalar)
}

pub fn softplus<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(softplus_scalar)
}

pub fn gelu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(gelu_scalar)
}

pub fn exp<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v.exp())
}

/// Normalizes over the last axis, then applies `gain` and `bias`.
/// Also returns per-row mean and reciprocal std for the backward pass.
pub(crate) fn layer_norm_stats<T: Scalar>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<(Tensor<T>, Vec<T>, Vec<T>)> {
    let c = x.last_dim();
    if gain.shape() != [c] || bias.shape() != [c] {
        return Err(Error::shape(
            "layer_norm",
            format!(
                "channel width {c} vs gain {:?} / bias {:?}",
                gain.shape(),
                bias.shape()
            ),
        ));
    }
    let rows = x.numel() / c;
    let eps = T::from_f64_lossy(LAYER_NORM_EPS);
    let inv_c = T::one() / T::from_usize(c).unwrap();
    let mut out = vec![T::zero(); x.numel()];
    let mut means = Vec::with_capacity(rows);
    let mut rstds = Vec::with_capacity(rows);
    let (g, b) = (gain.data(), bias.data());
    for (row, dst) in x.data().chunks_exact(c).zip(out.chunks_exact_mut(c)) {
        let mean = row.iter().fold(T::zero(), |a, &v| a + v) * inv_c;
        let var = row
            .iter()
            .fold(T::zero(), |a, &v| a + (v - mean) * (v - mean))
            * inv_c;
        let rstd = T::one() / (var + eps).sqrt();
        for j in 0..c {
            dst[j] = (row[j] - mean) * rstd * g[j] + b[j];
        }
        means.push(mean);
        rstds.push(rstd);
    }
    Ok((Tensor::from_vec(x.shape(), out)?, means, rstds))
}

pub fn layer_norm<T: Scalar>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    layer_norm_stats(x, gain, bias).map(|(y, _, _)| y)
}

/// Mean over the channel (last) axis: `[L, C] -> [L, 1]`.
pub fn channel_gap<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (l, c) = x.dims2("channel_gap")?;
    let inv = T::one() / T::from_usize(c).unwrap();
    let out = x
        .data()
        .chunks_exact(c)
        .map(|row| row.iter().fold(T::zero(), |a, &v| a + v) * inv)
        .collect();
    Tensor::from_vec(&[l, 1], out)
}

/// Unfolds `[c, h, w]` into `[c*k*k, h*w]` patches with zero "same" padding.
pub(crate) fn im2col<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, k: usize) -> Vec<T> {
    let pad = (k / 2) as isize;
    let hw = h * w;
    let mut cols = vec![T::zero(); c * k * k * hw];
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for xx in 0..w {
                        let sx = xx as isize + kx as isize - pad;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        dst[y * w + xx] = x[(ci * h + sy as usize) * w + sx as usize];
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: folds patch gradients back onto the image.
pub(crate) fn col2im<T: Scalar>(cols: &[T], c: usize, h: usize, w: usize, k: usize) -> Vec<T> {
    let pad = (k / 2) as isize;
    let hw = h * w;
    let mut x = vec![T::zero(); c * hw];
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for xx in 0..w {
                        let sx = xx as isize + kx as isize - pad;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let d = (ci * h + sy as usize) * w + sx as usize;
                        x[d] = x[d] + src[y * w + xx];
                    }
                }
            }
        }
    }
    x
}

pub(crate) fn conv_dims<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<(usize, usize, usize, usize, usize)> {
    let (ci, h, w) = match x.shape() {
        &[c, h, w] => (c, h, w),
        s => return Err(Error::shape("conv2d", format!("input must be [c,h,w], got {s:?}"))),
    };
    let (co, ci2, k) = match weight.shape() {
        &[o, i, kh, kw] if kh == kw => (o, i, kh),
        s => {
            return Err(Error::shape(
                "conv2d",
                format!("kernel must be [c_out,c_in,k,k], got {s:?}"),
            ))
        }
    };
    if k % 2 == 0 {
        return Err(Error::shape("conv2d", format!("kernel size {k} must be odd")));
    }
    if ci != ci2 {
        return Err(Error::shape(
            "conv2d",
            format!("input has {ci} channels, kernel expects {ci2}"),
        ));
    }
    if bias.shape() != [co] {
        return Err(Error::shape(
            "conv2d",
            format!("bias {:?} vs {co} output channels", bias.shape()),
        ));
    }
    Ok((ci, h, w, co, k))
}

/// Stride-1 "same" cross-correlation: `[c_in,h,w] -> [c_out,h,w]`.
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (ci, h, w, co, k) = conv_dims(x, weight, bias)?;
    let cols = im2col(x.data(), ci, h, w, k);
    conv_from_cols(&cols, weight, bias, co, ci * k * k, h, w)
}

pub(crate) fn conv_from_cols<T: Scalar>(
    cols: &[T],
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    co: usize,
    kk: usize,
    h: usize,
    w: usize,
) -> Result<Tensor<T>> {
    let hw = h * w;
    let mut out = vec![T::zero(); co * hw];
    for (o, row) in out.chunks_exact_mut(hw).enumerate() {
        row.fill(bias.data()[o]);
    }
    T::gemm(
        co,
        kk,
        hw,
        weight.data(),
        Strides::row_major(kk),
        cols,
        Strides::row_major(hw),
        &mut out,
        Strides::row_major(hw),
        true,
    );
    Tensor::from_vec(&[co, h, w], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn matmul_identity_and_dot() {
        let eye = t(&[2, 2], &[1., 0., 0., 1.]);
        let m = t(&[2, 2], &[1., 2., 3., 4.]);
        assert_eq!(matmul(&eye, &m).unwrap(), m);
        let r = matmul(&t(&[1, 2], &[1., 2.]), &t(&[2, 1], &[3., 4.])).unwrap();
        assert_eq!(r.data(), &[11.0]);
        assert!(matches!(
            matmul(&m, &t(&[3, 1], &[1., 1., 1.])),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn softmax_examples() {
        let s = softmax(&t(&[2], &[0., 0.]), 0).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
        let ninf = f64::NEG_INFINITY;
        let s = softmax(&t(&[4], &[2., 1., ninf, ninf]), 0).unwrap();
        let e = 1f64.exp();
        let p = e * e / (e * e + e);
        assert!((s.data()[0] - p).abs() < 1e-12);
        assert!((s.data()[1] - (1. - p)).abs() < 1e-12);
        assert_eq!(&s.data()[2..], &[0.0, 0.0]);
        assert!((p - 0.7311).abs() < 1e-4);
        let big = softmax(&t(&[2], &[1000., 999.]), 0).unwrap();
        assert!((big.data()[0] - p).abs() < 1e-12);
        assert!(matches!(
            softmax(&t(&[2], &[ninf, ninf]), 0),
            Err(Error::Domain { .. })
        ));
    }

    #[test]
    fn softmax_along_leading_axis() {
        let x = t(&[2, 3], &[0., 1., 2., 0., 1., 2.]);
        let s = softmax(&x, 0).unwrap();
        assert!(s.data().iter().all(|&v| (v - 0.5).abs() < 1e-15));
        let s = softmax(&x, 1).unwrap();
        assert!((s.data()[..3].iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn activations() {
        assert_eq!(sigmoid_scalar(0.0f64), 0.5);
        assert!((softplus_scalar(0.0f64) - 2f64.ln()).abs() < 1e-15);
        assert!((softplus_scalar(50.0f64) - 50.0).abs() < 1e-6);
        assert!(softplus_scalar(-800.0f64) >= 0.0);
        let hi = sigmoid_scalar(1e4f32);
        assert!(hi < 1.0 && hi > 0.99);
        let lo = sigmoid_scalar(-1e4f32);
        assert!(lo > 0.0);
        assert_eq!(gelu_scalar(0.0f64), 0.0);
    }

    #[test]
    fn layer_norm_examples() {
        let ones = Tensor::<f64>::ones(&[2]);
        let zeros = Tensor::<f64>::zeros(&[2]);
        let y = layer_norm(&t(&[1, 2], &[1., 3.]), &ones, &zeros).unwrap();
        assert!((y.data()[0] + 1.0).abs() < 1e-5 && (y.data()[1] - 1.0).abs() < 1e-5);
        let y = layer_norm(&t(&[1, 2], &[4., 4.]), &ones, &zeros).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0]);
        let sevens = Tensor::full(&[2], 7.0);
        let y = layer_norm(&t(&[2, 2], &[1., 5., -2., 9.]), &zeros, &sevens).unwrap();
        assert!(y.data().iter().all(|&v| v == 7.0));
        assert!(layer_norm(&t(&[1, 3], &[1., 2., 3.]), &ones, &zeros).is_err());
    }

    #[test]
    fn channel_gap_means() {
        let y = channel_gap(&t(&[2, 2], &[1., 3., 2., 2.])).unwrap();
        assert_eq!(y.data(), &[2.0, 2.0]);
        assert_eq!(y.shape(), &[2, 1]);
        let y = channel_gap(&Tensor::<f64>::full(&[3, 5], 0.5)).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn conv_identity_and_box_filter() {
        let x = Tensor::<f64>::from_f64(&[1, 2, 2], &[1., 2., 3., 4.]).unwrap();
        let w = Tensor::ones(&[1, 1, 1, 1]);
        let b = Tensor::zeros(&[1]);
        assert_eq!(conv2d(&x, &w, &b).unwrap(), x);

        let x = Tensor::<f64>::ones(&[1, 3, 3]);
        let w = Tensor::ones(&[1, 1, 3, 3]);
        let y = conv2d(&x, &w, &b).unwrap();
        assert_eq!(y.get(&[0, 1, 1]), 9.0);
        assert_eq!(y.get(&[0, 0, 0]), 4.0);
        assert_eq!(y.get(&[0, 2, 2]), 4.0);
        assert_eq!(y.get(&[0, 0, 1]), 6.0);

        let w2 = Tensor::ones(&[1, 2, 3, 3]);
        assert!(conv2d(&x, &w2, &b).is_err());
        let even = Tensor::ones(&[1, 1, 2, 2]);
        assert!(conv2d(&x, &even, &b).is_err());
    }
}
