#![allow(dead_code)]

use disout::{Conv2dGeometry, Tensor};

/// Direct seven-loop cross-correlation with zero padding.
pub fn naive_conv2d(x: &Tensor<f64>, k: &Tensor<f64>, geom: Conv2dGeometry) -> Tensor<f64> {
    let (n, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let (kk, kh, kw) = (k.dim(0), k.dim(2), k.dim(3));
    let (s, p) = (geom.stride, geom.padding);
    let oh = (h + 2 * p - kh) / s + 1;
    let ow = (w + 2 * p - kw) / s + 1;
    let mut out = vec![0.0; n * kk * oh * ow];
    for b in 0..n {
        for o in 0..kk {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = 0.0;
                    for ch in 0..c {
                        for i in 0..kh {
                            for j in 0..kw {
                                let iy = (y * s + i) as isize - p as isize;
                                let ix = (xx * s + j) as isize - p as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let xv = x.data()[((b * c + ch) * h + iy as usize) * w + ix as usize];
                                acc += xv * k.data()[((o * c + ch) * kh + i) * kw + j];
                            }
                        }
                    }
                    out[((b * kk + o) * oh + y) * ow + xx] = acc;
                }
            }
        }
    }
    Tensor::new(&[n, kk, oh, ow], out).unwrap()
}

pub fn naive_matmul(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    let (r, k, c) = (a.dim(0), a.dim(1), b.dim(1));
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            for t in 0..k {
                out[i * c + j] += a.data()[i * k + t] * b.data()[t * c + j];
            }
        }
    }
    Tensor::new(&[r, c], out).unwrap()
}

/// Largest elementwise difference relative to the largest magnitude.
pub fn max_rel_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    let scale = a.data().iter().chain(b.data()).fold(1.0f64, |m, v| m.max(v.abs()));
    a.data()
        .iter()
        .zip(b.data())
        .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
        / scale
}
