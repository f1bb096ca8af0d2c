use super::{Scalar, Tensor};
use crate::error::{dim_err, Result};
use crate::parallel;

/// Flat input index chosen by each pooled output, for routing gradients back.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PoolIndices {
    pub input_shape: Vec<usize>,
    pub argmax: Vec<usize>,
}

/// Max pooling without padding over `N×C×H×W`. Ties resolve to the lowest
/// flat input index.
pub fn maxpool2d<T: Scalar>(
    input: &Tensor<T>,
    window: usize,
    stride: usize,
) -> Result<(Tensor<T>, PoolIndices)> {
    let &[n, c, h, w] = input.shape() else {
        return Err(dim_err!("maxpool2d: expected 4-D input, got {:?}", input.shape()));
    };
    if window == 0 || stride == 0 {
        return Err(dim_err!("maxpool2d: window and stride must be positive"));
    }
    if window > h || window > w {
        return Err(dim_err!("maxpool2d: window {window} exceeds {h}x{w} input"));
    }
    let oh = (h - window) / stride + 1;
    let ow = (w - window) / stride + 1;
    let plane_out = oh * ow;
    let src = input.data();

    let mut argmax = vec![0usize; n * c * plane_out];
    parallel::for_each_chunk_mut(&mut argmax, plane_out, plane_out * window * window, |p, idx| {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * stride * w + ox * stride;
                for i in 0..window {
                    for j in 0..window {
                        let at = base + (oy * stride + i) * w + ox * stride + j;
                        if src[at] > src[best] {
                            best = at;
                        }
                    }
                }
                idx[oy * ow + ox] = best;
            }
        }
    });
    let out = argmax.iter().map(|&i| src[i]).collect();
    Ok((
        Tensor::from_parts(vec![n, c, oh, ow], out),
        PoolIndices {
            input_shape: input.shape().to_vec(),
            argmax,
        },
    ))
}

/// Routes `grad_out` to the recorded argmax positions, summing where
/// windows overlap.
pub fn maxpool2d_backward<T: Scalar>(grad_out: &Tensor<T>, indices: &PoolIndices) -> Result<Tensor<T>> {
    if grad_out.len() != indices.argmax.len() {
        return Err(dim_err!(
            "maxpool2d_backward: {} gradients for {} pooled outputs",
            grad_out.len(),
            indices.argmax.len()
        ));
    }
    let total: usize = indices.input_shape.iter().product();
    let mut out = vec![T::zero(); total];
    for (&i, &g) in indices.argmax.iter().zip(grad_out.data()) {
        out[i] += g;
    }
    Ok(Tensor::from_parts(indices.input_shape.clone(), out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn two_by_two() {
        let x = Tensor::<f64>::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (y, idx) = maxpool2d(&x, 2, 2).unwrap();
        assert_eq!(y.data(), &[4.0]);
        assert_eq!(idx.argmax, vec![3]);
    }

    #[test]
    fn constant_input_picks_first_index() {
        let x = Tensor::<f64>::full(&[1, 2, 4, 4], 7.0).unwrap();
        let (y, idx) = maxpool2d(&x, 2, 2).unwrap();
        assert!(y.data().iter().all(|&v| v == 7.0));
        assert_eq!(&idx.argmax[..4], &[0, 2, 8, 10]);
        assert_eq!(idx.argmax[4], 16);
    }

    #[test]
    fn matches_naive_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::<f64>::from_fn(&[1, 1, 6, 6], |_| rng.gen()).unwrap();
        let (y, _) = maxpool2d(&x, 3, 3).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        for oy in 0..2 {
            for ox in 0..2 {
                let mut m = f64::NEG_INFINITY;
                for i in 0..3 {
                    for j in 0..3 {
                        m = m.max(x.data()[(oy * 3 + i) * 6 + ox * 3 + j]);
                    }
                }
                assert_eq!(y.data()[oy * 2 + ox], m);
            }
        }
    }

    #[test]
    fn overlapping_windows_accumulate() {
        let x = Tensor::<f64>::new(&[1, 1, 1, 3], vec![0.0, 5.0, 1.0]).unwrap();
        assert!(maxpool2d(&x, 2, 1).is_err());
        let x = Tensor::<f64>::new(&[1, 1, 3, 3], vec![0., 0., 0., 0., 9., 0., 0., 0., 0.]).unwrap();
        let (y, idx) = maxpool2d(&x, 2, 1).unwrap();
        assert!(y.data().iter().all(|&v| v == 9.0));
        let g = maxpool2d_backward(&Tensor::<f64>::ones(y.shape()).unwrap(), &idx).unwrap();
        assert_eq!(g.data()[4], 4.0);
        assert_eq!(g.sum(), 4.0);
    }
}
