//! Binary masks. A 1 marks a position that gets distorted (or dropped).

use rand::Rng;

use crate::error::{config_err, dim_err, Result};
use crate::tensor::{Scalar, Tensor};

fn check_p(p: f64) -> Result<()> {
    if !(0.0..1.0).contains(&p) {
        return Err(config_err!("drop probability {p} outside [0, 1)"));
    }
    Ok(())
}

/// I.i.d. Bernoulli(`p`) mask. Draws exactly one uniform per element.
pub fn sample_element_mask<T: Scalar, R: Rng + ?Sized>(
    shape: &[usize],
    p: f64,
    rng: &mut R,
) -> Result<Tensor<T>> {
    check_p(p)?;
    Tensor::from_fn(shape, |_| {
        if rng.gen::<f64>() < p {
            T::one()
        } else {
            T::zero()
        }
    })
}

/// Seed rate that makes a `block_size` block mask cover roughly a fraction
/// `p` of an `h×w` map.
pub fn block_seed_rate(p: f64, h: usize, w: usize, block_size: usize) -> f64 {
    let valid = ((h - block_size + 1) * (w - block_size + 1)) as f64;
    p * (h * w) as f64 / ((block_size * block_size) as f64 * valid)
}

/// DropBlock-style mask over `N×C×H×W`: seeds are drawn independently per
/// channel at every position where a full block fits, and each seed sets
/// the `block_size × block_size` square anchored at it.
pub fn sample_block_mask<T: Scalar, R: Rng + ?Sized>(
    shape: &[usize],
    p: f64,
    block_size: usize,
    rng: &mut R,
) -> Result<Tensor<T>> {
    check_p(p)?;
    let &[n, c, h, w] = shape else {
        return Err(dim_err!("block mask needs an N×C×H×W shape, got {shape:?}"));
    };
    if block_size == 0 || block_size > h.min(w) {
        return Err(config_err!(
            "block_size {block_size} does not fit a {h}x{w} feature map"
        ));
    }
    let rate = block_seed_rate(p, h, w, block_size);
    let (vh, vw) = (h - block_size + 1, w - block_size + 1);
    let mut mask = Tensor::<T>::zeros(shape)?;
    let data = mask.data_mut();
    for plane in 0..n * c {
        let plane = &mut data[plane * h * w..(plane + 1) * h * w];
        for sy in 0..vh {
            for sx in 0..vw {
                if rng.gen::<f64>() >= rate {
                    continue;
                }
                for y in sy..(sy + block_size).min(h) {
                    for x in sx..(sx + block_size).min(w) {
                        plane[y * w + x] = T::one();
                    }
                }
            }
        }
    }
    Ok(mask)
}

/// Sizes of 4-connected components of ones, per `H×W` plane.
pub fn component_sizes<T: Scalar>(mask: &Tensor<T>) -> Result<Vec<usize>> {
    let &[n, c, h, w] = mask.shape() else {
        return Err(dim_err!("component_sizes needs N×C×H×W, got {:?}", mask.shape()));
    };
    let mut sizes = Vec::new();
    let mut seen = vec![false; h * w];
    let mut stack = Vec::new();
    for plane in 0..n * c {
        let m = &mask.data()[plane * h * w..(plane + 1) * h * w];
        seen.iter_mut().for_each(|s| *s = false);
        for start in 0..h * w {
            if seen[start] || m[start] == T::zero() {
                continue;
            }
            seen[start] = true;
            stack.push(start);
            let mut size = 0;
            while let Some(at) = stack.pop() {
                size += 1;
                let (y, x) = (at / w, at % w);
                let mut visit = |ny: usize, nx: usize| {
                    let j = ny * w + nx;
                    if !seen[j] && m[j] != T::zero() {
                        seen[j] = true;
                        stack.push(j);
                    }
                };
                if y > 0 {
                    visit(y - 1, x);
                }
                if y + 1 < h {
                    visit(y + 1, x);
                }
                if x > 0 {
                    visit(y, x - 1);
                }
                if x + 1 < w {
                    visit(y, x + 1);
                }
            }
            sizes.push(size);
        }
    }
    Ok(sizes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_probability_is_empty() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m: Tensor<f32> = sample_element_mask(&[4, 10], 0.0, &mut rng).unwrap();
        assert_eq!(m.sum(), 0.0);
        let b: Tensor<f32> = sample_block_mask(&[2, 3, 8, 8], 0.0, 3, &mut rng).unwrap();
        assert_eq!(b.sum(), 0.0);
    }

    #[test]
    fn element_fraction_near_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let m: Tensor<f64> = sample_element_mask(&[1000, 1000], 0.5, &mut rng).unwrap();
        let frac = m.mean();
        assert!((0.499..=0.501).contains(&frac), "{frac}");
        assert!(m.data().iter().all(|&v| v == 0.0 || v == 1.0));
    }

    #[test]
    fn same_seed_same_mask() {
        let a: Tensor<f32> =
            sample_element_mask(&[64], 0.3, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b: Tensor<f32> =
            sample_element_mask(&[64], 0.3, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert!(a.bit_eq(&b));
    }

    #[test]
    fn invalid_arguments() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_element_mask::<f32, _>(&[4], 1.0, &mut rng).is_err());
        assert!(sample_element_mask::<f32, _>(&[4], -0.1, &mut rng).is_err());
        assert!(sample_block_mask::<f32, _>(&[1, 1, 4, 4], 0.1, 5, &mut rng).is_err());
        assert!(sample_block_mask::<f32, _>(&[4, 4], 0.1, 1, &mut rng).is_err());
    }

    #[test]
    fn block_size_one_matches_element_rate() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let m: Tensor<f64> = sample_block_mask(&[10_000, 1, 10, 10], 0.3, 1, &mut rng).unwrap();
        assert!((m.mean() - 0.3).abs() < 0.005);
    }

    #[test]
    fn large_blocks_keep_rate_roughly() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let m: Tensor<f64> = sample_block_mask(&[100_000, 1, 8, 8], 0.05, 6, &mut rng).unwrap();
        let frac = m.mean();
        assert!((frac - 0.05).abs() <= 0.2 * 0.05, "{frac}");
    }

    #[test]
    fn blocks_are_contiguous_squares() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        // A low rate keeps blocks mostly isolated; every component must be
        // at least one full block.
        let m: Tensor<f64> = sample_block_mask(&[200, 1, 16, 16], 0.02, 3, &mut rng).unwrap();
        let sizes = component_sizes(&m).unwrap();
        assert!(!sizes.is_empty());
        assert!(sizes.iter().all(|&s| s >= 9));
    }
}
