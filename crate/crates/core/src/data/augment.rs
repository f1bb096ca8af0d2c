//! Per-sample random flip, pad-and-crop and rotation.
//!
//! Samples outside the image (crop padding, rotation corners) take the
//! nearest edge pixel, so constant images stay constant.

use rand::Rng;

use crate::error::{dim_err, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct AugmentFlags {
    pub flip: bool,
    pub crop_pad: usize,
    pub rotate_deg: f64,
}

impl AugmentFlags {
    pub fn is_identity(&self) -> bool {
        !self.flip && self.crop_pad == 0 && self.rotate_deg == 0.0
    }
}

/// Mirrors every channel of one `C×H×W` sample left to right.
pub fn hflip<T: Scalar>(sample: &mut [T], w: usize) {
    for row in sample.chunks_exact_mut(w) {
        row.reverse();
    }
}

/// Resamples each channel with `src(y, x)`, clamping to the image.
fn resample<T: Scalar>(sample: &mut [T], h: usize, w: usize, src: impl Fn(usize, usize) -> (isize, isize)) {
    let plane = h * w;
    let mut out = vec![T::zero(); sample.len()];
    for (dst, from) in out.chunks_exact_mut(plane).zip(sample.chunks_exact(plane)) {
        for y in 0..h {
            for x in 0..w {
                let (sy, sx) = src(y, x);
                let sy = sy.clamp(0, h as isize - 1) as usize;
                let sx = sx.clamp(0, w as isize - 1) as usize;
                dst[y * w + x] = from[sy * w + sx];
            }
        }
    }
    sample.copy_from_slice(&out);
}

/// Applies the enabled augmentations to each sample of an `N×C×H×W` batch.
/// Per sample the draws are: flip coin, crop offsets, rotation angle, each
/// only when its augmentation is enabled.
pub fn augment<T: Scalar, R: Rng + ?Sized>(batch: &Tensor<T>, flags: &AugmentFlags, rng: &mut R) -> Result<Tensor<T>> {
    let &[_, _, h, w] = batch.shape() else {
        return Err(dim_err!("augment expects N×C×H×W, got {:?}", batch.shape()));
    };
    let mut out = batch.clone();
    if flags.is_identity() {
        return Ok(out);
    }
    let n = out.dim(0);
    for i in 0..n {
        let sample = out.outer_mut(i);
        if flags.flip && rng.gen::<bool>() {
            hflip(sample, w);
        }
        if flags.crop_pad > 0 {
            let pad = flags.crop_pad as isize;
            let dy = rng.gen_range(0..=2 * pad) - pad;
            let dx = rng.gen_range(0..=2 * pad) - pad;
            resample(sample, h, w, |y, x| (y as isize + dy, x as isize + dx));
        }
        if flags.rotate_deg > 0.0 {
            let angle = rng.gen_range(-flags.rotate_deg..=flags.rotate_deg).to_radians();
            let (sin, cos) = angle.sin_cos();
            let cy = (h as f64 - 1.0) / 2.0;
            let cx = (w as f64 - 1.0) / 2.0;
            resample(sample, h, w, |y, x| {
                let (ry, rx) = (y as f64 - cy, x as f64 - cx);
                let sy = cos * ry - sin * rx + cy;
                let sx = sin * ry + cos * rx + cx;
                (sy.round() as isize, sx.round() as isize)
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ramp() -> Tensor<f64> {
        Tensor::from_fn(&[2, 3, 5, 5], |i| i as f64).unwrap()
    }

    #[test]
    fn no_flags_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = ramp();
        assert!(augment(&x, &AugmentFlags::default(), &mut rng).unwrap().bit_eq(&x));
    }

    #[test]
    fn flip_twice_is_identity() {
        let x = ramp();
        let mut y = x.clone();
        hflip(y.outer_mut(0), 5);
        assert!(!y.bit_eq(&x));
        assert_eq!(y.data()[0], 4.0);
        hflip(y.outer_mut(0), 5);
        assert!(y.bit_eq(&x));
    }

    #[test]
    fn constant_images_stay_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f32>::full(&[4, 1, 6, 6], 0.7).unwrap();
        let flags = AugmentFlags {
            flip: true,
            crop_pad: 2,
            rotate_deg: 15.0,
        };
        let y = augment(&x, &flags, &mut rng).unwrap();
        assert!(y.bit_eq(&x));
    }

    #[test]
    fn crop_shifts_content() {
        let x = ramp();
        let flags = AugmentFlags {
            crop_pad: 1,
            ..Default::default()
        };
        let mut seen_shift = false;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let y = augment(&x, &flags, &mut rng).unwrap();
            seen_shift |= !y.bit_eq(&x);
            assert!(y.data().iter().all(|v| x.data().contains(v)));
        }
        assert!(seen_shift);
    }

    #[test]
    fn zero_degree_rotation_draws_nothing() {
        let x = ramp();
        let flags = AugmentFlags {
            rotate_deg: 0.0,
            flip: true,
            ..Default::default()
        };
        let mut a = ChaCha8Rng::seed_from_u64(3);
        let mut b = ChaCha8Rng::seed_from_u64(3);
        augment(&x, &flags, &mut a).unwrap();
        for _ in 0..2 {
            let _: bool = b.gen();
        }
        assert_eq!(a.gen::<u64>(), b.gen::<u64>());
    }
}
