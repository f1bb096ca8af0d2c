use super::{dot, Scalar, Tensor};
use crate::error::{dim_err, Result};
use crate::parallel;

fn as_matrix<T: Scalar>(t: &Tensor<T>, name: &str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(dim_err!("{name}: expected a matrix, got shape {s:?}")),
    }
}

impl<T: Scalar> Tensor<T> {
    /// `self · other` for `self: r×k`, `other: k×c`.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let (r, k) = as_matrix(self, "matmul lhs")?;
        let (k2, c) = as_matrix(other, "matmul rhs")?;
        if k != k2 {
            return Err(dim_err!("matmul: inner dimensions {k} and {k2} differ"));
        }
        let mut out = vec![T::zero(); r * c];
        matmul_into(self.data(), other.data(), &mut out, r, k, c);
        Tensor::from_parts(vec![r, c], out).finite()
    }

    /// `self · otherᵀ` for `self: r×k`, `other: c×k`.
    pub fn matmul_nt(&self, other: &Self) -> Result<Self> {
        let (r, k) = as_matrix(self, "matmul_nt lhs")?;
        let (c, k2) = as_matrix(other, "matmul_nt rhs")?;
        if k != k2 {
            return Err(dim_err!("matmul_nt: inner dimensions {k} and {k2} differ"));
        }
        let mut out = vec![T::zero(); r * c];
        matmul_nt_into(self.data(), other.data(), &mut out, r, k, c);
        Tensor::from_parts(vec![r, c], out).finite()
    }

    /// `selfᵀ · other` for `self: k×r`, `other: k×c`.
    pub fn matmul_tn(&self, other: &Self) -> Result<Self> {
        let (k, r) = as_matrix(self, "matmul_tn lhs")?;
        let (k2, c) = as_matrix(other, "matmul_tn rhs")?;
        if k != k2 {
            return Err(dim_err!("matmul_tn: inner dimensions {k} and {k2} differ"));
        }
        let mut out = vec![T::zero(); r * c];
        matmul_tn_into(self.data(), other.data(), &mut out, k, r, c);
        Tensor::from_parts(vec![r, c], out).finite()
    }

    pub fn transpose(&self) -> Result<Self> {
        let (r, c) = as_matrix(self, "transpose")?;
        let src = self.data();
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        Ok(Tensor::from_parts(vec![c, r], out))
    }

    /// Per-column maximum of an `r×c` matrix.
    pub fn column_max(&self) -> Result<Self> {
        let (r, c) = as_matrix(self, "column_max")?;
        let src = self.data();
        let mut out = src[..c].to_vec();
        for i in 1..r {
            for (m, &v) in out.iter_mut().zip(&src[i * c..(i + 1) * c]) {
                if v > *m {
                    *m = v;
                }
            }
        }
        Ok(Tensor::from_parts(vec![c], out))
    }
}

// The raw kernels below parallelize over output rows only; each output
// element is accumulated in the same order regardless of threading.

pub(crate) fn matmul_into<T: Scalar>(a: &[T], b: &[T], out: &mut [T], r: usize, k: usize, c: usize) {
    debug_assert_eq!(out.len(), r * c);
    parallel::for_each_chunk_mut(out, c, k * c, |i, row| {
        row.iter_mut().for_each(|v| *v = T::zero());
        let a_row = &a[i * k..(i + 1) * k];
        for (kk, &av) in a_row.iter().enumerate() {
            let b_row = &b[kk * c..(kk + 1) * c];
            for (o, &bv) in row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    });
}

pub(crate) fn matmul_nt_into<T: Scalar>(a: &[T], b: &[T], out: &mut [T], r: usize, k: usize, c: usize) {
    debug_assert_eq!(out.len(), r * c);
    parallel::for_each_chunk_mut(out, c, k * c, |i, row| {
        let a_row = &a[i * k..(i + 1) * k];
        for (j, o) in row.iter_mut().enumerate() {
            *o = dot(a_row, &b[j * k..(j + 1) * k]);
        }
    });
}

pub(crate) fn matmul_tn_into<T: Scalar>(a: &[T], b: &[T], out: &mut [T], k: usize, r: usize, c: usize) {
    debug_assert_eq!(out.len(), r * c);
    parallel::for_each_chunk_mut(out, c, k * c, |i, row| {
        row.iter_mut().for_each(|v| *v = T::zero());
        for kk in 0..k {
            let av = a[kk * r + i];
            let b_row = &b[kk * c..(kk + 1) * c];
            for (o, &bv) in row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    });
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0)).unwrap()
    }

    fn naive_matmul(a: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
        let (r, k, c) = (a.dim(0), a.dim(1), b.dim(1));
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                for kk in 0..k {
                    out[i * c + j] += a.data()[i * k + kk] * b.data()[kk * c + j];
                }
            }
        }
        out
    }

    #[test]
    fn identity_and_hand_cases() {
        let eye = Tensor::<f64>::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let col = Tensor::new(&[2, 1], vec![3.0, 4.0]).unwrap();
        assert_eq!(eye.matmul(&col).unwrap().data(), &[3.0, 4.0]);
        let row = Tensor::new(&[1, 2], vec![1.0, 2.0]).unwrap();
        let prod = row.matmul(&col).unwrap();
        assert_eq!(prod.shape(), &[1, 1]);
        assert_eq!(prod.data(), &[11.0]);
    }

    #[test]
    fn matches_naive_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random(&[5, 7], &mut rng);
        let b = random(&[7, 3], &mut rng);
        let fast = a.matmul(&b).unwrap();
        for (x, y) in fast.data().iter().zip(naive_matmul(&a, &b)) {
            assert!((x - y).abs() < 1e-12);
        }
        let nt = a.matmul_nt(&b.transpose().unwrap()).unwrap();
        let tn = a.transpose().unwrap().matmul_tn(&b).unwrap();
        for ((x, y), z) in fast.data().iter().zip(nt.data()).zip(tn.data()) {
            assert!((x - y).abs() < 1e-12 && (x - z).abs() < 1e-12);
        }
    }

    #[test]
    fn inner_dimension_mismatch() {
        let a = Tensor::<f64>::zeros(&[2, 3]).unwrap();
        assert!(a.matmul(&a).is_err());
        assert!(a.matmul_nt(&Tensor::zeros(&[2, 2]).unwrap()).is_err());
        assert!(Tensor::<f64>::zeros(&[2]).unwrap().matmul(&a).is_err());
    }

    #[test]
    fn column_max_cases() {
        let w = Tensor::<f64>::new(&[2, 2], vec![1.0, 5.0, 3.0, 2.0]).unwrap();
        assert_eq!(w.column_max().unwrap().data(), &[3.0, 5.0]);
        let single = Tensor::<f64>::new(&[1, 3], vec![-1.0, 0.5, 2.0]).unwrap();
        assert_eq!(single.column_max().unwrap().data(), single.data());

        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let big = random(&[100, 20], &mut rng);
        let got = big.column_max().unwrap();
        for j in 0..20 {
            let scan = (0..100)
                .map(|i| big.data()[i * 20 + j])
                .fold(f64::NEG_INFINITY, f64::max);
            assert_eq!(got.data()[j], scan);
        }
        assert!(Tensor::<f64>::zeros(&[4]).unwrap().column_max().is_err());
    }
}
