//! Surrogate and gradients for a feature map consumed by a convolution.
//!
//! With `G = Σ_i σ_i F̂_i` and `Q = K ⋆ G` (the next layer's own stride and
//! padding), the objective is
//! `max_k Σ_{y,x} |Q[k,y,x]| / (N·H_Q·W_Q) + λ/(2N) Σ_i ‖ε_i‖²`.

use super::fc::combine;
use super::{penalty_term, Signs, SurrogateValue};
use crate::error::{dim_err, Result};
use crate::tensor::{conv2d, conv2d_transpose, conv_output_hw, Conv2dGeometry, Scalar, Tensor};

struct ConvDims {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    q_area: usize,
}

fn check<T: Scalar>(
    k_next: &Tensor<T>,
    geom: Conv2dGeometry,
    epsilon: &Tensor<T>,
    sigma: &Signs,
) -> Result<ConvDims> {
    let &[_, kc, kh, kw] = k_next.shape() else {
        return Err(dim_err!("conv surrogate: kernel must be 4-D, got {:?}", k_next.shape()));
    };
    let &[n, c, h, w] = epsilon.shape() else {
        return Err(dim_err!("conv surrogate: features must be N×C×H×W, got {:?}", epsilon.shape()));
    };
    if kc != c {
        return Err(dim_err!("conv surrogate: kernel expects {kc} channels, features have {c}"));
    }
    if sigma.len() != n {
        return Err(dim_err!("{} signs for a batch of {n}", sigma.len()));
    }
    let (qh, qw) = conv_output_hw(h, w, kh, kw, geom)?;
    Ok(ConvDims {
        n,
        c,
        h,
        w,
        q_area: qh * qw,
    })
}

/// `Q = K ⋆ G` as a `1×K×H_Q×W_Q` tensor.
fn signed_response<T: Scalar>(
    k_next: &Tensor<T>,
    geom: Conv2dGeometry,
    distorted: &Tensor<T>,
    sigma: &Signs,
    dims: &ConvDims,
) -> Result<Tensor<T>> {
    let g = super::fc::signed_feature_sum(distorted, sigma);
    let g = Tensor::new(&[1, dims.c, dims.h, dims.w], g)?;
    conv2d(&g, k_next, geom)
}

/// Channel with the largest `Σ|Q[k]|`, lowest index on ties.
fn select_channel<T: Scalar>(q: &Tensor<T>) -> (usize, T) {
    let area = q.dim(2) * q.dim(3);
    let mut best = (0, T::neg_infinity());
    for k in 0..q.dim(1) {
        let s = q.data()[k * area..(k + 1) * area]
            .iter()
            .fold(T::zero(), |acc, v| acc + v.abs());
        if s > best.1 {
            best = (k, s);
        }
    }
    best
}

pub fn erc_surrogate_conv<T: Scalar>(
    k_next: &Tensor<T>,
    geom: Conv2dGeometry,
    distorted: &Tensor<T>,
    sigma: &Signs,
    epsilon: &Tensor<T>,
    lambda: T,
) -> Result<SurrogateValue<T>> {
    let dims = check(k_next, geom, epsilon, sigma)?;
    if distorted.shape() != epsilon.shape() {
        return Err(dim_err!("conv surrogate: features and distortion shapes differ"));
    }
    let q = signed_response(k_next, geom, distorted, sigma, &dims)?;
    let (channel, total) = select_channel(&q);
    let norm = T::from_usize(dims.n * dims.q_area).expect("size fits");
    Ok(SurrogateValue {
        sup_term: total / norm,
        penalty_term: penalty_term(epsilon, lambda, dims.n),
        selected: channel,
    })
}

/// Exact gradient via the adjoint of the next convolution:
/// `−σ_i (K[k̂] ⋆ᵀ sign(Q[k̂])) ∘ M_i / (N·H_Q·W_Q) + λ ε_i / N`.
pub fn exact_grad_conv<T: Scalar>(
    k_next: &Tensor<T>,
    geom: Conv2dGeometry,
    distorted: &Tensor<T>,
    sigma: &Signs,
    mask: &Tensor<T>,
    epsilon: &Tensor<T>,
    lambda: T,
) -> Result<Tensor<T>> {
    let dims = check(k_next, geom, epsilon, sigma)?;
    if distorted.shape() != epsilon.shape() || mask.shape() != epsilon.shape() {
        return Err(dim_err!("conv gradient: features, mask and distortion shapes differ"));
    }
    let q = signed_response(k_next, geom, distorted, sigma, &dims)?;
    let (channel, _) = select_channel(&q);
    let (qh, qw) = (q.dim(2), q.dim(3));
    let signs: Vec<T> = q.data()[channel * qh * qw..(channel + 1) * qh * qw]
        .iter()
        .map(|&v| crate::tensor::sign(v))
        .collect();
    let signs = Tensor::new(&[1, 1, qh, qw], signs)?;
    let kernel = Tensor::new(
        &[1, k_next.dim(1), k_next.dim(2), k_next.dim(3)],
        k_next.outer(channel).to_vec(),
    )?;
    let adjoint = conv2d_transpose(&signs, &kernel, geom, (dims.h, dims.w))?;
    let norm = T::from_usize(dims.n * dims.q_area).expect("size fits");
    combine(dims.n, mask, epsilon, lambda, |i| {
        let coef = -sigma.value::<T>(i) / norm;
        adjoint.data().iter().map(move |&a| coef * a)
    })
}

/// Per-(channel, tap) maximum over the filters of `K: K×C×kh×kw`.
pub fn kernel_max_conv<T: Scalar>(k_next: &Tensor<T>) -> Result<Tensor<T>> {
    let &[k, c, kh, kw] = k_next.shape() else {
        return Err(dim_err!("kernel_max_conv: kernel must be 4-D, got {:?}", k_next.shape()));
    };
    let flat = Tensor::new(&[k, c * kh * kw], k_next.data().to_vec())?;
    flat.column_max()?.reshape(&[c, kh, kw])
}

/// Randomized conv gradient. `s_prime: kh×kw` of ±1 stands in for the sign
/// pattern and `u: C×H×W` (standard normal) for the channel selection:
/// `−σ_i (Σ_{h,w} K_M[c,h,w] S′[h,w]) U[c,y,x] M_i[c,y,x] / (N·H_Q·W_Q) + λ ε_i / N`.
#[allow(clippy::too_many_arguments)]
pub fn approx_grad_conv<T: Scalar>(
    k_next: &Tensor<T>,
    geom: Conv2dGeometry,
    sigma: &Signs,
    s_prime: &Tensor<T>,
    u: &Tensor<T>,
    mask: &Tensor<T>,
    epsilon: &Tensor<T>,
    lambda: T,
) -> Result<Tensor<T>> {
    let dims = check(k_next, geom, epsilon, sigma)?;
    let (kh, kw) = (k_next.dim(2), k_next.dim(3));
    if s_prime.len() != kh * kw {
        return Err(dim_err!("S' has {} entries, kernel has {kh}x{kw} taps", s_prime.len()));
    }
    if u.len() != dims.c * dims.h * dims.w || mask.shape() != epsilon.shape() {
        return Err(dim_err!("approx conv gradient: U or mask shape disagrees with features"));
    }
    let k_max = kernel_max_conv(k_next)?;
    let taps = kh * kw;
    let plane = dims.h * dims.w;
    let channel_weight: Vec<T> = (0..dims.c)
        .map(|c| crate::tensor::dot(&k_max.data()[c * taps..(c + 1) * taps], s_prime.data()))
        .collect();
    let direction: Vec<T> = u
        .data()
        .iter()
        .enumerate()
        .map(|(j, &uv)| channel_weight[j / plane] * uv)
        .collect();
    let norm = T::from_usize(dims.n * dims.q_area).expect("size fits");
    combine(dims.n, mask, epsilon, lambda, |i| {
        let coef = -sigma.value::<T>(i) / norm;
        direction.iter().map(move |&v| coef * v)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::disout::{distorted_features, erc_surrogate_fc, exact_grad_fc, sample_element_mask};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_t(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.gen_range(lo..hi)).unwrap()
    }

    #[test]
    fn zero_response_has_zero_sup() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let k = rand_t(&[3, 2, 3, 3], -1.0, 1.0, &mut rng);
        let f = Tensor::zeros(&[2, 2, 5, 5]).unwrap();
        let v = erc_surrogate_conv(&k, Conv2dGeometry::default(), &f, &Signs::from_vec(vec![1, -1]), &f, 0.1)
            .unwrap();
        assert_eq!(v.sup_term, 0.0);
    }

    #[test]
    fn matches_naive_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let (n, c, kn, hw, ks) = (3, 2, 3, 6, 3);
        let k = rand_t(&[kn, c, ks, ks], -1.0, 1.0, &mut rng);
        let f = rand_t(&[n, c, hw, hw], 0.0, 1.0, &mut rng);
        let eps = rand_t(&[n, c, hw, hw], -1.0, 1.0, &mut rng);
        let sigma = Signs::sample(n, &mut rng);
        let v = erc_surrogate_conv(&k, Conv2dGeometry::default(), &f, &sigma, &eps, 0.2).unwrap();

        let q = hw - ks + 1;
        let mut best = f64::NEG_INFINITY;
        for kk in 0..kn {
            let mut total = 0.0;
            for y in 0..q {
                for x in 0..q {
                    let mut acc = 0.0;
                    for i in 0..n {
                        for ch in 0..c {
                            for a in 0..ks {
                                for b in 0..ks {
                                    acc += sigma.value::<f64>(i)
                                        * f.data()[((i * c + ch) * hw + y + a) * hw + x + b]
                                        * k.data()[((kk * c + ch) * ks + a) * ks + b];
                                }
                            }
                        }
                    }
                    total += f64::abs(acc);
                }
            }
            best = best.max(total);
        }
        assert!((v.sup_term - best / (n * q * q) as f64).abs() < 1e-10);
    }

    #[test]
    fn one_by_one_reduces_to_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (n, c, kn) = (6, 7, 4);
        let k4 = rand_t(&[kn, c, 1, 1], -1.0, 1.0, &mut rng);
        let f4 = rand_t(&[n, c, 1, 1], 0.0, 1.0, &mut rng);
        let e4 = rand_t(&[n, c, 1, 1], -1.0, 1.0, &mut rng);
        let m4: Tensor<f64> = sample_element_mask(&[n, c, 1, 1], 0.5, &mut rng).unwrap();
        let sigma = Signs::sample(n, &mut rng);
        let fh4 = distorted_features(&f4, &m4, &e4).unwrap();

        let k2 = k4.clone().reshape(&[kn, c]).unwrap();
        let geom = Conv2dGeometry::default();
        let vc = erc_surrogate_conv(&k4, geom, &fh4, &sigma, &e4, 0.1).unwrap();
        let vf = erc_surrogate_fc(&k2, &fh4, &sigma, &e4, 0.1).unwrap();
        assert!((vc.total() - vf.total()).abs() < 1e-10);
        let gc = exact_grad_conv(&k4, geom, &fh4, &sigma, &m4, &e4, 0.1).unwrap();
        let gf = exact_grad_fc(&k2, &fh4, &sigma, &m4, &e4, 0.1).unwrap();
        for (a, b) in gc.data().iter().zip(gf.data()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn exact_gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let (n, c, kn, hw) = (2, 2, 3, 5);
        let geom = Conv2dGeometry::new(2, 1);
        let k = rand_t(&[kn, c, 3, 3], -1.0, 1.0, &mut rng);
        let f = rand_t(&[n, c, hw, hw], 0.0, 1.0, &mut rng);
        let eps = rand_t(&[n, c, hw, hw], -1.0, 1.0, &mut rng);
        let mask: Tensor<f64> = sample_element_mask(&[n, c, hw, hw], 0.5, &mut rng).unwrap();
        let sigma = Signs::sample(n, &mut rng);
        let obj = |e: &Tensor<f64>| {
            let fh = distorted_features(&f, &mask, e).unwrap();
            erc_surrogate_conv(&k, geom, &fh, &sigma, e, 0.1).unwrap().total()
        };
        let fh = distorted_features(&f, &mask, &eps).unwrap();
        let grad = exact_grad_conv(&k, geom, &fh, &sigma, &mask, &eps, 0.1).unwrap();
        let h = 1e-5;
        for j in 0..eps.len() {
            let mut p = eps.clone();
            p.data_mut()[j] += h;
            let mut m = eps.clone();
            m.data_mut()[j] -= h;
            let num = (obj(&p) - obj(&m)) / (2.0 * h);
            assert!((num - grad.data()[j]).abs() < 1e-8, "{j}");
        }
    }

    #[test]
    fn approx_with_zero_noise_is_penalty_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let k = rand_t(&[2, 2, 3, 3], -1.0, 1.0, &mut rng);
        let eps = rand_t(&[2, 2, 4, 4], -1.0, 1.0, &mut rng);
        let mask = Tensor::ones(&[2, 2, 4, 4]).unwrap();
        let s = Tensor::ones(&[3, 3]).unwrap();
        let u = Tensor::zeros(&[2, 4, 4]).unwrap();
        let g = approx_grad_conv(&k, Conv2dGeometry::default(), &Signs::from_vec(vec![1, 1]), &s, &u, &mask, &eps, 0.2)
            .unwrap();
        assert!(g.bit_eq(&eps.scale(0.1).unwrap()));
    }

    #[test]
    fn kernel_max_is_over_filters() {
        let k = Tensor::<f64>::new(&[2, 1, 1, 2], vec![1.0, -3.0, 0.5, 2.0]).unwrap();
        assert_eq!(kernel_max_conv(&k).unwrap().data(), &[1.0, 2.0]);
    }
}
