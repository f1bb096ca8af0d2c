//! Rademacher-complexity surrogate and distortion gradients for a feature
//! map consumed by a dense layer.
//!
//! Batches are `N×…` tensors flattened per sample to `d` features, which
//! must equal the column count of the next layer's weight `K: d'×d`.

use super::{penalty_term, Signs, SurrogateValue};
use crate::error::{dim_err, Result};
use crate::tensor::{dot, Scalar, Tensor};

fn check_batch<T: Scalar>(
    k_next: &Tensor<T>,
    distorted: &Tensor<T>,
    sigma: &Signs,
    epsilon: &Tensor<T>,
) -> Result<(usize, usize)> {
    let &[_, d] = k_next.shape() else {
        return Err(dim_err!("dense surrogate: weight must be 2-D, got {:?}", k_next.shape()));
    };
    let n = distorted.dim(0);
    if distorted.row_len() != d {
        return Err(dim_err!(
            "dense surrogate: features have width {}, next layer expects {d}",
            distorted.row_len()
        ));
    }
    if sigma.len() != n {
        return Err(dim_err!("{} signs for a batch of {n}", sigma.len()));
    }
    if epsilon.shape() != distorted.shape() {
        return Err(dim_err!(
            "distortion shape {:?} differs from features {:?}",
            epsilon.shape(),
            distorted.shape()
        ));
    }
    Ok((n, d))
}

/// `g = Σ_i σ_i f̂_i`, accumulated in sample order.
pub fn signed_feature_sum<T: Scalar>(distorted: &Tensor<T>, sigma: &Signs) -> Vec<T> {
    let mut g = vec![T::zero(); distorted.row_len()];
    for i in 0..distorted.dim(0) {
        let s = sigma.value::<T>(i);
        for (gj, &f) in g.iter_mut().zip(distorted.outer(i)) {
            *gj += s * f;
        }
    }
    g
}

/// Row of `k_next` with the largest `|⟨K[k,:], g⟩|` (lowest index on ties)
/// and the inner product itself.
fn select_row<T: Scalar>(k_next: &Tensor<T>, g: &[T]) -> (usize, T) {
    let d = g.len();
    let mut best = (0, dot(&k_next.data()[..d], g));
    for k in 1..k_next.dim(0) {
        let v = dot(&k_next.data()[k * d..(k + 1) * d], g);
        if v.abs() > best.1.abs() {
            best = (k, v);
        }
    }
    best
}

/// Surrogate objective
/// `T = max_k |⟨K[k,:], g⟩| / N + λ/(2N) Σ_i ‖ε_i‖²`.
///
/// `distorted` holds `f − m∘ε` (without the train-time rescale).
pub fn erc_surrogate_fc<T: Scalar>(
    k_next: &Tensor<T>,
    distorted: &Tensor<T>,
    sigma: &Signs,
    epsilon: &Tensor<T>,
    lambda: T,
) -> Result<SurrogateValue<T>> {
    let (n, _) = check_batch(k_next, distorted, sigma, epsilon)?;
    let g = signed_feature_sum(distorted, sigma);
    let (row, inner) = select_row(k_next, &g);
    let n_t = T::from_usize(n).expect("batch size fits");
    Ok(SurrogateValue {
        sup_term: inner.abs() / n_t,
        penalty_term: penalty_term(epsilon, lambda, n),
        selected: row,
    })
}

/// Exact `∂T/∂ε_i = −σ_i s K[k̂,:]∘m_i / N + λ ε_i / N`, where `k̂` is the
/// maximizing row and `s` the sign of its inner product.
pub fn exact_grad_fc<T: Scalar>(
    k_next: &Tensor<T>,
    distorted: &Tensor<T>,
    sigma: &Signs,
    mask: &Tensor<T>,
    epsilon: &Tensor<T>,
    lambda: T,
) -> Result<Tensor<T>> {
    let (n, d) = check_batch(k_next, distorted, sigma, epsilon)?;
    if mask.shape() != epsilon.shape() {
        return Err(dim_err!("mask shape {:?} differs from distortion {:?}", mask.shape(), epsilon.shape()));
    }
    let g = signed_feature_sum(distorted, sigma);
    let (row, inner) = select_row(k_next, &g);
    let k_row = &k_next.data()[row * d..(row + 1) * d];
    let s = crate::tensor::sign(inner);
    combine(n, mask, epsilon, lambda, |i| {
        let coef = -(sigma.value::<T>(i) * s) / T::from_usize(n).expect("batch size fits");
        k_row.iter().map(move |&kv| coef * kv)
    })
}

/// Randomized gradient: the selected row and its sign are replaced by
/// `u ∘ K_M`, with `u ~ N(0, I)` and `K_M` the column-wise max of `K`.
pub fn approx_grad_fc<T: Scalar>(
    k_max: &Tensor<T>,
    sigma: &Signs,
    u: &Tensor<T>,
    mask: &Tensor<T>,
    epsilon: &Tensor<T>,
    lambda: T,
) -> Result<Tensor<T>> {
    let n = epsilon.dim(0);
    let d = epsilon.row_len();
    if k_max.len() != d || u.len() != d {
        return Err(dim_err!(
            "approx gradient: K_M has {} entries and u has {}, features have {d}",
            k_max.len(),
            u.len()
        ));
    }
    if sigma.len() != n || mask.shape() != epsilon.shape() {
        return Err(dim_err!("approx gradient: batch shapes disagree"));
    }
    let direction: Vec<T> = u.data().iter().zip(k_max.data()).map(|(&a, &b)| a * b).collect();
    combine(n, mask, epsilon, lambda, |i| {
        let coef = -sigma.value::<T>(i) / T::from_usize(n).expect("batch size fits");
        direction.iter().map(move |&v| coef * v)
    })
}

/// `first_i ∘ m_i + λ ε_i / N` per sample. Shared by every gradient form so
/// the penalty part is computed identically.
pub(crate) fn combine<T, F, I>(n: usize, mask: &Tensor<T>, epsilon: &Tensor<T>, lambda: T, first: F) -> Result<Tensor<T>>
where
    T: Scalar,
    F: Fn(usize) -> I,
    I: Iterator<Item = T>,
{
    let per = epsilon.row_len();
    let lambda_n = lambda / T::from_usize(n).expect("batch size fits");
    let mut out = Vec::with_capacity(epsilon.len());
    for i in 0..n {
        let mut count = 0;
        for ((a, &m), &e) in first(i).zip(mask.outer(i)).zip(epsilon.outer(i)) {
            out.push(a * m + lambda_n * e);
            count += 1;
        }
        debug_assert_eq!(count, per);
    }
    Tensor::new(epsilon.shape(), out)
}
