use crate::error::{dim_err, Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Mean softmax cross-entropy of `logits: N×C` against integer labels, and
/// the softmax probabilities. Uses max subtraction, so large logits are safe.
pub fn softmax_crossentropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>)> {
    let &[n, c] = logits.shape() else {
        return Err(dim_err!("softmax_crossentropy: expected N×C logits, got {:?}", logits.shape()));
    };
    if labels.len() != n {
        return Err(dim_err!("softmax_crossentropy: {} labels for {n} rows", labels.len()));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
        return Err(Error::Input(format!("label {bad} out of range for {c} classes")));
    }
    if logits.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite logits".into()));
    }
    let mut probs = Vec::with_capacity(n * c);
    let mut total = 0.0f64;
    for (row, &y) in logits.data().chunks_exact(c).zip(labels) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let exps: Vec<T> = row.iter().map(|&z| (z - max).exp()).collect();
        let sum: T = exps.iter().copied().sum();
        total += (sum.ln() - (row[y] - max)).to_f64().unwrap_or(f64::NAN);
        probs.extend(exps.into_iter().map(|e| e / sum));
    }
    let loss = T::from_f64_lossy(total / n as f64);
    if !loss.is_finite() {
        return Err(Error::Numeric("non-finite loss".into()));
    }
    Ok((loss, Tensor::new(logits.shape(), probs)?))
}
