//! Losses over logit vectors and dense matrices, each with its analytic
//! gradient. Values are accumulated in f64 regardless of the input width.

use super::matrix::{DenseMatrix, ProbVec, Real};
use super::NumError;

/// Scalar loss and its gradient with respect to the first argument.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad<G> {
    pub loss: f64,
    pub grad: G,
}

fn check_tau(tau: f64) -> Result<(), NumError> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(NumError::InvalidArgument(format!(
            "temperature must be positive and finite, got {tau}"
        )));
    }
    Ok(())
}

/// Numerically stable `log softmax(z / tau)` in f64.
pub fn log_softmax<T: Real>(z: &[T], tau: f64) -> Result<Vec<f64>, NumError> {
    check_tau(tau)?;
    if z.is_empty() {
        return Err(NumError::InvalidArgument("empty logit vector".into()));
    }
    let scaled: Vec<f64> = z.iter().map(|&x| x.f64() / tau).collect();
    if scaled.iter().any(|x| !x.is_finite()) {
        return Err(NumError::InvalidArgument("non-finite logits".into()));
    }
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + scaled.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
    Ok(scaled.into_iter().map(|x| x - lse).collect())
}

/// `softmax(z / tau)`, stabilized by subtracting the max before `exp`.
pub fn softmax<T: Real>(z: &[T], tau: f64) -> Result<ProbVec, NumError> {
    check_tau(tau)?;
    if z.is_empty() {
        return Err(NumError::InvalidArgument("empty logit vector".into()));
    }
    let scaled: Vec<f64> = z.iter().map(|&x| x.f64() / tau).collect();
    if scaled.iter().any(|x| !x.is_finite()) {
        return Err(NumError::InvalidArgument("non-finite logits".into()));
    }
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut e: Vec<f64> = scaled.iter().map(|&x| (x - max).exp()).collect();
    let sum: f64 = e.iter().sum();
    e.iter_mut().for_each(|x| *x /= sum);
    Ok(ProbVec::from_normalized(e))
}

/// Row-wise softmax of a logit matrix.
pub fn softmax_rows<T: Real>(z: &DenseMatrix<T>, tau: f64) -> Result<Vec<ProbVec>, NumError> {
    z.iter_rows().map(|r| softmax(r, tau)).collect()
}

/// `-log softmax(logits)[label]`; gradient `softmax(logits) - onehot(label)`.
pub fn cross_entropy<T: Real>(logits: &[T], label: usize) -> Result<LossGrad<Vec<T>>, NumError> {
    if label >= logits.len() {
        return Err(NumError::InvalidArgument(format!(
            "label {label} out of range for {} classes",
            logits.len()
        )));
    }
    let ls = log_softmax(logits, 1.0)?;
    let loss = -ls[label];
    let grad = ls
        .iter()
        .enumerate()
        .map(|(i, &l)| T::of(l.exp() - if i == label { 1.0 } else { 0.0 }))
        .collect();
    Ok(LossGrad { loss, grad })
}

/// Cross-entropy against an arbitrary target distribution, student softened
/// at `tau`. Gradient is with respect to the unscaled logits.
pub fn soft_cross_entropy<T: Real>(
    target: &ProbVec,
    logits: &[T],
    tau: f64,
) -> Result<LossGrad<Vec<T>>, NumError> {
    if target.len() != logits.len() {
        return Err(NumError::InvalidArgument(format!(
            "target has {} classes, logits {}",
            target.len(),
            logits.len()
        )));
    }
    let ls = log_softmax(logits, tau)?;
    let loss = -target
        .as_slice()
        .iter()
        .zip(&ls)
        .filter(|(&p, _)| p > 0.0)
        .map(|(&p, &l)| p * l)
        .sum::<f64>();
    let grad = target
        .as_slice()
        .iter()
        .zip(&ls)
        .map(|(&p, &l)| T::of((l.exp() - p) / tau))
        .collect();
    Ok(LossGrad { loss, grad })
}

/// `KL(p_ref ‖ softmax(logits_s / tau))` with the `0·log 0 = 0` convention.
/// Gradient with respect to `logits_s` is `(q - p_ref) / tau`.
pub fn kl_divergence<T: Real>(
    p_ref: &ProbVec,
    logits_s: &[T],
    tau: f64,
) -> Result<LossGrad<Vec<T>>, NumError> {
    if p_ref.len() != logits_s.len() {
        return Err(NumError::InvalidArgument(format!(
            "reference has {} classes, logits {}",
            p_ref.len(),
            logits_s.len()
        )));
    }
    let ls = log_softmax(logits_s, tau)?;
    let loss = p_ref
        .as_slice()
        .iter()
        .zip(&ls)
        .filter(|(&p, _)| p > 0.0)
        .map(|(&p, &lq)| p * (p.ln() - lq))
        .sum::<f64>()
        // rounding can leave a tiny negative residue at p == q
        .max(0.0);
    let grad = p_ref
        .as_slice()
        .iter()
        .zip(&ls)
        .map(|(&p, &lq)| T::of((lq.exp() - p) / tau))
        .collect();
    Ok(LossGrad { loss, grad })
}

fn check_same_shape<T: Real>(a: &DenseMatrix<T>, b: &DenseMatrix<T>) -> Result<(), NumError> {
    if a.shape() != b.shape() {
        return Err(NumError::InvalidArgument(format!(
            "shape mismatch: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Mean over all entries of `(a - b)²`; gradient `2(a - b) / count`.
pub fn mse<T: Real>(
    a: &DenseMatrix<T>,
    b: &DenseMatrix<T>,
) -> Result<LossGrad<DenseMatrix<T>>, NumError> {
    check_same_shape(a, b)?;
    let count = a.len();
    if count == 0 {
        return Ok(LossGrad {
            loss: 0.0,
            grad: DenseMatrix::zeros(a.rows(), a.cols()),
        });
    }
    let n = count as f64;
    let mut sum = 0.0;
    let mut grad = Vec::with_capacity(count);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let d = x.f64() - y.f64();
        sum += d * d;
        grad.push(T::of(2.0 * d / n));
    }
    Ok(LossGrad {
        loss: sum / n,
        grad: DenseMatrix::from_vec(a.rows(), a.cols(), grad)?,
    })
}
