//! Multi-label binary cross-entropy on raw logits.
//!
//! Everything runs through the log-sum-exp identity
//! `softplus(z) = max(z, 0) + ln(1 + e^-|z|)`, so +/-50-range logits never
//! overflow the way a naive `ln(sigmoid)` would.

use crate::error::{Error, Result};
use crate::linalg::Scalar;

fn check_pair<T: Scalar>(logits: &[T], targets: &[T]) -> Result<()> {
    if logits.len() != targets.len() {
        return Err(Error::shape(format!(
            "{} logits vs {} targets",
            logits.len(),
            targets.len()
        )));
    }
    if logits.is_empty() {
        return Err(Error::shape("empty logit vector"));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("non-finite logit"));
    }
    if targets
        .iter()
        .any(|&t| !t.is_finite() || t < T::zero() || t > T::one())
    {
        return Err(Error::config("targets must lie in [0, 1]"));
    }
    Ok(())
}

/// Mean over classes of `BCE(sigmoid(z), y)`, in the stable form
/// `(1 - y) z + softplus(-z)`.
pub fn bce_loss<T: Scalar>(logits: &[T], targets: &[T]) -> Result<T> {
    check_pair(logits, targets)?;
    let mut total = T::zero();
    for (&z, &y) in logits.iter().zip(targets) {
        let softplus_neg = z.abs().neg().exp().ln_1p() + if z < T::zero() { -z } else { T::zero() };
        total = total + (T::one() - y) * z + softplus_neg;
    }
    Ok(total / T::from_f64(logits.len() as f64))
}

/// Gradient of [`bce_loss`] w.r.t. the logits: `(sigmoid(z) - y) / n`.
pub fn bce_backward<T: Scalar>(logits: &[T], targets: &[T]) -> Result<Vec<T>> {
    check_pair(logits, targets)?;
    let inv_n = T::from_f64(1.0 / logits.len() as f64);
    Ok(logits
        .iter()
        .zip(targets)
        .map(|(&z, &y)| (sigmoid(z) - y) * inv_n)
        .collect())
}

pub fn sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}
