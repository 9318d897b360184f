//! Standalone numerical functions shared by the loss ops and the analysis
//! code. All are pure and generic over the scalar type.

use crate::scalar::Scalar;
use crate::{Error, Result};

/// Temperature softmax, computed stably via max-subtraction.
pub fn softmax_temp<F: Scalar>(logits: &[F], tau: F) -> Result<Vec<F>> {
    if tau <= F::zero() || !tau.is_finite() {
        return Err(Error::InvalidArgument(format!("softmax temperature {tau} must be positive")));
    }
    if logits.is_empty() {
        return Err(Error::Empty("softmax over empty logits".into()));
    }
    if logits.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("softmax input".into()));
    }
    let m = logits.iter().cloned().fold(F::neg_infinity(), F::max);
    let exps: Vec<F> = logits.iter().map(|&z| ((z - m) / tau).exp()).collect();
    let sum: F = exps.iter().cloned().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

/// Plain softmax (tau = 1).
pub fn softmax<F: Scalar>(logits: &[F]) -> Result<Vec<F>> {
    softmax_temp(logits, F::one())
}

/// Stable log-softmax.
pub fn log_softmax<F: Scalar>(logits: &[F]) -> Vec<F> {
    let m = logits.iter().cloned().fold(F::neg_infinity(), F::max);
    let lse: F = logits.iter().map(|&z| (z - m).exp()).sum::<F>().ln() + m;
    logits.iter().map(|&z| z - lse).collect()
}

/// Negative log likelihood of `label` under softmax(logits).
pub fn cross_entropy<F: Scalar>(logits: &[F], label: usize) -> Result<F> {
    if label >= logits.len() {
        return Err(Error::InvalidArgument(format!(
            "label {label} out of range for {} classes",
            logits.len()
        )));
    }
    if logits.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("cross_entropy input".into()));
    }
    Ok(-log_softmax(logits)[label])
}

/// KL(p || q) for probability vectors. `q` must be strictly positive wherever
/// `p` is; both must sum to 1 within 1e-9.
pub fn kl_div<F: Scalar>(p: &[F], q: &[F]) -> Result<F> {
    if p.len() != q.len() {
        return Err(Error::Shape("kl_div length mismatch".into()));
    }
    let tol = F::from_f64_lit(1e-9);
    let ps: F = p.iter().cloned().sum();
    let qs: F = q.iter().cloned().sum();
    if (ps - F::one()).abs() > tol || (qs - F::one()).abs() > tol {
        return Err(Error::InvalidArgument("kl_div inputs must sum to 1".into()));
    }
    let mut kl = F::zero();
    for (&pi, &qi) in p.iter().zip(q) {
        if pi < F::zero() || qi < F::zero() {
            return Err(Error::InvalidArgument("kl_div inputs must be nonnegative".into()));
        }
        if pi > F::zero() {
            if qi <= F::zero() {
                return Err(Error::InvalidArgument("kl_div support violation: q=0 where p>0".into()));
            }
            kl += pi * (pi / qi).ln();
        }
    }
    // Rounding can push KL of near-identical distributions a hair below zero.
    Ok(kl.max(F::zero()))
}
