//! Stable scalar kernels used by the likelihood terms.

use crate::{AdsqError, Result};

/// Smallest positive subnormal double. `sigmoid` never returns less, so the
/// result stays inside the open interval (0, 1).
const SIGMOID_FLOOR: f64 = f64::from_bits(1);
/// Largest double below 1.
const SIGMOID_CEIL: f64 = 1.0 - f64::EPSILON / 2.0;

/// Logistic function, evaluated without overflow for any finite input.
///
/// Saturates to the representable open interval (0, 1) in both tails.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    let y = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    y.clamp(SIGMOID_FLOOR, SIGMOID_CEIL)
}

/// `log(1 + e^x)` as `max(x, 0) + log1p(exp(-|x|))`.
#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Checked [`sigmoid`]: rejects non-finite input.
pub fn sigmoid_stable(x: f64) -> Result<f64> {
    finite(x, "sigmoid")?;
    Ok(sigmoid(x))
}

/// Checked [`softplus`]: rejects non-finite input.
pub fn softplus_stable(x: f64) -> Result<f64> {
    finite(x, "softplus")?;
    Ok(softplus(x))
}

/// Negative log-likelihood of a binary observation `s` under a logistic
/// model with logit `logit`: `softplus(logit) - s * logit`.
#[inline]
pub fn logistic_nll(s: f64, logit: f64) -> f64 {
    softplus(logit) - s * logit
}

fn finite(x: f64, what: &str) -> Result<()> {
    if x.is_finite() {
        Ok(())
    } else {
        Err(AdsqError::Domain(format!("{what}: non-finite input {x}")))
    }
}
