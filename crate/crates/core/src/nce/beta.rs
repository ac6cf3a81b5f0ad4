//! Choosing the noise ratio `β = σo/σs` from the expected label of
//! out-of-distribution views.

use crate::error::{Error, Result};
use crate::numeric::{logit, sigmoid};

/// Expected posterior logit of a view drawn with `ε ~ N(0, σo² I_D)`.
///
/// With `E‖ε‖² = D·σo²` this is `D·(ln β − (β² − 1)/2)`. Setting
/// `unscaled_quadratic` evaluates `−(β² − 1)/2 + D·ln β` instead, which drops the
/// factor `D` on the quadratic term; it is kept only for comparison.
pub fn expected_logit(beta: f64, dim: usize, unscaled_quadratic: bool) -> Result<f64> {
    if !(beta > 1.0 && beta.is_finite()) {
        return Err(Error::invalid(format!("noise ratio must be > 1, got {beta}")));
    }
    if dim == 0 {
        return Err(Error::invalid("dimension must be >= 1"));
    }
    let d = dim as f64;
    let quad = 0.5 * (beta * beta - 1.0);
    Ok(if unscaled_quadratic {
        -quad + d * beta.ln()
    } else {
        d * (beta.ln() - quad)
    })
}

/// `sigmoid` of the expected logit.
pub fn expected_label(beta: f64, dim: usize) -> Result<f64> {
    expected_logit(beta, dim, false).map(sigmoid)
}

/// Smallest `β` whose expected out-of-distribution label is at most `target`,
/// located by bisection to a bracket width of 1e-6.
pub fn select_beta(dim: usize, target: f64) -> Result<f64> {
    if !(target > 0.0 && target < 0.5) {
        return Err(Error::invalid(format!("target label must lie in (0, 0.5), got {target}")));
    }
    if dim == 0 {
        return Err(Error::invalid("dimension must be >= 1"));
    }
    // The expected logit is strictly decreasing for β > 1, so compare logits.
    let goal = logit(target);
    let below = |b: f64| expected_logit(b, dim, false).map(|u| u <= goal);
    let mut lo = 1.0;
    let mut hi = 2.0;
    while !below(hi)? {
        lo = hi;
        hi *= 2.0;
    }
    while hi - lo > 1e-6 {
        let mid = 0.5 * (lo + hi);
        if below(mid)? {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}
