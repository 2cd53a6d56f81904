use crate::error::{Error, Result};
use crate::numeric::ln_gamma;

/// Bessel function of the first kind J_nu(x) by its power series.
///
/// Accurate for moderate arguments (x up to a few tens), which covers every
/// first zero this crate needs; orders down to nu > -1 are accepted so that
/// the d = 1 half-integer case works.
pub fn bessel_j(order: f64, x: f64) -> f64 {
    assert!(order > -1.0, "bessel_j supports orders > -1");
    assert!(x >= 0.0, "bessel_j expects x >= 0");
    if x == 0.0 {
        return if order == 0.0 { 1.0 } else { 0.0 };
    }
    let half = 0.5 * x;
    let mut term = (order * half.ln() - ln_gamma(order + 1.0)).exp();
    let q = half * half;
    let mut sum = term;
    for k in 0..400 {
        let kf = k as f64;
        term *= -q / ((kf + 1.0) * (kf + 1.0 + order));
        sum += term;
        if term.abs() < 1e-18 * sum.abs().max(1e-300) && k > 4 {
            break;
        }
    }
    sum
}

/// First positive zero of J_order, located by scan and bisection.
///
/// Absolute accuracy is far below the 1e-10 contract for the orders the ball
/// constants need (order = d/2 - 1 with moderate d).
pub fn bessel_first_zero(order: f64) -> Result<f64> {
    if !(order > -1.0) || !order.is_finite() {
        return Err(Error::invalid(format!(
            "first-zero search requires a finite order > -1 (got {order})"
        )));
    }
    // J_nu > 0 on (0, j_{nu,1}); scan for the first sign change
    let mut lo = (0.5f64).max(order * 0.5);
    let mut f_lo = bessel_j(order, lo);
    if f_lo <= 0.0 {
        // the scan start overshot tiny-order zeros; restart near zero
        lo = 1e-6;
        f_lo = bessel_j(order, lo);
    }
    let step = 0.25;
    let mut hi = lo;
    let mut f_hi = f_lo;
    for _ in 0..400 {
        hi += step;
        f_hi = bessel_j(order, hi);
        if f_hi <= 0.0 {
            break;
        }
        lo = hi;
        f_lo = f_hi;
    }
    if f_hi > 0.0 {
        return Err(Error::numerical(format!(
            "no sign change located for J_{order} within the scan window"
        )));
    }
    let _ = f_lo;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if bessel_j(order, mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-14 {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}
