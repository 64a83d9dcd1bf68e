//! Error function and standard normal helpers.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

/// The error function, accurate to a few ulp on finite input.
///
/// Evaluated on `|x|` and re-signed, so `erf(-x) == -erf(x)` holds bit-for-bit.
pub fn erf(x: f64) -> f64 {
    let r = libm::erf(x.abs());
    if x.is_sign_negative() {
        -r
    } else {
        r
    }
}

/// Complementary error function `1 - erf(x)`, without cancellation for large `x`.
pub fn erfc(x: f64) -> f64 {
    libm::erfc(x)
}

/// Standard normal density.
pub fn normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * PI).sqrt()
}

/// Standard normal distribution function.
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z * FRAC_1_SQRT_2)
}
