//! Float math that works with and without `std` (via `libm`).

#![allow(dead_code)]

#[cfg(feature = "std")]
mod imp {
    pub fn exp(x: f64) -> f64 {
        x.exp()
    }
    pub fn ln(x: f64) -> f64 {
        x.ln()
    }
    pub fn sqrt(x: f64) -> f64 {
        x.sqrt()
    }
    pub fn tanh(x: f64) -> f64 {
        x.tanh()
    }
    pub fn abs(x: f64) -> f64 {
        x.abs()
    }
}

#[cfg(not(feature = "std"))]
mod imp {
    pub fn exp(x: f64) -> f64 {
        libm::exp(x)
    }
    pub fn ln(x: f64) -> f64 {
        libm::log(x)
    }
    pub fn sqrt(x: f64) -> f64 {
        libm::sqrt(x)
    }
    pub fn tanh(x: f64) -> f64 {
        libm::tanh(x)
    }
    pub fn abs(x: f64) -> f64 {
        libm::fabs(x)
    }
}

pub(crate) use imp::*;

/// Numerically stable logistic function.
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + exp(-x))
    } else {
        let e = exp(x);
        e / (1.0 + e)
    }
}

/// Maximum of a non-empty slice, ignoring nothing (caller guarantees no NaN).
pub(crate) fn slice_max(xs: &[f64]) -> f64 {
    let mut m = f64::NEG_INFINITY;
    for &x in xs {
        if x > m {
            m = x;
        }
    }
    m
}
