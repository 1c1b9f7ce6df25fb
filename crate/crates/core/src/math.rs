//! Thin wrappers over `libm` so the crate stays `no_std`.

#[inline]
pub fn powf(x: f64, y: f64) -> f64 {
    libm::pow(x, y)
}

#[inline]
pub fn powi(x: f64, n: i32) -> f64 {
    libm::pow(x, n as f64)
}

#[inline]
pub fn sqrt(x: f64) -> f64 {
    libm::sqrt(x)
}

#[inline]
pub fn floor(x: f64) -> f64 {
    libm::floor(x)
}

#[inline]
pub fn gamma(x: f64) -> f64 {
    libm::tgamma(x)
}

/// `2^k` for integer `k`, exact for the exponent range used by level windows.
#[inline]
pub fn exp2i(k: i32) -> f64 {
    libm::ldexp(1.0, k)
}

pub const LN_2: f64 = core::f64::consts::LN_2;
pub const PI: f64 = core::f64::consts::PI;

/// Remainder in `[0, m)` for `m > 0`.
#[inline]
pub fn rem_euclid(x: f64, m: f64) -> f64 {
    let r = libm::fmod(x, m);
    if r < 0.0 {
        r + m
    } else {
        r
    }
}
