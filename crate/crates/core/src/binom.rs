//! Binomial coefficients in 64-bit integers with overflow detection and a
//! floating-point fallback for arguments past 2^63.

/// `C(n, k)` as an exact `u64`, or `None` on overflow.
pub fn binomial_u64(n: u64, k: u64) -> Option<u64> {
    if k > n {
        return Some(0);
    }
    let k = k.min(n - k);
    let mut acc: u64 = 1;
    for i in 0..k {
        // acc * (n - k + i + 1) / (i + 1) stays integral at every step when
        // the division is applied after multiplying; guard the multiply.
        acc = acc.checked_mul(n - k + i + 1)? / (i + 1);
    }
    Some(acc)
}

/// `C(n, k)` as an `f64`, exact whenever the value fits in a `u64`.
pub fn binomial_f64(n: u64, k: u64) -> f64 {
    if let Some(v) = binomial_u64(n, k) {
        return v as f64;
    }
    if k > n {
        return 0.0;
    }
    let k = k.min(n - k);
    let mut acc = 1.0f64;
    for i in 0..k {
        acc *= (n - k + i + 1) as f64 / (i + 1) as f64;
    }
    acc
}
