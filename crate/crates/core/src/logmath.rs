//! Small log-domain helpers shared by the probabilistic modules.

/// `ln(exp(a) + exp(b))`, exact when either side is `-inf`.
#[inline]
pub fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    if a >= b {
        a + (b - a).exp().ln_1p()
    } else {
        b + (a - b).exp().ln_1p()
    }
}

/// Log-sum-exp over a slice; `-inf` for an empty slice.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    let sum: f64 = xs.iter().map(|&x| (x - max).exp()).sum();
    max + sum.ln()
}

/// Normalizes a binary log-message in place and returns the log normalizer.
#[inline]
pub fn normalize_pair(m: &mut [f64; 2]) -> f64 {
    let z = log_add(m[0], m[1]);
    if z.is_finite() {
        m[0] -= z;
        m[1] -= z;
    }
    z
}

/// `ln(p)` that maps `0` to `-inf` without a warning-prone branch at call sites.
#[inline]
pub fn ln_prob(p: f64) -> f64 {
    if p <= 0.0 {
        f64::NEG_INFINITY
    } else {
        p.ln()
    }
}

/// `p * ln(q)` with the `0 * ln 0 = 0` convention used by expected log-likelihoods.
#[inline]
pub fn xlogy(p: f64, log_q: f64) -> f64 {
    if p == 0.0 {
        0.0
    } else {
        p * log_q
    }
}
