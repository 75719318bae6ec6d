//! Small numerically careful primitives shared across the crate.

/// `log(sum(exp(x_i)))` with the shift-by-max trick.
///
/// Returns `-inf` for an empty slice or when every entry is `-inf`.
#[inline]
pub fn logsumexp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let sum: f64 = values.iter().map(|&v| (v - max).exp()).sum();
    max + sum.ln()
}

/// In-place softmax of log values; returns false (leaving a uniform vector)
/// when every entry is `-inf` and the softmax is undefined.
pub fn softmax_in_place(log_values: &mut [f64]) -> bool {
    let lse = logsumexp(log_values);
    if !lse.is_finite() {
        let uniform = 1.0 / log_values.len() as f64;
        log_values.iter_mut().for_each(|v| *v = uniform);
        return false;
    }
    log_values.iter_mut().for_each(|v| *v = (*v - lse).exp());
    true
}

/// FNV-1a hash of a label, used to derive named RNG sub-streams.
pub fn fnv1a64(label: &str) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for byte in label.as_bytes() {
        hash ^= u64::from(*byte);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}
