use super::NumericsError;

/// Linear-interpolation empirical quantile.
///
/// With the samples sorted as `x₁ ≤ … ≤ x_B`, uses `h = (B − 1)p + 1` and
/// returns `x⌊h⌋ + (h − ⌊h⌋)(x⌈h⌉ − x⌊h⌋)`.
pub fn empirical_quantile(samples: &[f64], p: f64) -> Result<f64, NumericsError> {
    if samples.is_empty() {
        return Err(NumericsError::EmptySample);
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    quantile_sorted(&sorted, p)
}

/// Same as [`empirical_quantile`] for data that is already sorted ascending.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> Result<f64, NumericsError> {
    if sorted.is_empty() {
        return Err(NumericsError::EmptySample);
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(NumericsError::InvalidProbability(p));
    }
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor();
    let frac = h - lo;
    let lo = lo as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    if frac == 0.0 {
        return Ok(sorted[lo]);
    }
    Ok(sorted[lo] + frac * (sorted[hi] - sorted[lo]))
}
