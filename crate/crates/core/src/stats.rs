//! Monte Carlo summaries.

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample variance with divisor `len − 1`.
pub fn variance(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return f64::NAN;
    }
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64
}

/// Standard error of the mean of a possibly autocorrelated sequence by
/// non-overlapping batch means with ⌊√len⌋ batches. Sequences shorter than
/// 4 fall back to the i.i.d. formula.
pub fn batch_means_se(xs: &[f64]) -> f64 {
    let len = xs.len();
    if len < 2 {
        return f64::NAN;
    }
    if len < 4 {
        return (variance(xs) / len as f64).sqrt();
    }
    let batches = (len as f64).sqrt().floor() as usize;
    let size = len / batches;
    let means: Vec<f64> = (0..batches).map(|b| mean(&xs[b * size..(b + 1) * size])).collect();
    (variance(&means) / batches as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn moments() {
        assert_eq!(mean(&[1.0, 2.0, 3.0]), 2.0);
        assert_eq!(variance(&[1.0, 2.0, 3.0]), 1.0);
    }

    #[test]
    fn batch_se_of_constant_is_zero() {
        assert_eq!(batch_means_se(&[2.0; 100]), 0.0);
    }
}
