//! Small order-statistic and moment helpers shared by normalization, metrics
//! and aggregation.

/// Percentile `q` in `[0, 100]` with linear interpolation between order
/// statistics (rank `q/100 * (n-1)`). Returns `None` for empty input.
pub fn percentile(values: &[f64], q: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    Some(percentile_sorted(&sorted, q))
}

/// Same as [`percentile`] for input already sorted ascending.
pub fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    assert!(n > 0, "percentile of empty slice");
    let q = q.clamp(0.0, 100.0);
    let rank = q / 100.0 * (n - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let frac = rank - lo as f64;
    if frac == 0.0 || lo == hi {
        sorted[lo]
    } else {
        sorted[lo] + frac * (sorted[hi] - sorted[lo])
    }
}

pub fn mean(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        None
    } else {
        Some(values.iter().sum::<f64>() / values.len() as f64)
    }
}

/// Median; even counts average the two middle values.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let n = sorted.len();
    Some(if n % 2 == 1 { sorted[n / 2] } else { 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]) })
}

/// Sample standard deviation (divisor `n-1`); a single value has sd 0.
///
/// Deviations are taken from the first element before squaring, so a
/// constant sequence yields exactly zero.
pub fn sample_sd(values: &[f64]) -> Option<f64> {
    spread(values, 1)
}

/// Population standard deviation (divisor `n`), shifted like [`sample_sd`].
pub fn population_sd(values: &[f64]) -> Option<f64> {
    spread(values, 0)
}

fn spread(values: &[f64], ddof: usize) -> Option<f64> {
    let n = values.len();
    if n == 0 {
        return None;
    }
    if n <= ddof {
        return Some(0.0);
    }
    let pivot = values[0];
    let (mut s, mut s2) = (0.0, 0.0);
    for &v in values {
        let d = v - pivot;
        s += d;
        s2 += d * d;
    }
    let nf = n as f64;
    let var = (s2 - s * s / nf) / (nf - ddof as f64);
    Some(var.max(0.0).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn percentile_matches_linear_rank() {
        let v: Vec<f64> = (0..100).map(f64::from).collect();
        assert!((percentile(&v, 97.0).unwrap() - 96.03).abs() < 1e-12);
        let v: Vec<f64> = (0..1000).map(f64::from).collect();
        assert!((percentile(&v, 99.0).unwrap() - 989.01).abs() < 1e-9);
        assert_eq!(percentile(&[3.0], 50.0), Some(3.0));
        assert_eq!(percentile(&[], 50.0), None);
    }

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(&[1.0, 3.0, 100.0]), Some(3.0));
        assert_eq!(median(&[4.0, 1.0, 3.0, 2.0]), Some(2.5));
    }

    #[test]
    fn sd_of_constant_is_exactly_zero() {
        let v = vec![0.1f64.ln(); 17];
        assert_eq!(sample_sd(&v), Some(0.0));
        assert_eq!(population_sd(&v), Some(0.0));
        assert_eq!(sample_sd(&[5.0]), Some(0.0));
        let sd = population_sd(&[1.0, 3.0]).unwrap();
        assert!((sd - 1.0).abs() < 1e-15);
    }
}
