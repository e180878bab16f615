//! Small numeric helpers shared by the predictor, accuracy and simulation
//! modules. The empirical quantile here is the single convention used across
//! the crate.

/// Rank (1-based) of the order statistic used for the empirical quantile of
/// order `p` among `m` values: the smallest `r` with `r / m >= p`, i.e.
/// `ceil(p * m)`, clamped to `[1, m]`.
///
/// Products that land within rounding noise of an integer are treated as that
/// integer so that, for example, `0.7 * 10` selects rank 7 and not 8.
pub fn quantile_rank(p: f64, m: usize) -> usize {
    assert!(m > 0, "quantile of an empty set");
    let raw = p * m as f64;
    let nearest = raw.round();
    let rank = if (raw - nearest).abs() <= 1e-9 * (m as f64).max(1.0) {
        nearest
    } else {
        raw.ceil()
    };
    (rank as usize).clamp(1, m)
}

/// Lower empirical quantile `inf{x : F_m(x) >= p}` of `values`.
///
/// Panics on an empty slice; callers validate first.
pub fn quantile(values: &[f64], p: f64) -> f64 {
    let rank = quantile_rank(p, values.len());
    let mut sorted = values.to_vec();
    let (_, nth, _) = sorted.select_nth_unstable_by(rank - 1, f64::total_cmp);
    *nth
}

/// Quantile of order `p` of the absolute values of `values`.
pub fn abs_quantile(values: &[f64], p: f64) -> f64 {
    let abs: Vec<f64> = values.iter().map(|v| v.abs()).collect();
    quantile(&abs, p)
}

/// Neumaier-compensated sum.
pub fn sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut total = 0.0f64;
    let mut comp = 0.0f64;
    for v in values {
        let t = total + v;
        if total.abs() >= v.abs() {
            comp += (total - t) + v;
        } else {
            comp += (v - t) + total;
        }
        total = t;
    }
    total + comp
}

pub fn mean(values: &[f64]) -> f64 {
    sum(values.iter().copied()) / values.len() as f64
}

pub fn mean_square(values: &[f64]) -> f64 {
    sum(values.iter().map(|v| v * v)) / values.len() as f64
}

/// Variance with divisor `n`.
pub fn population_variance(values: &[f64]) -> f64 {
    let m = mean(values);
    sum(values.iter().map(|v| (v - m) * (v - m))) / values.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rank_convention() {
        assert_eq!(quantile_rank(0.5, 4), 2);
        assert_eq!(quantile_rank(0.75, 4), 3);
        assert_eq!(quantile_rank(0.99, 4), 4);
        assert_eq!(quantile_rank(0.7, 10), 7);
        assert_eq!(quantile_rank(1e-9, 5), 1);
        assert_eq!(quantile_rank(1.0, 5), 5);
    }

    #[test]
    fn lower_median_for_even_counts() {
        assert_eq!(quantile(&[4.0, 1.0, 3.0, 2.0], 0.5), 2.0);
        assert_eq!(quantile(&[4.0, 1.0, 3.0, 2.0], 0.75), 3.0);
        assert_eq!(quantile(&[1.0, 2.0, 3.0], 0.5), 2.0);
    }

    #[test]
    fn compensated_sum_beats_naive() {
        let xs = [1e16, 1.0, -1e16];
        assert_eq!(sum(xs), 1.0);
    }

    proptest! {
        #[test]
        fn quantile_matches_sorted_brute_force(
            xs in prop::collection::vec(-1e3f64..1e3, 1..40),
            p in 0.001f64..0.999,
        ) {
            let mut sorted = xs.clone();
            sorted.sort_by(f64::total_cmp);
            // smallest x with (#values <= x) / m >= p
            let m = xs.len() as f64;
            let expected = sorted
                .iter()
                .copied()
                .find(|x| sorted.iter().filter(|v| *v <= x).count() as f64 / m >= p - 1e-12)
                .unwrap();
            prop_assert_eq!(quantile(&xs, p), expected);
        }
    }
}
