/// Order-independent compensated sum: terms are sorted, then added with
/// Neumaier's correction. Identical multisets give bit-identical results.
pub fn stable_sum(mut terms: Vec<f64>) -> f64 {
    terms.sort_by(f64::total_cmp);
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for x in terms {
        let t = sum + x;
        if sum.abs() >= x.abs() {
            comp += (sum - t) + x;
        } else {
            comp += (x - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

pub fn stable_mean(terms: Vec<f64>) -> Option<f64> {
    let n = terms.len();
    (n > 0).then(|| stable_sum(terms) / n as f64)
}

/// Inclusive linear-interpolation quantile of already sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty());
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_is_order_independent() {
        let a = vec![0.1, 1e16, 0.2, -1e16, 0.3];
        let mut b = a.clone();
        b.reverse();
        assert_eq!(stable_sum(a.clone()), stable_sum(b));
        assert!((stable_sum(a) - 0.6).abs() < 1e-15);
    }

    #[test]
    fn quantiles() {
        let xs = [0.2, 0.8];
        assert!((quantile_sorted(&xs, 0.5) - 0.5).abs() < 1e-15);
        assert_eq!(quantile_sorted(&xs, 0.0), 0.2);
        assert_eq!(quantile_sorted(&xs, 1.0), 0.8);
        let xs = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(quantile_sorted(&xs, 0.25), 2.0);
        assert_eq!(quantile_sorted(&[7.0], 0.75), 7.0);
        assert_eq!(stable_mean(vec![]), None);
    }
}
