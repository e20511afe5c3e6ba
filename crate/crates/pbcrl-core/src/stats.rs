//! Small numeric helpers shared across modules.

/// Numerically stable logistic sigmoid.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(max(x, floor))`; keeps log-likelihood terms finite near 0 and 1.
pub fn ln_clamped(x: f64, floor: f64) -> f64 {
    x.max(floor).ln()
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample variance; 0 for fewer than two samples.
pub fn variance(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64
}

pub fn std_dev(xs: &[f64]) -> f64 {
    variance(xs).sqrt()
}

/// Sample skewness (adjusted Fisher-Pearson); 0 when undefined.
pub fn skewness(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 3 {
        return 0.0;
    }
    let m = mean(xs);
    let s = std_dev(xs);
    if s <= 0.0 {
        return 0.0;
    }
    let nf = n as f64;
    let m3 = xs.iter().map(|x| ((x - m) / s).powi(3)).sum::<f64>();
    nf / ((nf - 1.0) * (nf - 2.0)) * m3
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(xs);
    xs.iter().map(|x| (x - lse).exp()).collect()
}

pub fn all_finite(xs: &[f64]) -> bool {
    xs.iter().all(|x| x.is_finite())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_symmetry_and_range() {
        for i in -40..=40 {
            let x = i as f64 * 0.5;
            let s = sigmoid(x);
            assert!((0.0..=1.0).contains(&s));
            assert!((s + sigmoid(-x) - 1.0).abs() < 1e-15);
        }
        assert!((sigmoid(0.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn sigmoid_extreme_arguments_stay_finite() {
        assert!(sigmoid(-1e6) >= 0.0);
        assert!(sigmoid(1e6) <= 1.0);
        assert!(sigmoid(-750.0).is_finite());
    }

    #[test]
    fn variance_matches_two_pass_formula() {
        let xs = [1.0, 2.0, 4.0, 8.0];
        // mean 3.75, squared deviations: 7.5625 + 3.0625 + 0.0625 + 18.0625 = 28.75
        assert!((variance(&xs) - 28.75 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn skewness_positive_for_right_tail() {
        let xs = [0.0, 0.0, 0.0, 0.0, 10.0];
        assert!(skewness(&xs) > 1.0);
    }

    #[test]
    fn softmax_sums_to_one() {
        let p = softmax(&[1.0, 2.0, 3.0]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(p[2] > p[1] && p[1] > p[0]);
    }
}
