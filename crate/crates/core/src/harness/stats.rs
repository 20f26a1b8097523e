use statrs::distribution::{ContinuousCDF, StudentsT};

/// Sample mean and Bessel-corrected standard deviation (0 for one value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    (mean, (ss / (n - 1) as f64).sqrt())
}

/// Outcome of a paired comparison of `a` against `b`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairedTest {
    pub n: usize,
    pub mean_diff: f64,
    /// Pairs with `a >= b`.
    pub wins: usize,
    pub t: f64,
    /// One-sided p-value for the alternative `mean(a - b) > 0`.
    pub p_greater: f64,
    /// Two-sided p-value.
    pub p_two_sided: f64,
}

/// Paired Student t-test on `a - b`. With zero spread the p-values are
/// degenerate: 0 or 1 depending on the sign of the mean difference.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> PairedTest {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = d.len();
    let wins = a.iter().zip(b).filter(|(x, y)| x >= y).count();
    let (mean, sd) = mean_std(&d);
    if n < 2 || sd == 0.0 || !sd.is_finite() {
        let (pg, p2) = if mean > 0.0 {
            (0.0, 0.0)
        } else if mean < 0.0 {
            (1.0, 0.0)
        } else {
            (1.0, 1.0)
        };
        return PairedTest {
            n,
            mean_diff: mean,
            wins,
            t: f64::NAN,
            p_greater: if n < 2 { f64::NAN } else { pg },
            p_two_sided: if n < 2 { f64::NAN } else { p2 },
        };
    }
    let t = mean / (sd / (n as f64).sqrt());
    let dist = StudentsT::new(0.0, 1.0, (n - 1) as f64).expect("positive degrees of freedom");
    PairedTest {
        n,
        mean_diff: mean,
        wins,
        t,
        p_greater: 1.0 - dist.cdf(t),
        p_two_sided: 2.0 * (1.0 - dist.cdf(t.abs())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bessel_std() {
        let (m, s) = mean_std(&[2.0, 4.0, 4.0, 4.0, 5.0, 5.0, 7.0, 9.0]);
        assert_eq!(m, 5.0);
        assert!((s - (32.0f64 / 7.0).sqrt()).abs() < 1e-15);
        assert_eq!(mean_std(&[3.0]), (3.0, 0.0));
        assert!(mean_std(&[]).0.is_nan());
    }

    #[test]
    fn t_statistic_matches_hand_computation() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [0.5, 2.5, 2.0, 3.0];
        // d = [0.5, -0.5, 1, 1], mean 0.5, sd = sqrt(1.5 / 3)
        let r = paired_t_test(&a, &b);
        let want = 0.5 / ((0.5f64).sqrt() / 2.0);
        assert!((r.t - want).abs() < 1e-12);
        assert_eq!(r.wins, 3);
        assert!((r.p_two_sided - 2.0 * r.p_greater).abs() < 1e-12);
        // t = sqrt(2) with 3 dof: two-sided p from tables is about 0.252
        assert!((r.p_two_sided - 0.2522).abs() < 1e-3, "{}", r.p_two_sided);
    }

    #[test]
    fn identical_samples_are_degenerate() {
        let r = paired_t_test(&[1.0, 2.0], &[1.0, 2.0]);
        assert_eq!((r.p_greater, r.p_two_sided, r.wins), (1.0, 1.0, 2));
        let r = paired_t_test(&[2.0, 3.0], &[1.0, 2.0]);
        assert_eq!(r.p_greater, 0.0);
    }
}
