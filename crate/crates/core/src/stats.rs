//! Estimators and tests shared by the Monte Carlo modules: compensated sums,
//! the [`MCEstimate`] return type, two-sample Kolmogorov–Smirnov, paired
//! one-sided comparisons and least-squares slopes.

use serde::{Deserialize, Serialize};

/// One-sided standard normal quantiles.
pub const Z_95: f64 = 1.644_853_626_951_472_2;
pub const Z_99: f64 = 2.326_347_874_040_840_8;

/// Kahan–Babuška (Neumaier) compensated sum.
#[derive(Debug, Clone, Copy, Default)]
pub struct KahanSum {
    sum: f64,
    comp: f64,
}

impl KahanSum {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

impl FromIterator<f64> for KahanSum {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut k = KahanSum::new();
        for x in iter {
            k.add(x);
        }
        k
    }
}

/// Compensated sum of a slice, in order.
pub fn ksum(xs: &[f64]) -> f64 {
    xs.iter().copied().collect::<KahanSum>().value()
}

/// Mean, standard error and sample count of a Monte Carlo run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MCEstimate {
    pub mean: f64,
    /// Sample standard deviation divided by sqrt(n_samples).
    pub std_error: f64,
    pub n_samples: usize,
    /// Fraction of paths on which the singularity cap was active.
    pub clip_fraction: f64,
    /// Sample excess kurtosis; large values flag an unreliable standard error.
    pub excess_kurtosis: f64,
}

impl MCEstimate {
    /// Two-pass estimate from raw samples (in the order given).
    pub fn from_samples(samples: &[f64]) -> Self {
        let n = samples.len();
        assert!(n >= 1, "MCEstimate needs at least one sample");
        let mean = ksum(samples) / n as f64;
        let mut m2 = KahanSum::new();
        let mut m4 = KahanSum::new();
        for &x in samples {
            let c = (x - mean) * (x - mean);
            m2.add(c);
            m4.add(c * c);
        }
        let (var, kurt) = if n > 1 {
            let pop2 = m2.value() / n as f64;
            let pop4 = m4.value() / n as f64;
            let k = if pop2 > 0.0 { pop4 / (pop2 * pop2) - 3.0 } else { 0.0 };
            (m2.value() / (n - 1) as f64, k)
        } else {
            (0.0, 0.0)
        };
        Self {
            mean,
            std_error: (var / n as f64).sqrt(),
            n_samples: n,
            clip_fraction: 0.0,
            excess_kurtosis: kurt,
        }
    }

    pub fn with_clip_fraction(mut self, clip_fraction: f64) -> Self {
        self.clip_fraction = clip_fraction;
        self
    }

    /// |mean − target| in units of the standard error (∞ if the error is 0 and
    /// the mean differs).
    pub fn z_score(&self, target: f64) -> f64 {
        let diff = (self.mean - target).abs();
        if diff == 0.0 {
            0.0
        } else if self.std_error == 0.0 {
            f64::INFINITY
        } else {
            diff / self.std_error
        }
    }

    /// Sample standard deviation.
    pub fn std_dev(&self) -> f64 {
        self.std_error * (self.n_samples as f64).sqrt()
    }
}

/// Mean and standard error of `xs`.
pub fn mean_se(xs: &[f64]) -> (f64, f64) {
    let e = MCEstimate::from_samples(xs);
    (e.mean, e.std_error)
}

/// Sample covariance of paired samples and the standard error of that
/// covariance estimate (delta method on the products).
pub fn covariance_se(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    assert_eq!(xs.len(), ys.len());
    let (mx, _) = mean_se(xs);
    let (my, _) = mean_se(ys);
    let prods: Vec<f64> = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).collect();
    let e = MCEstimate::from_samples(&prods);
    let n = xs.len() as f64;
    (e.mean * n / (n - 1.0).max(1.0), e.std_error)
}

/// Outcome of a two-sample Kolmogorov–Smirnov test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KsOutcome {
    pub statistic: f64,
    /// Asymptotic p-value with the Stephens small-sample correction.
    pub p_value: f64,
    pub n1: usize,
    pub n2: usize,
}

impl KsOutcome {
    /// Asymptotic critical value of D at significance `level`.
    pub fn critical_value(&self, level: f64) -> f64 {
        ks_critical_value(self.n1, self.n2, level)
    }
}

/// Two-sample Kolmogorov–Smirnov statistic sup |F₁ − F₂| and its p-value.
pub fn ks_two_sample(xs: &[f64], ys: &[f64]) -> KsOutcome {
    assert!(!xs.is_empty() && !ys.is_empty(), "KS test needs non-empty samples");
    let mut a = xs.to_vec();
    let mut b = ys.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (n1, n2) = (a.len(), b.len());
    let (mut i, mut j) = (0usize, 0usize);
    let mut d = 0.0f64;
    while i < n1 && j < n2 {
        let x = a[i].min(b[j]);
        while i < n1 && a[i] <= x {
            i += 1;
        }
        while j < n2 && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / n1 as f64 - j as f64 / n2 as f64).abs());
    }
    let ne = (n1 * n2) as f64 / (n1 + n2) as f64;
    let lambda = (ne.sqrt() + 0.12 + 0.11 / ne.sqrt()) * d;
    KsOutcome {
        statistic: d,
        p_value: kolmogorov_q(lambda),
        n1,
        n2,
    }
}

/// Kolmogorov survival function Q(λ) = 2 Σ (−1)^{k−1} exp(−2k²λ²).
pub fn kolmogorov_q(lambda: f64) -> f64 {
    if lambda < 0.2 {
        return 1.0;
    }
    let mut sum = 0.0;
    let mut sign = 1.0;
    for k in 1..200 {
        let term = (-2.0 * (k * k) as f64 * lambda * lambda).exp();
        sum += sign * term;
        if term < 1e-18 {
            break;
        }
        sign = -sign;
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// c(level)·sqrt((n1+n2)/(n1·n2)) with c(level) = sqrt(−ln(level/2)/2).
pub fn ks_critical_value(n1: usize, n2: usize, level: f64) -> f64 {
    let c = (-(level / 2.0).ln() / 2.0).sqrt();
    c * (((n1 + n2) as f64) / ((n1 * n2) as f64)).sqrt()
}

/// Paired one-sided comparison: z statistic of mean(a − b) > 0.
pub fn paired_z(a: &[f64], b: &[f64]) -> (f64, f64, f64) {
    assert_eq!(a.len(), b.len());
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let e = MCEstimate::from_samples(&diffs);
    let z = if e.std_error > 0.0 {
        e.mean / e.std_error
    } else if e.mean > 0.0 {
        f64::INFINITY
    } else if e.mean < 0.0 {
        f64::NEG_INFINITY
    } else {
        0.0
    };
    (e.mean, e.std_error, z)
}

/// Ordinary least-squares slope and its standard error.
pub fn ols_slope(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    assert_eq!(xs.len(), ys.len());
    let n = xs.len() as f64;
    let mx = ksum(xs) / n;
    let my = ksum(ys) / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let rss: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| {
            let r = y - intercept - slope * x;
            r * r
        })
        .sum();
    let se = if xs.len() > 2 {
        (rss / (n - 2.0) / sxx).sqrt()
    } else {
        0.0
    };
    (slope, se)
}

/// P(X ≥ k) for X ~ Binomial(n, p).
pub fn binomial_upper_tail(n: usize, p: f64, k: usize) -> f64 {
    let mut total = 0.0;
    for j in k..=n {
        total += binomial_pmf(n, p, j);
    }
    total.min(1.0)
}

fn binomial_pmf(n: usize, p: f64, k: usize) -> f64 {
    use crate::special::ln_gamma;
    let ln = ln_gamma(n as f64 + 1.0) - ln_gamma(k as f64 + 1.0) - ln_gamma((n - k) as f64 + 1.0)
        + k as f64 * p.ln()
        + (n - k) as f64 * (1.0 - p).ln();
    ln.exp()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn kahan_recovers_small_terms() {
        let mut k = KahanSum::new();
        k.add(1e16);
        for _ in 0..1000 {
            k.add(1.0);
        }
        k.add(-1e16);
        assert_eq!(k.value(), 1000.0);
    }

    #[test]
    fn estimate_of_constant_has_zero_error() {
        let e = MCEstimate::from_samples(&[1.0; 50]);
        assert_eq!(e.mean, 1.0);
        assert_eq!(e.std_error, 0.0);
        assert_eq!(e.z_score(1.0), 0.0);
    }

    #[test]
    fn std_error_definition() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        let e = MCEstimate::from_samples(&xs);
        let sd = (5.0f64 / 3.0).sqrt();
        assert!((e.std_error - sd / 2.0).abs() < 1e-15);
    }

    #[test]
    fn ks_statistic_small_case() {
        let out = ks_two_sample(&[1.0, 2.0, 3.0, 4.0], &[3.5, 4.5, 5.5, 6.5]);
        assert!((out.statistic - 0.75).abs() < 1e-15);
        let same = ks_two_sample(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]);
        assert_eq!(same.statistic, 0.0);
        assert_eq!(same.p_value, 1.0);
    }

    #[test]
    fn ks_critical_value_at_one_percent() {
        // c(0.01) = 1.6276
        let c = ks_critical_value(1, 1, 0.01) / 2f64.sqrt();
        assert!((c - 1.627_624).abs() < 1e-5);
        assert!((kolmogorov_q(1.627_624) - 0.01).abs() < 1e-5);
    }

    #[test]
    fn slope_of_exact_line() {
        let xs = [0.0, 1.0, 2.0, 3.0];
        let ys: Vec<f64> = xs.iter().map(|x| 2.5 * x - 1.0).collect();
        let (s, se) = ols_slope(&xs, &ys);
        assert!((s - 2.5).abs() < 1e-14 && se < 1e-12);
    }

    #[test]
    fn binomial_tail() {
        assert!((binomial_upper_tail(20, 0.01, 0) - 1.0).abs() < 1e-12);
        let p2 = binomial_upper_tail(20, 0.01, 2);
        assert!((p2 - (1.0 - 0.99f64.powi(20) - 20.0 * 0.01 * 0.99f64.powi(19))).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn ks_is_symmetric_and_bounded(xs in prop::collection::vec(-10.0f64..10.0, 1..40),
                                       ys in prop::collection::vec(-10.0f64..10.0, 1..40)) {
            let a = ks_two_sample(&xs, &ys);
            let b = ks_two_sample(&ys, &xs);
            prop_assert!((a.statistic - b.statistic).abs() < 1e-15);
            prop_assert!((0.0..=1.0).contains(&a.statistic));
        }

        #[test]
        fn kahan_matches_exact_integer_sum(xs in prop::collection::vec(-1000i64..1000, 0..200)) {
            let exact: i64 = xs.iter().sum();
            let f: Vec<f64> = xs.iter().map(|&x| x as f64).collect();
            prop_assert_eq!(ksum(&f), exact as f64);
        }
    }
}
